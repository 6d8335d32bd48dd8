"""Sample-quality and representation diagnostics.

Covers kernel two-sample distance between generated and real data, energy
histograms across sample groups, PCA feature projections, and quick-look
rendering of sample batches (text scatter for 2-d data, packed PNM tiles
for rasters).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .errors import DataError


def mmd(a, b, bandwidth=None) -> float:
    """Unbiased squared kernel distance between two sample sets.

    Gaussian kernel exp(-d^2 / (2 bw^2)); the bandwidth defaults to the
    median pairwise distance of the pooled sets. The unbiased estimator can
    dip below zero on close sets, so the result is floored at zero.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DataError(f"incompatible sample shapes {a.shape} and {b.shape}")
    m, n = a.shape[0], b.shape[0]
    if m < 2 or n < 2:
        raise DataError("each sample set needs at least two rows")
    if bandwidth is None:
        pooled = np.vstack([a, b])
        dists = cdist(pooled, pooled)
        upper = dists[np.triu_indices(pooled.shape[0], k=1)]
        med = float(np.median(upper))
        bandwidth = med if med > 0 else 1.0
    gamma = 1.0 / (2.0 * bandwidth * bandwidth)
    kxx = np.exp(-gamma * cdist(a, a, "sqeuclidean"))
    kyy = np.exp(-gamma * cdist(b, b, "sqeuclidean"))
    kxy = np.exp(-gamma * cdist(a, b, "sqeuclidean"))
    sum_xx = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    sum_yy = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    sum_xy = kxy.mean()
    return max(float(sum_xx + sum_yy - 2.0 * sum_xy), 0.0)


# -- energy histograms --------------------------------------------------------


@dataclass
class EnergyHistogram:
    edges: np.ndarray
    counts: dict  # group name -> integer counts per bin

    def to_csv(self, path):
        names = list(self.counts)
        with open(path, "w") as f:
            f.write("bin_lo,bin_hi," + ",".join(names) + "\n")
            for i in range(len(self.edges) - 1):
                row = [repr(float(self.edges[i])), repr(float(self.edges[i + 1]))]
                row += [str(int(self.counts[n][i])) for n in names]
                f.write(",".join(row) + "\n")

    def render_text(self, width=50) -> str:
        peak = max(int(c.max()) for c in self.counts.values()) or 1
        lines = []
        for name, counts in self.counts.items():
            lines.append(f"[{name}]")
            for i, c in enumerate(counts):
                bar = "#" * int(round(width * c / peak))
                lines.append(f"{self.edges[i]:+9.3f} {bar}")
        return "\n".join(lines)


def energy_histogram(model, groups: dict, bins=40, labels=None) -> EnergyHistogram:
    """Histogram -energy (log-density up to a constant) per group.

    All groups share one set of bin edges. A group listed in ``labels``
    (name -> integer class array) is split into one series per class,
    keyed ``name[c]``.
    """
    labels = labels or {}
    series = {}
    for name, samples in groups.items():
        samples = np.asarray(samples, dtype=np.float64)
        if samples.ndim != 2 or samples.shape[0] == 0:
            raise DataError(f"group {name!r} is empty or not 2-d")
        neg_energy = -model.energy(samples).data
        if name in labels:
            y = np.asarray(labels[name])
            if y.shape != (samples.shape[0],):
                raise DataError(
                    f"labels for group {name!r} have shape {y.shape}, "
                    f"expected ({samples.shape[0]},)"
                )
            for c in np.unique(y):
                series[f"{name}[{int(c)}]"] = neg_energy[y == c]
        else:
            series[name] = neg_energy
    pooled = np.concatenate(list(series.values()))
    edges = np.histogram_bin_edges(pooled, bins=bins)
    counts = {name: np.histogram(e, bins=edges)[0] for name, e in series.items()}
    return EnergyHistogram(edges=edges, counts=counts)


# -- PCA ----------------------------------------------------------------------


def pca_project(features, k=2):
    """Project rows onto the top-k principal directions.

    Returns (projections [N, k], explained variance fractions [k]) where the
    fractions are relative to the total variance over all directions. Each
    direction is sign-fixed so its largest-magnitude entry is positive.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise DataError(f"need at least two feature rows, got shape {x.shape}")
    if not 1 <= k <= min(x.shape):
        raise DataError(f"k={k} out of range for features of shape {x.shape}")
    centered = x - x.mean(axis=0)
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    components = vt[:k]
    for row in components:
        pivot = np.argmax(np.abs(row))
        if row[pivot] < 0:
            row *= -1.0
    total = float((s ** 2).sum())
    if total == 0.0:
        raise DataError("features have zero variance")
    explained = (s[:k] ** 2) / total
    return centered @ components.T, explained


# -- rendering ----------------------------------------------------------------

_SCATTER_W = 61
_SCATTER_H = 31
_DENSITY = " .:*#@"


def _scatter_text(samples, lo, hi) -> str:
    grid = np.zeros((_SCATTER_H, _SCATTER_W), dtype=np.int64)
    span = hi - lo
    for x, y in samples:
        col = int(round((x - lo) / span * (_SCATTER_W - 1)))
        row = int(round((hi - y) / span * (_SCATTER_H - 1)))
        if 0 <= row < _SCATTER_H and 0 <= col < _SCATTER_W:
            grid[row, col] += 1
    def char(c):
        if c == 0:
            return " "
        return _DENSITY[min(int(np.log2(c)) + 1, len(_DENSITY) - 1)]
    border = "+" + "-" * _SCATTER_W + "+"
    body = ["|" + "".join(char(c) for c in row) + "|" for row in grid]
    return "\n".join([border, *body, border]) + "\n"


def render_grid(samples, layout, path, raster_shape=None, value_range=(-1.0, 1.0)):
    """Write a quick look at a sample batch.

    2-d samples become a text scatter plot. Raster samples are quantized to
    bytes and tiled row-major into a single PGM (1 channel) or PPM
    (3 channels) image. ``layout`` is (rows, cols) and must cover the batch.
    """
    samples = np.asarray(samples, dtype=np.float64)
    rows, cols = layout
    if raster_shape is None:
        if samples.shape[1] != 2:
            raise DataError(f"text scatter needs 2-d samples, got {samples.shape}")
        with open(path, "w") as f:
            f.write(_scatter_text(samples, value_range[0], value_range[1]))
        return path
    if rows * cols < samples.shape[0]:
        raise DataError(f"layout {layout} too small for {samples.shape[0]} samples")
    h, w, c = raster_shape
    if c not in (1, 3):
        raise DataError(f"can only render 1- or 3-channel rasters, got {c}")
    lo, hi = value_range
    quant = np.clip(np.round((samples - lo) / (hi - lo) * 255.0), 0, 255)
    quant = quant.astype(np.uint8).reshape(-1, h, w, c)
    canvas = np.zeros((rows * h, cols * w, c), dtype=np.uint8)
    for i in range(quant.shape[0]):
        r, cc = divmod(i, cols)
        canvas[r * h:(r + 1) * h, cc * w:(cc + 1) * w] = quant[i]
    magic = b"P5" if c == 1 else b"P6"
    with open(path, "wb") as f:
        f.write(magic + b"\n%d %d\n255\n" % (cols * w, rows * h))
        f.write(canvas.tobytes())
    return path


def read_pnm(path):
    """Read a binary PGM/PPM written by render_grid; returns (H, W, C) bytes."""
    with open(path, "rb") as f:
        blob = f.read()
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(blob) and blob[pos] in b" \t\r\n":
            pos += 1
        start = pos
        while pos < len(blob) and blob[pos] not in b" \t\r\n":
            pos += 1
        fields.append(blob[start:pos])
    pos += 1  # single whitespace after maxval
    magic, w, h = fields[0], int(fields[1]), int(fields[2])
    if magic not in (b"P5", b"P6"):
        raise DataError(f"{path}: unsupported image magic {magic!r}")
    if int(fields[3]) != 255:
        raise DataError(f"{path}: unsupported maxval {fields[3]!r}")
    c = 1 if magic == b"P5" else 3
    data = np.frombuffer(blob, dtype=np.uint8, count=h * w * c, offset=pos)
    return data.reshape(h, w, c)


# -- bundled evaluation -------------------------------------------------------


@dataclass
class EvalReport:
    mmd_value: float
    mean_gap: list
    cov_frobenius_gap: float
    energy_stats: dict  # group name -> (mean, std)
    accuracy: float | None = None

    def to_json(self) -> str:
        return json.dumps({
            "mmd": self.mmd_value,
            "mean_gap": self.mean_gap,
            "cov_frobenius_gap": self.cov_frobenius_gap,
            "energy_stats": {
                name: {"mean": m, "std": s}
                for name, (m, s) in self.energy_stats.items()
            },
            "accuracy": self.accuracy,
        }, indent=2, sort_keys=True)


def build_eval_report(model, dataset, samples, inits=None, uniform=None,
                      bandwidth=None) -> EvalReport:
    """Compare generated samples against a dataset through one model.

    ``inits`` are the chain starting points and ``uniform`` a box-uniform
    reference set; each contributes an energy-stats row when given.
    """
    data = dataset.samples
    limit = min(len(data), len(samples), 2000)
    ref, gen = data[:limit], samples[:limit]
    gap = gen.mean(axis=0) - ref.mean(axis=0)
    dr = ref - ref.mean(axis=0)
    dg = gen - gen.mean(axis=0)
    cov_gap = np.linalg.norm(dg.T @ dg / len(dg) - dr.T @ dr / len(dr))

    groups = {"data": ref, "generated": gen}
    if inits is not None:
        groups["init"] = np.asarray(inits)
    if uniform is not None:
        groups["uniform"] = np.asarray(uniform)
    stats = {}
    for name, block in groups.items():
        e = model.energy(block).data
        stats[name] = (float(e.mean()), float(e.std()))

    report = EvalReport(
        mmd_value=mmd(ref, gen, bandwidth=bandwidth),
        mean_gap=[float(v) for v in gap],
        cov_frobenius_gap=float(cov_gap),
        energy_stats=stats,
    )
    if dataset.labels is not None and getattr(model, "classifier_head", None) is not None:
        pred = model.class_posterior(data).argmax(axis=1)
        report.accuracy = float((pred == dataset.labels).mean())
    return report
