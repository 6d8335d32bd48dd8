"""Initialization distributions for sampling chains.

The default recipe fits a single full-covariance Gaussian to the training
data and draws chain starting points from it, so chains begin on the data
manifold rather than in uniform noise. A per-class mixture variant supports
labeled data; a uniform box is kept as the ablation baseline.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

INIT_MAGIC = b"EBMI"
_KIND_GAUSSIAN = 1
_KIND_MIXTURE = 2
_KIND_UNIFORM = 3


@dataclass
class GaussianInit:
    """N(mean, cov) stored via the lower Cholesky factor of cov + eps*I."""

    mean: np.ndarray
    chol_factor: np.ndarray
    eps_reg: float = 1e-4

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def draw(self, count, rng):
        z = rng.standard_normal((count, self.dim))
        return self.mean + z @ self.chol_factor.T


@dataclass
class MixtureInit:
    """Labeled Gaussian components with draw weights summing to one."""

    components: list  # [(label, GaussianInit), ...]
    weights: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if len(self.components) != len(self.weights):
            raise DataError("mixture component and weight counts differ")
        if abs(self.weights.sum() - 1.0) > 1e-12:
            raise DataError(f"mixture weights sum to {self.weights.sum()!r}, not 1")

    @property
    def dim(self) -> int:
        return self.components[0][1].dim

    def draw(self, count, rng):
        picks = rng.choice(len(self.components), size=count, p=self.weights)
        out = np.empty((count, self.dim))
        for i in range(len(self.components)):
            mask = picks == i
            if mask.any():
                out[mask] = self.components[i][1].draw(int(mask.sum()), rng)
        return out


@dataclass
class UniformInit:
    """Uniform box, the uninformative baseline."""

    lo: float = -1.0
    hi: float = 1.0
    dim: int = 2

    def draw(self, count, rng):
        return rng.uniform(self.lo, self.hi, size=(count, self.dim))


def fit_gaussian(data, eps_reg=1e-4) -> GaussianInit:
    """Moment-match a Gaussian to data rows (covariance divides by N)."""
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] < 1:
        raise DataError(f"need a non-empty 2-d sample array, got shape {data.shape}")
    if not np.isfinite(data).all():
        raise DataError("training data contains non-finite values")
    mean = data.mean(axis=0)
    centered = data - mean
    cov = centered.T @ centered / data.shape[0]
    reg = cov + eps_reg * np.eye(data.shape[1])
    try:
        chol = np.linalg.cholesky(reg)
    except np.linalg.LinAlgError:
        pivot = _failing_pivot(reg)
        raise DataError(
            f"covariance factorization failed at pivot {pivot}; "
            f"raise eps_reg above {eps_reg}"
        ) from None
    return GaussianInit(mean=mean, chol_factor=chol, eps_reg=float(eps_reg))


def _failing_pivot(matrix):
    for k in range(1, matrix.shape[0] + 1):
        try:
            np.linalg.cholesky(matrix[:k, :k])
        except np.linalg.LinAlgError:
            return k - 1
    return matrix.shape[0] - 1


def fit_per_class(data, labels, eps_reg=1e-4) -> MixtureInit:
    """One Gaussian per label, weighted by class frequency."""
    data = np.asarray(data, dtype=np.float64)
    labels = np.asarray(labels)
    if labels.shape[0] != data.shape[0]:
        raise DataError("label count does not match sample count")
    classes = np.unique(labels)
    components, weights = [], []
    for c in classes:
        mask = labels == c
        if not mask.any():
            raise DataError(f"class {c} has no samples")
        components.append((int(c), fit_gaussian(data[mask], eps_reg)))
        weights.append(mask.sum() / data.shape[0])
    return MixtureInit(components=components, weights=np.array(weights))


def sample_init(dist, count, rng, clamp_range=(-1.0, 1.0)):
    """Draw chain starting points; clamp to the data range unless disabled."""
    out = dist.draw(count, rng)
    if clamp_range is not None:
        out = np.clip(out, clamp_range[0], clamp_range[1])
    return out


# -- persistence --------------------------------------------------------------


def _pack_gaussian(g: GaussianInit) -> bytes:
    d = g.dim
    return (struct.pack("<Id", d, g.eps_reg)
            + np.ascontiguousarray(g.mean, dtype="<f8").tobytes()
            + np.ascontiguousarray(g.chol_factor, dtype="<f8").tobytes())


def _unpack_gaussian(buf, offset):
    d, eps = struct.unpack_from("<Id", buf, offset)
    offset += struct.calcsize("<Id")
    mean = np.frombuffer(buf, dtype="<f8", count=d, offset=offset).copy()
    offset += d * 8
    chol = np.frombuffer(buf, dtype="<f8", count=d * d, offset=offset).reshape(d, d).copy()
    offset += d * d * 8
    return GaussianInit(mean=mean, chol_factor=chol, eps_reg=eps), offset


def pack_init(dist) -> bytes:
    """Serialize a distribution to bytes (kind tag plus payload, no magic)."""
    if isinstance(dist, GaussianInit):
        return struct.pack("<I", _KIND_GAUSSIAN) + _pack_gaussian(dist)
    if isinstance(dist, MixtureInit):
        parts = [struct.pack("<II", _KIND_MIXTURE, len(dist.components))]
        for (label, g), w in zip(dist.components, dist.weights):
            parts.append(struct.pack("<id", label, w))
            parts.append(_pack_gaussian(g))
        return b"".join(parts)
    if isinstance(dist, UniformInit):
        return struct.pack("<IddI", _KIND_UNIFORM, dist.lo, dist.hi, dist.dim)
    raise DataError(f"cannot save distribution of type {type(dist).__name__}")


def unpack_init(buf, offset=0):
    """Inverse of pack_init; returns (distribution, next offset)."""
    (kind,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    if kind == _KIND_GAUSSIAN:
        return _unpack_gaussian(buf, offset)
    if kind == _KIND_MIXTURE:
        (n,) = struct.unpack_from("<I", buf, offset)
        offset += 4
        components, weights = [], []
        for _ in range(n):
            label, w = struct.unpack_from("<id", buf, offset)
            offset += struct.calcsize("<id")
            g, offset = _unpack_gaussian(buf, offset)
            components.append((label, g))
            weights.append(w)
        return MixtureInit(components=components, weights=np.array(weights)), offset
    if kind == _KIND_UNIFORM:
        lo, hi, dim = struct.unpack_from("<ddI", buf, offset)
        offset += struct.calcsize("<ddI")
        return UniformInit(lo=lo, hi=hi, dim=dim), offset
    raise DataError(f"unknown init distribution kind {kind}")


def save_init(dist, path):
    with open(path, "wb") as f:
        f.write(INIT_MAGIC)
        f.write(pack_init(dist))


def load_init(path):
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:4] != INIT_MAGIC:
        raise DataError(f"{path}: not an init distribution file")
    try:
        dist, _ = unpack_init(buf, 4)
    except struct.error:
        raise DataError(f"{path}: truncated init distribution file") from None
    return dist
