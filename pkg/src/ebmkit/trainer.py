"""The full training loop.

Per step: assemble batches (two-batch scheme in joint modes: the classifier
batch may be augmented, the density batch never is), draw chain starts from
the replay buffer, run the sampler, take one contrastive/joint gradient
step with SGD momentum, push the negatives back into the buffer. Per epoch:
checkpoint and render a sample grid. A windowed monitor halts training when
the energy gap runs away.
"""

from __future__ import annotations

import json
import struct
from collections import deque
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .datasets import Dataset, augment
from .diagnostics import render_grid
from .errors import ConfigError, DivergenceError, InvariantError
from .init_dist import fit_gaussian, pack_init, unpack_init
from .models import EnergyModel, Mode, build_model
from .objectives import LossBreakdown, gen_loss, inject_noise, joint_loss
from .sgld import ReplayBuffer, SgldConfig, draw_init, sgld_chain

TRAIN_STATE_MAGIC = b"EBMT"


@dataclass
class TrainConfig:
    mode: str = "uncond"
    epochs: int = 200
    iters_per_epoch: int = 390
    clf_batch: int = 128
    gen_batch: int = 64
    learning_rate: float = 1e-4
    momentum: float = 0.9
    sgld_steps: int = 10
    sgld_step_size: float = 1.0
    sgld_noise: float = 0.001
    sgld_clamp: str = "data"  # "data", "none", or "lo,hi"
    buffer_capacity: int = 10_000
    reinit_prob: float = 0.05
    reg_coeff: float = 0.05
    inject_sigma: float = 0.0
    augment_clf: bool = True
    augment_gen_batch: bool = False
    seed: int = 0
    divergence_threshold: float = 1e3
    divergence_window: int = 50

    def __post_init__(self):
        self.mode = Mode.parse(self.mode) if isinstance(self.mode, str) else self.mode
        for name in ("iters_per_epoch", "clf_batch", "gen_batch",
                     "buffer_capacity", "divergence_window"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if not 0.0 <= self.reinit_prob <= 1.0:
            raise ConfigError(f"reinit_prob must be in [0, 1], got {self.reinit_prob}")
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.reg_coeff < 0:
            raise ConfigError(f"reg_coeff must be >= 0, got {self.reg_coeff}")
        if self.divergence_threshold <= 0:
            raise ConfigError("divergence_threshold must be positive")
        self.resolve_clamp()  # validate eagerly

    def resolve_clamp(self, data_range=(-1.0, 1.0)):
        if self.sgld_clamp == "data":
            return tuple(data_range)
        if self.sgld_clamp == "none":
            return None
        parts = self.sgld_clamp.split(",")
        try:
            lo, hi = (float(p) for p in parts)
        except ValueError:
            raise ConfigError(
                f"sgld_clamp must be 'data', 'none', or 'lo,hi', got "
                f"{self.sgld_clamp!r}"
            ) from None
        return (lo, hi)

    def sgld_config(self, data_range=(-1.0, 1.0)) -> SgldConfig:
        return SgldConfig(steps=self.sgld_steps, step_size=self.sgld_step_size,
                          noise_scale=self.sgld_noise,
                          clamp_range=self.resolve_clamp(data_range))

    def to_dict(self) -> dict:
        out = asdict(self)
        out["mode"] = self.mode.value
        return out


_BOOL_WORDS = {"true": True, "1": True, "yes": True,
               "false": False, "0": False, "no": False}

_CONFIG_PARSERS = {
    "mode": str,
    "epochs": int, "iters_per_epoch": int, "clf_batch": int, "gen_batch": int,
    "sgld_steps": int, "buffer_capacity": int, "divergence_window": int,
    "seed": int,
    "learning_rate": float, "momentum": float, "sgld_step_size": float,
    "sgld_noise": float, "reinit_prob": float, "reg_coeff": float,
    "inject_sigma": float, "divergence_threshold": float,
    "sgld_clamp": str,
    "augment_clf": lambda v: _parse_bool("augment_clf", v),
    "augment_gen_batch": lambda v: _parse_bool("augment_gen_batch", v),
}


def _parse_bool(key, value):
    try:
        return _BOOL_WORDS[value.lower()]
    except KeyError:
        raise ConfigError(f"{key} must be true/false, got {value!r}") from None


def parse_config_file(path, **overrides) -> TrainConfig:
    """Flat key=value config; '#' starts a comment; unknown keys are errors."""
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in _CONFIG_PARSERS:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        try:
            values[key] = _CONFIG_PARSERS[key](value)
        except ValueError:
            raise ConfigError(
                f"{path}:{lineno}: bad value {value!r} for {key}"
            ) from None
    values.update(overrides)
    return TrainConfig(**values)


class SgdMomentum:
    """v <- m*v + g; theta <- theta - lr*v, per parameter."""

    def __init__(self, params: dict, learning_rate, momentum):
        self.params = params
        self.learning_rate = float(learning_rate)
        self.momentum = float(momentum)
        self.velocity = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self):
        for name, p in self.params.items():
            if p.grad is None:
                continue
            v = self.velocity[name]
            v *= self.momentum
            v += p.grad
            p.data -= self.learning_rate * v

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()


class RngBundle:
    """Named random streams spawned from one seed.

    Keeping data order, chain noise, weight init, and augmentation on
    separate generators means adding draws to one stream cannot shift any
    other, and each stream state round-trips through checkpoints.
    """

    STREAMS = ("data", "init", "sgld", "augment")

    def __init__(self, seed):
        children = np.random.SeedSequence(seed).spawn(len(self.STREAMS))
        for name, child in zip(self.STREAMS, children):
            setattr(self, name, np.random.default_rng(child))

    def state(self) -> dict:
        return {name: getattr(self, name).bit_generator.state
                for name in self.STREAMS}

    def set_state(self, states: dict):
        for name in self.STREAMS:
            getattr(self, name).bit_generator.state = states[name]


@dataclass
class Batch:
    x: np.ndarray
    y: np.ndarray | None = None
    augmented: bool = False


@dataclass
class TrainState:
    model: EnergyModel
    optimizer: SgdMomentum
    buffer: ReplayBuffer
    init_dist: object
    rngs: RngBundle
    data_range: tuple = (-1.0, 1.0)
    iteration: int = 0
    epoch: int = 0
    gap_window: deque = field(default_factory=lambda: deque(maxlen=50))


def divergence_monitor(history, threshold, window):
    """Scan a LossBreakdown stream; return the first diverged index or None.

    A row diverges the run when any tracked value is non-finite or when the
    mean energy gap over the trailing ``window`` rows exceeds ``threshold``.
    """
    if window < 1:
        raise ConfigError(f"window must be >= 1, got {window}")
    gaps = []
    for i, row in enumerate(history):
        values = [row.gen_loss, row.e_pos_mean, row.e_neg_mean,
                  row.e_pos_sq_mean, row.e_neg_sq_mean]
        if row.clf_loss is not None:
            values.append(row.clf_loss)
        if not np.isfinite(values).all():
            return i
        gaps.append(row.gap)
        if len(gaps) >= window and np.mean(gaps[-window:]) > threshold:
            return i
    return None


def _check_batch_tags(state, batch_clf, batch_gen, cfg):
    if batch_gen.augmented != cfg.augment_gen_batch:
        raise InvariantError(
            "density batch augmentation tag does not match the configured "
            f"scheme (got {batch_gen.augmented}, want {cfg.augment_gen_batch})"
        )
    if cfg.mode is Mode.UNCOND:
        return
    if batch_clf is None or batch_clf.y is None:
        raise InvariantError(f"mode {cfg.mode.value} needs a labeled classifier batch")
    if batch_clf.augmented != cfg.augment_clf:
        raise InvariantError(
            "classifier batch augmentation tag does not match the configured "
            f"scheme (got {batch_clf.augmented}, want {cfg.augment_clf})"
        )


def train_step(state: TrainState, batch_clf, batch_gen, cfg: TrainConfig) -> LossBreakdown:
    """One full update: sample negatives, backprop the loss, update, push."""
    _check_batch_tags(state, batch_clf, batch_gen, cfg)
    sgld_cfg = cfg.sgld_config(state.data_range)
    x0 = draw_init(state.buffer, state.init_dist, cfg.gen_batch,
                   state.rngs.sgld, clamp_range=state.data_range)
    x_neg = sgld_chain(state.model, x0, sgld_cfg, state.rngs.sgld)

    x_pos = batch_gen.x
    if cfg.inject_sigma > 0:
        x_pos = inject_noise(x_pos, cfg.inject_sigma, state.rngs.augment)

    state.optimizer.zero_grad()
    if cfg.mode is Mode.UNCOND:
        loss, stats = gen_loss(state.model, x_pos, x_neg, cfg.reg_coeff)
    else:
        loss, stats = joint_loss(state.model, batch_clf.x, batch_clf.y,
                                 x_pos, x_neg, cfg.reg_coeff)

    if not np.isfinite(stats.total):
        raise DivergenceError(
            f"loss became non-finite at iteration {state.iteration}",
            iteration=state.iteration, value=stats.total,
        )
    if stats.gap > cfg.divergence_threshold:
        raise DivergenceError(
            f"energy gap {stats.gap:.3g} exceeded threshold "
            f"{cfg.divergence_threshold:.3g} at iteration {state.iteration}",
            iteration=state.iteration, value=stats.gap,
        )

    loss.backward()
    state.optimizer.step()
    state.buffer.push(x_neg, state.rngs.sgld)
    state.gap_window.append(stats)
    state.iteration += 1
    return stats


def _draw_batches(state, cfg, dataset):
    rng = state.rngs.data
    gen_idx = rng.integers(len(dataset), size=cfg.gen_batch)
    x_gen = dataset.samples[gen_idx]
    if cfg.augment_gen_batch:
        x_gen = augment(x_gen, dataset, state.rngs.augment)
    batch_gen = Batch(x=x_gen, augmented=cfg.augment_gen_batch)
    if cfg.mode is Mode.UNCOND:
        return None, batch_gen
    clf_idx = rng.integers(len(dataset), size=cfg.clf_batch)
    x_clf = dataset.samples[clf_idx]
    if cfg.augment_clf:
        x_clf = augment(x_clf, dataset, state.rngs.augment)
    batch_clf = Batch(x=x_clf, y=dataset.labels[clf_idx], augmented=cfg.augment_clf)
    return batch_clf, batch_gen


_CSV_HEADER = "iter,clf_loss,gen_loss,e_pos_mean,e_neg_mean,e_pos_sq_mean,e_neg_sq_mean"


def _csv_row(iteration, stats: LossBreakdown, joint: bool) -> str:
    cells = [
        str(iteration),
        repr(stats.clf_loss) if stats.clf_loss is not None else "",
        repr(stats.gen_loss),
        repr(stats.e_pos_mean),
        repr(stats.e_neg_mean),
        repr(stats.e_pos_sq_mean),
        repr(stats.e_neg_sq_mean),
    ]
    if joint:
        cells.append(repr(stats.clf_acc) if stats.clf_acc is not None else "")
    return ",".join(cells)


def init_state(cfg: TrainConfig, dataset: Dataset, init_dist=None) -> TrainState:
    """Build model, optimizer, buffer, and rng streams for a fresh run."""
    if len(dataset) == 0:
        raise ConfigError("dataset is empty")
    if cfg.mode is not Mode.UNCOND and dataset.labels is None:
        raise ConfigError(f"mode {cfg.mode.value} needs a labeled dataset")
    rngs = RngBundle(cfg.seed)
    model = build_model(dataset.dim, cfg.mode,
                        num_classes=dataset.num_classes or None,
                        rng=rngs.init)
    if init_dist is None:
        init_dist = fit_gaussian(dataset.samples)
    optimizer = SgdMomentum(model.named_parameters(), cfg.learning_rate,
                            cfg.momentum)
    buffer = ReplayBuffer(dataset.dim, capacity=cfg.buffer_capacity,
                          reinit_prob=cfg.reinit_prob)
    return TrainState(model=model, optimizer=optimizer, buffer=buffer,
                      init_dist=init_dist, rngs=rngs, data_range=dataset.range,
                      gap_window=deque(maxlen=cfg.divergence_window))


def train_loop(cfg: TrainConfig, dataset: Dataset, out_dir=None,
               init_dist=None, resume_state=None) -> TrainState:
    """Run epochs x iters_per_epoch steps; write logs, checkpoints, grids.

    Divergence stops training and re-raises after closing the log; the last
    end-of-epoch checkpoint on disk is left as the most recent good state.
    """
    state = resume_state if resume_state is not None else init_state(
        cfg, dataset, init_dist)
    out = Path(out_dir) if out_dir is not None else None
    log_file = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        header = _CSV_HEADER + (",acc" if cfg.mode is not Mode.UNCOND else "")
        fresh = state.iteration == 0 or not (out / "metrics.csv").exists()
        log_file = open(out / "metrics.csv", "w" if fresh else "a")
        if fresh:
            log_file.write(header + "\n")
    try:
        while state.epoch < cfg.epochs:
            for _ in range(cfg.iters_per_epoch):
                batch_clf, batch_gen = _draw_batches(state, cfg, dataset)
                stats = train_step(state, batch_clf, batch_gen, cfg)
                if log_file is not None:
                    log_file.write(_csv_row(state.iteration - 1, stats,
                                            cfg.mode is not Mode.UNCOND) + "\n")
            state.epoch += 1
            if log_file is not None:
                log_file.flush()
            if out is not None:
                save_checkpoint(state, cfg, out / f"epoch_{state.epoch:04d}.ebmt")
                _render_epoch_samples(state, dataset, out)
    finally:
        if log_file is not None:
            log_file.close()
    if out is not None and cfg.epochs == 0:
        save_checkpoint(state, cfg, out / "epoch_0000.ebmt")
    return state


def _render_epoch_samples(state, dataset, out):
    count = min(len(state.buffer), 64)
    if count == 0:
        return
    samples = state.buffer.snapshot()[-count:]
    if dataset.raster_shape is None:
        render_grid(samples, (8, 8), out / f"samples_{state.epoch:04d}.txt")
    else:
        ext = "pgm" if dataset.raster_shape[2] == 1 else "ppm"
        rows = int(np.ceil(count / 8))
        render_grid(samples, (rows, 8), out / f"samples_{state.epoch:04d}.{ext}",
                    raster_shape=dataset.raster_shape,
                    value_range=dataset.range)


# -- checkpointing ------------------------------------------------------------


def save_checkpoint(state: TrainState, cfg: TrainConfig, path):
    """Model, optimizer moments, buffer, init dist, rng states; bitwise."""
    named = state.model.named_parameters()
    init_blob = pack_init(state.init_dist)
    header = {
        "version": 1,
        "config": cfg.to_dict(),
        "iteration": state.iteration,
        "epoch": state.epoch,
        "data_range": list(state.data_range),
        "model": {
            "in_dim": state.model.in_dim,
            "hidden": list(state.model.hidden),
            "num_classes": state.model.num_classes,
            "slope": state.model.slope,
            "mode": state.model.mode.value,
        },
        "params": [{"name": k, "shape": list(v.data.shape)}
                   for k, v in named.items()],
        "rng": state.rngs.state(),
        "buffer": {"size": state.buffer.size, "dim": state.buffer.dim,
                   "capacity": state.buffer.capacity,
                   "reinit_prob": state.buffer.reinit_prob},
        "init_len": len(init_blob),
        "gap_window": [asdict(s) for s in state.gap_window],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(TRAIN_STATE_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for v in named.values():
            f.write(np.ascontiguousarray(v.data, dtype="<f8").tobytes())
        for k in named:
            f.write(np.ascontiguousarray(state.optimizer.velocity[k],
                                         dtype="<f8").tobytes())
        f.write(np.ascontiguousarray(state.buffer.snapshot(), dtype="<f8").tobytes())
        f.write(init_blob)


def load_checkpoint(path) -> tuple[TrainState, TrainConfig]:
    with open(path, "rb") as f:
        if f.read(4) != TRAIN_STATE_MAGIC:
            raise ConfigError(f"{path}: not a training checkpoint")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode("utf-8"))
        if header.get("version") != 1:
            raise ConfigError(f"{path}: unsupported checkpoint version")
        cfg = TrainConfig(**header["config"])
        meta = header["model"]
        model = EnergyModel(meta["in_dim"], hidden=meta["hidden"],
                            mode=Mode(meta["mode"]),
                            num_classes=meta["num_classes"], slope=meta["slope"])
        named = model.named_parameters()

        def read_array(shape):
            count = int(np.prod(shape)) if shape else 1
            raw = f.read(count * 8)
            if len(raw) != count * 8:
                raise ConfigError(f"{path}: truncated checkpoint payload")
            return np.frombuffer(raw, dtype="<f8").reshape(shape).copy()

        for entry in header["params"]:
            named[entry["name"]].data = read_array(tuple(entry["shape"]))
        optimizer = SgdMomentum(named, cfg.learning_rate, cfg.momentum)
        for entry in header["params"]:
            optimizer.velocity[entry["name"]] = read_array(tuple(entry["shape"]))

        bmeta = header["buffer"]
        rows = read_array((bmeta["size"], bmeta["dim"]))
        buffer = ReplayBuffer.from_rows(rows, capacity=bmeta["capacity"],
                                        reinit_prob=bmeta["reinit_prob"])

        init_blob = f.read(header["init_len"])
        if len(init_blob) != header["init_len"]:
            raise ConfigError(f"{path}: truncated init distribution payload")
        init_dist, _ = unpack_init(init_blob)

    rngs = RngBundle(cfg.seed)
    rngs.set_state(header["rng"])
    gap_window = deque((LossBreakdown(**row) for row in header["gap_window"]),
                       maxlen=cfg.divergence_window)
    return TrainState(model=model, optimizer=optimizer, buffer=buffer,
                      init_dist=init_dist, rngs=rngs,
                      data_range=tuple(header["data_range"]),
                      iteration=header["iteration"], epoch=header["epoch"],
                      gap_window=gap_window), cfg


def resume_compatible(state_cfg: TrainConfig, cfg: TrainConfig):
    """Resuming with a different sampler or objective is almost never what
    the caller wants; sizes may differ (more epochs), structure may not."""
    if state_cfg.mode is not cfg.mode:
        raise ConfigError(
            f"checkpoint mode {state_cfg.mode.value} does not match "
            f"configured mode {cfg.mode.value}"
        )
    if state_cfg.seed != cfg.seed:
        raise ConfigError(
            f"checkpoint seed {state_cfg.seed} does not match configured "
            f"seed {cfg.seed}"
        )
