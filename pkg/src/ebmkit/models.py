"""Energy network architectures.

One shared fully connected trunk feeds up to two heads:

* ``UNCOND``: a scalar energy head only, for unconditional density training.
* ``MJEM``: classifier logits plus a separate scalar energy head, so the
  energy magnitude can be regularized without touching the logits.
* ``LSEJEM``: classifier logits only; the energy is minus the log-sum-exp
  of the logits, reusing the classifier as the density model.

Trunks are small MLPs with leaky-relu activations; penultimate activations
double as the feature space for manifold diagnostics.
"""

from __future__ import annotations

import enum
import json
import struct
from contextlib import contextmanager

import numpy as np

from .errors import ConfigError
from .tensor import Tensor, affine, leaky_relu, logsumexp

CHECKPOINT_MAGIC = b"EBMC"


class Mode(enum.Enum):
    UNCOND = "uncond"
    MJEM = "mjem"
    LSEJEM = "lsejem"

    @classmethod
    def parse(cls, name: str) -> "Mode":
        try:
            return cls(name.lower())
        except ValueError:
            raise ConfigError(f"unknown model mode {name!r}") from None


def _init_layer(fan_in, fan_out, rng):
    bound = 1.0 / np.sqrt(fan_in)
    w = Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)), requires_grad=True)
    b = Tensor(rng.uniform(-bound, bound, size=fan_out), requires_grad=True)
    return w, b


class EnergyModel:
    """Feature trunk plus mode-dependent classifier and/or energy heads."""

    def __init__(self, in_dim, hidden=(128, 128, 128), mode=Mode.UNCOND,
                 num_classes=None, slope=0.2, rng=None):
        if isinstance(mode, str):
            mode = Mode.parse(mode)
        if mode is not Mode.UNCOND and not num_classes:
            raise ConfigError(f"mode {mode.value} needs num_classes")
        if rng is None:
            rng = np.random.default_rng(0)
        self.in_dim = int(in_dim)
        self.hidden = tuple(int(h) for h in hidden)
        self.mode = mode
        self.num_classes = int(num_classes) if num_classes else None
        self.slope = float(slope)

        sizes = [self.in_dim, *self.hidden]
        self.trunk = [_init_layer(sizes[i], sizes[i + 1], rng)
                      for i in range(len(sizes) - 1)]
        feat_dim = sizes[-1]
        self.classifier_head = (
            _init_layer(feat_dim, self.num_classes, rng)
            if mode in (Mode.MJEM, Mode.LSEJEM) else None
        )
        self.energy_head = (
            _init_layer(feat_dim, 1, rng)
            if mode in (Mode.UNCOND, Mode.MJEM) else None
        )

    # -- parameters ---------------------------------------------------------

    def named_parameters(self):
        params = {}
        for i, (w, b) in enumerate(self.trunk):
            params[f"trunk.{i}.w"] = w
            params[f"trunk.{i}.b"] = b
        if self.classifier_head is not None:
            params["clf.w"], params["clf.b"] = self.classifier_head
        if self.energy_head is not None:
            params["energy.w"], params["energy.b"] = self.energy_head
        return params

    def parameters(self):
        return list(self.named_parameters().values())

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    @contextmanager
    def frozen(self):
        """Temporarily stop gradients flowing into the parameters.

        Used while running sampling chains, where only input gradients are
        needed and parameter gradients would both waste time and pollute
        the training step's accumulators.
        """
        params = self.parameters()
        saved = [p.requires_grad for p in params]
        for p in params:
            p.requires_grad = False
        try:
            yield self
        finally:
            for p, s in zip(params, saved):
                p.requires_grad = s

    # -- forward passes -----------------------------------------------------

    def _as_input(self, x):
        t = x if isinstance(x, Tensor) else Tensor(x)
        if t.data.ndim != 2 or t.data.shape[1] != self.in_dim:
            raise ValueError(
                f"input shape {t.data.shape} does not match model dim {self.in_dim}"
            )
        return t

    def features(self, x) -> Tensor:
        """Penultimate-layer activations, shape [B, H]."""
        h = self._as_input(x)
        for w, b in self.trunk:
            h = leaky_relu(affine(h, w, b), self.slope)
        return h

    def logits(self, x) -> Tensor:
        if self.classifier_head is None:
            raise ConfigError(f"mode {self.mode.value} has no classifier head")
        w, b = self.classifier_head
        return affine(self.features(x), w, b)

    def energy(self, x) -> Tensor:
        """Scalar energy per row, shape [B]."""
        if self.energy_head is not None:
            w, b = self.energy_head
            out = affine(self.features(x), w, b)
            return out.reshape(out.data.shape[0])
        if self.classifier_head is not None:
            return -logsumexp(self.logits(x))
        raise ConfigError(f"mode {self.mode.value} has no head to compute energy")

    def class_posterior(self, x) -> np.ndarray:
        """Softmax over logits as a plain array; rows sum to one."""
        logits = self.logits(x).data
        shifted = np.exp(logits - logits.max(axis=1, keepdims=True))
        return shifted / shifted.sum(axis=1, keepdims=True)

    # -- checkpointing --------------------------------------------------------

    def save(self, path, seed=None):
        """Write header plus named float64 little-endian parameter arrays."""
        named = self.named_parameters()
        header = {
            "mode": self.mode.value,
            "in_dim": self.in_dim,
            "hidden": list(self.hidden),
            "num_classes": self.num_classes,
            "slope": self.slope,
            "seed": seed,
            "params": [{"name": k, "shape": list(v.data.shape)} for k, v in named.items()],
        }
        blob = json.dumps(header, sort_keys=True).encode("utf-8")
        with open(path, "wb") as f:
            f.write(CHECKPOINT_MAGIC)
            f.write(struct.pack("<I", len(blob)))
            f.write(blob)
            for v in named.values():
                f.write(np.ascontiguousarray(v.data, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as f:
            magic = f.read(4)
            if magic != CHECKPOINT_MAGIC:
                raise ConfigError(f"{path}: not a model checkpoint (magic {magic!r})")
            (hlen,) = struct.unpack("<I", f.read(4))
            header = json.loads(f.read(hlen).decode("utf-8"))
            model = cls(
                header["in_dim"],
                hidden=header["hidden"],
                mode=Mode(header["mode"]),
                num_classes=header["num_classes"],
                slope=header["slope"],
            )
            named = model.named_parameters()
            for entry in header["params"]:
                shape = tuple(entry["shape"])
                count = int(np.prod(shape)) if shape else 1
                raw = f.read(count * 8)
                if len(raw) != count * 8:
                    raise ConfigError(f"{path}: truncated parameter payload")
                named[entry["name"]].data = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
        return model


def build_model(in_dim, mode, num_classes=None, rng=None, slope=0.2):
    """Default architecture rule: width 128 for 2-d toys, 256 otherwise."""
    width = 128 if in_dim == 2 else 256
    return EnergyModel(in_dim, hidden=(width, width, width), mode=mode,
                       num_classes=num_classes, slope=slope, rng=rng)
