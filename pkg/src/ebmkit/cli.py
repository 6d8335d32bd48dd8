"""Command-line entry points.

Subcommands: fit-init, train, sample, eval, inspect-init, bench-stability.
Every writing command drops a manifest.json recording the command, seed,
resolved config, and content hashes of its inputs, so reruns with identical
inputs produce identical output trees.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from .datasets import Dataset, load_grid, synth_2d
from .diagnostics import build_eval_report, energy_histogram, render_grid
from .errors import ConfigError, DataError, DivergenceError, InvariantError
from .init_dist import (
    GaussianInit,
    MixtureInit,
    UniformInit,
    fit_gaussian,
    fit_per_class,
    load_init,
    sample_init,
    save_init,
)
from .models import Mode
from .sgld import sgld_chain
from .trainer import (
    RngBundle,
    TrainConfig,
    load_checkpoint,
    parse_config_file,
    train_loop,
)

_SYNTH_KINDS = ("eight_gaussians", "two_rings", "checkerboard", "two_moons")


def parse_dataset_spec(spec, seed) -> Dataset:
    """Either 'kind:n[:noise]' for a synthetic set or a path to a grid file."""
    if spec.endswith(".ebmg") or os.path.sep in spec:
        if not Path(spec).exists():
            raise DataError(f"dataset file {spec!r} not found")
        return load_grid(spec)
    parts = spec.split(":")
    kind = parts[0]
    if kind not in _SYNTH_KINDS:
        raise DataError(
            f"unknown dataset {kind!r}; expected one of {', '.join(_SYNTH_KINDS)} "
            f"or a .ebmg file path"
        )
    if len(parts) < 2 or len(parts) > 3:
        raise DataError(f"dataset spec {spec!r} must look like kind:count[:noise]")
    try:
        n = int(parts[1])
        noise = float(parts[2]) if len(parts) == 3 else None
    except ValueError:
        raise DataError(f"bad numbers in dataset spec {spec!r}") from None
    if n < 1:
        raise DataError(f"dataset count must be positive, got {n}")
    return synth_2d(kind, n, seed=seed, noise=noise)


def _sha256_text(text) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _input_hashes(args) -> dict:
    hashes = {}
    for name in ("data", "config", "checkpoint", "init_file"):
        value = getattr(args, name, None)
        if value is None:
            continue
        path = Path(value)
        if path.exists():
            hashes[name] = hashlib.sha256(path.read_bytes()).hexdigest()
        else:
            hashes[name] = _sha256_text(str(value))
    return hashes


def write_manifest(out_dir, args, config=None, extra=None):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": args.command,
        "seed": getattr(args, "seed", None),
        "config": config.to_dict() if config is not None else None,
        "inputs": _input_hashes(args),
    }
    if extra:
        manifest.update(extra)
    with open(out_dir / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def _build_init(kind, dataset):
    if kind == "informative":
        return fit_gaussian(dataset.samples)
    if kind == "mixture":
        if dataset.labels is None:
            raise DataError("mixture init needs a labeled dataset")
        return fit_per_class(dataset.samples, dataset.labels)
    if kind == "uniform":
        lo, hi = dataset.range
        return UniformInit(lo=lo, hi=hi, dim=dataset.dim)
    raise ConfigError(f"unknown init kind {kind!r}")


def _resolve_config(args) -> TrainConfig:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if getattr(args, "mode", None) is not None:
        overrides["mode"] = args.mode
    if getattr(args, "k", None) is not None:
        overrides["sgld_steps"] = args.k
    if getattr(args, "inject_sigma", None) is not None:
        overrides["inject_sigma"] = args.inject_sigma
    if getattr(args, "reg_coeff", None) is not None:
        overrides["reg_coeff"] = args.reg_coeff
    if args.config is not None:
        return parse_config_file(args.config, **overrides)
    return TrainConfig(**overrides)


def _render_samples(samples, dataset_like, out_path):
    raster = getattr(dataset_like, "raster_shape", None)
    if raster is None:
        render_grid(samples, (8, 8), out_path.with_suffix(".txt"))
    else:
        rows = max(int(np.ceil(samples.shape[0] / 8)), 1)
        ext = ".pgm" if raster[2] == 1 else ".ppm"
        render_grid(samples, (rows, 8), out_path.with_suffix(ext),
                    raster_shape=raster)


def _write_samples_csv(samples, path):
    with open(path, "w") as f:
        for row in samples:
            f.write(",".join(repr(float(v)) for v in row) + "\n")


# -- commands -----------------------------------------------------------------


def cmd_fit_init(args) -> int:
    dataset = parse_dataset_spec(args.data, args.seed or 0)
    dist = _build_init(args.init, dataset)
    out = Path(args.out)
    write_manifest(out, args)
    save_init(dist, out / "init.ebmi")
    return 0


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    dataset = parse_dataset_spec(args.data, cfg.seed)
    init_dist = _build_init(args.init, dataset)
    out = Path(args.out)
    write_manifest(out, args, config=cfg)
    save_init(init_dist, out / "init.ebmi")
    state = train_loop(cfg, dataset, out_dir=out, init_dist=init_dist)
    state.model.save(out / "model.ebmc", seed=cfg.seed)
    return 0


def cmd_sample(args) -> int:
    state, cfg = load_checkpoint(args.checkpoint)
    out = Path(args.out)
    write_manifest(out, args, config=cfg)
    count = args.count
    if count == 0:
        _write_samples_csv(np.empty((0, state.model.in_dim)), out / "samples.csv")
        return 0
    if args.sample_mode == "buffer":
        if len(state.buffer) == 0:
            raise DataError("checkpoint buffer is empty; use fresh-chain mode")
        if count > len(state.buffer):
            raise DataError(
                f"requested {count} buffer samples but only "
                f"{len(state.buffer)} stored"
            )
        samples = state.buffer.snapshot()[:count]
    else:
        seed = args.seed if args.seed is not None else cfg.seed
        rng = RngBundle(seed).sgld
        steps = args.k if args.k is not None else cfg.sgld_steps
        chain_cfg = replace_steps(cfg, steps).sgld_config(state.data_range)
        x0 = sample_init(state.init_dist, count, rng,
                         clamp_range=state.data_range)
        samples = sgld_chain(state.model, x0, chain_cfg, rng)
    _write_samples_csv(samples, out / "samples.csv")
    _render_samples(samples, _DatasetView(state), out / "samples")
    return 0


class _DatasetView:
    """Raster metadata shim for rendering from a bare checkpoint."""

    def __init__(self, state):
        dim = state.model.in_dim
        self.raster_shape = None if dim == 2 else _square_raster(dim)


def _square_raster(dim):
    side = int(round(np.sqrt(dim)))
    if side * side == dim:
        return (side, side, 1)
    return (1, dim, 1)


def replace_steps(cfg: TrainConfig, steps: int) -> TrainConfig:
    return replace(cfg, sgld_steps=steps)


def cmd_eval(args) -> int:
    state, cfg = load_checkpoint(args.checkpoint)
    dataset = parse_dataset_spec(args.data, cfg.seed)
    out = Path(args.out)
    write_manifest(out, args, config=cfg)
    seed = args.seed if args.seed is not None else cfg.seed
    rng = RngBundle(seed).sgld
    steps = args.k if args.k is not None else cfg.sgld_steps
    chain_cfg = replace_steps(cfg, steps).sgld_config(dataset.range)
    count = min(args.count or 1000, len(dataset))
    # Synth datasets come out class-ordered, so a head slice would be
    # class-skewed; evaluate against a random subset instead.
    pick = rng.permutation(len(dataset))
    dataset = replace(dataset,
                      samples=dataset.samples[pick],
                      labels=None if dataset.labels is None
                      else dataset.labels[pick])
    x0 = sample_init(state.init_dist, count, rng, clamp_range=dataset.range)
    samples = sgld_chain(state.model, x0, chain_cfg, rng)
    lo, hi = dataset.range
    uniform = rng.uniform(lo, hi, size=(count, dataset.dim))
    report = build_eval_report(state.model, dataset, samples,
                               inits=x0, uniform=uniform)
    (out / "report.json").write_text(report.to_json() + "\n")
    labels = {}
    if dataset.labels is not None:
        labels["data"] = dataset.labels[:count]
    hist = energy_histogram(state.model,
                            {"data": dataset.samples[:count], "samples": samples},
                            labels=labels)
    hist.to_csv(out / "energy_hist.csv")
    _write_samples_csv(samples, out / "samples.csv")
    return 0


def cmd_inspect_init(args) -> int:
    dist = load_init(args.init_file)
    if isinstance(dist, GaussianInit):
        cov = dist.chol_factor @ dist.chol_factor.T
        print(f"kind: gaussian dim={dist.dim} eps_reg={dist.eps_reg}")
        print(f"mean: {np.array2string(dist.mean, precision=4)}")
        print(f"cov diag: {np.array2string(np.diag(cov), precision=4)}")
    elif isinstance(dist, MixtureInit):
        print(f"kind: mixture components={len(dist.components)} dim={dist.dim}")
        for (label, g), w in zip(dist.components, dist.weights):
            print(f"  label {label}: weight={w:.4f} "
                  f"mean={np.array2string(g.mean, precision=4)}")
    elif isinstance(dist, UniformInit):
        print(f"kind: uniform dim={dist.dim} lo={dist.lo} hi={dist.hi}")
    else:
        raise DataError(f"unrecognized distribution {type(dist).__name__}")
    return 0


def _bench_cell(cfg, dataset, init_kind):
    init_dist = _build_init(init_kind, dataset)
    try:
        state = train_loop(cfg, dataset, out_dir=None, init_dist=init_dist)
    except DivergenceError as err:
        return "diverged", float(err.value), int(err.iteration or 0)
    gaps = [s.gap for s in state.gap_window]
    final_gap = float(np.mean(gaps)) if gaps else 0.0
    return "healthy", final_gap, state.iteration


def cmd_bench_stability(args) -> int:
    base = _resolve_config(args)
    k_list = [int(v) for v in args.k_list.split(",")]
    init_modes = args.init_modes.split(",")
    seeds = [int(v) for v in args.seeds.split(",")]
    if not k_list or not init_modes or not seeds:
        raise ConfigError("bench needs at least one k, init mode, and seed")
    for kind in init_modes:
        if kind not in ("informative", "uniform", "mixture"):
            raise ConfigError(f"unknown init kind {kind!r}")
    out = Path(args.out)
    write_manifest(out, args, config=base,
                   extra={"k_list": k_list, "init_modes": init_modes,
                          "seeds": seeds})
    cells = [(k, kind, seed) for k in k_list for kind in init_modes
             for seed in seeds]
    workers = max(int(os.environ.get("EBM_THREADS", "1")), 1)

    def run(cell):
        k, kind, seed = cell
        cfg = replace(base, sgld_steps=k, seed=seed)
        dataset = parse_dataset_spec(args.data, cfg.seed)
        return cell, _bench_cell(cfg, dataset, kind)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = dict(pool.map(run, cells))
    else:
        results = dict(run(cell) for cell in cells)
    with open(out / "stability.csv", "w") as f:
        f.write("k,init,seed,status,final_gap,iters_completed\n")
        for cell in cells:
            status, gap, iters = results[cell]
            f.write(f"{cell[0]},{cell[1]},{cell[2]},{status},{gap!r},{iters}\n")
    return 0


# -- argument parsing ----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ebmkit",
        description="Train and probe small energy-based models.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=False, out=True, checkpoint=False):
        p.add_argument("--seed", type=int, default=None)
        if data:
            p.add_argument("--data", required=True,
                           help="kind:count[:noise] or a .ebmg path")
        if out:
            p.add_argument("--out", required=True)
        if checkpoint:
            p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("fit-init", help="fit a chain-start distribution")
    common(p, data=True)
    p.add_argument("--init", default="informative",
                   choices=("informative", "uniform", "mixture"))
    p.set_defaults(func=cmd_fit_init)

    p = sub.add_parser("train", help="run the training loop")
    common(p, data=True)
    p.add_argument("--config", default=None)
    p.add_argument("--init", default="informative",
                   choices=("informative", "uniform", "mixture"))
    p.add_argument("--mode", default=None, choices=[m.value for m in Mode])
    p.add_argument("--k", type=int, default=None, help="sgld steps override")
    p.add_argument("--inject-sigma", type=float, default=None,
                   dest="inject_sigma")
    p.add_argument("--reg-coeff", type=float, default=None, dest="reg_coeff")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="draw samples from a checkpoint")
    common(p, checkpoint=True)
    p.add_argument("--count", type=int, default=64)
    p.add_argument("--sample-mode", default="fresh-chain",
                   choices=("buffer", "fresh-chain"), dest="sample_mode")
    p.add_argument("--k", type=int, default=None)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="score a checkpoint against data")
    common(p, data=True, checkpoint=True)
    p.add_argument("--count", type=int, default=1000)
    p.add_argument("--k", type=int, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect-init", help="describe a stored distribution")
    p.add_argument("init_file")
    p.set_defaults(func=cmd_inspect_init)

    p = sub.add_parser("bench-stability",
                       help="sweep K x init x seed and tabulate divergence")
    common(p, data=True)
    p.add_argument("--config", default=None)
    p.add_argument("--k", dest="k_list", default="1,5",
                   help="comma-separated sgld step counts")
    p.add_argument("--init", dest="init_modes", default="informative,uniform")
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.add_argument("--mode", default=None, choices=[m.value for m in Mode])
    p.add_argument("--inject-sigma", type=float, default=None,
                   dest="inject_sigma")
    p.add_argument("--reg-coeff", type=float, default=None, dest="reg_coeff")
    p.set_defaults(func=cmd_bench_stability)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except DataError as err:
        print(f"data error: {err}", file=sys.stderr)
        return 3
    except DivergenceError as err:
        print(f"training diverged: {err}", file=sys.stderr)
        return 4
    except InvariantError as err:
        print(f"internal invariant violated: {err}", file=sys.stderr)
        return 5


if __name__ == "__main__":
    sys.exit(main())
