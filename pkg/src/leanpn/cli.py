"""Command-line entry point: ``leanpn <command> [flags]``.

Commands: gen-data, train, eval, gradcheck, bench-mem, bench-speed.
Settings come from flags, then a ``--config`` YAML file, then defaults.
Exit codes: 0 success, 1 verification failure, 2 usage error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from dataclasses import dataclass

import numpy as np
import yaml

from . import bench, gradcheck, harness
from .networks import PRESETS, SCALES, ArchSpec, Network, SpecError, build_preset, spec_from_text, spec_to_text

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3
COMMANDS = ("gen-data", "train", "eval", "gradcheck", "bench-mem", "bench-speed")
CHECKPOINT_TAG = "leanpn-checkpoint v1"


class UsageError(Exception):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class RunConfig:
    """Every setting a command may read. ``None`` means "command default":
    preset lpn (bench-speed: every preset), n_points 512 (benches: 1024),
    k 8 at desk scale and 32 at paper scale (benches: 32)."""

    command: str = "train"
    preset: str | None = None
    scale: str = "desk"
    mode: str = "lean"
    seed: int = 0
    epochs: int = 30
    batch: int = 8
    lr: float = 1e-3
    n_points: int | None = None
    n_samples: int = 500
    out: str = "runs"
    passes: int = 1
    k: int | None = None
    width: int = 64
    runs: int = 5
    catalog: list = dataclasses.field(default_factory=lambda: ["lollipop"])

    def to_text(self) -> str:
        return yaml.safe_dump(dataclasses.asdict(self), sort_keys=True, default_flow_style=None)

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        data = yaml.safe_load(text) or {}
        if not isinstance(data, dict):
            raise UsageError("config file must hold a mapping of settings")
        known = {f.name for f in dataclasses.fields(cls)}
        bad = sorted(set(data) - known)
        if bad:
            raise UsageError(f"unknown config keys: {', '.join(bad)}")
        return cls(**data)

    def validate(self) -> "RunConfig":
        if self.command not in COMMANDS:
            raise UsageError(f"unknown command {self.command!r}; choose from {', '.join(COMMANDS)}")
        if self.preset is not None and self.preset not in PRESETS:
            raise UsageError(f"unknown preset {self.preset!r}; choose from {', '.join(PRESETS)}")
        if self.scale not in SCALES:
            raise UsageError(f"unknown scale {self.scale!r}; choose from {', '.join(SCALES)}")
        if self.mode not in ("lean", "reference"):
            raise UsageError(f"mode must be lean or reference, got {self.mode!r}")
        for name in ("epochs", "batch", "n_samples", "passes", "runs", "width"):
            if getattr(self, name) < (0 if name == "epochs" else 1):
                raise UsageError(f"--{name.replace('_', '-')} out of range: {getattr(self, name)}")
        if self.lr < 0:
            raise UsageError("--lr must be non-negative")
        for shape in self.catalog:
            if shape not in harness.CATALOG:
                raise UsageError(f"unknown shape {shape!r}; choose from {', '.join(harness.CATALOG)}")
        return self


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML file with settings (flags override it)")
    common.add_argument("--preset", help=f"one of {', '.join(PRESETS)}")
    common.add_argument("--scale", help="paper or desk (default desk)")
    common.add_argument("--mode", help="lean or reference (default lean)")
    common.add_argument("--seed", type=int)
    common.add_argument("--epochs", type=int)
    common.add_argument("--batch", type=int)
    common.add_argument("--lr", type=float)
    common.add_argument("--n-points", dest="n_points", type=int)
    common.add_argument("--n-samples", dest="n_samples", type=int)
    common.add_argument("--out", help="output directory (default runs)")
    common.add_argument("--passes", type=int, help="forward passes to average in eval")
    common.add_argument("--k", type=int, help="neighbours per ball query")
    common.add_argument("--width", type=int, help="feature width D of the bench-mem stacks (default 64)")
    common.add_argument("--runs", type=int, help="timed repetitions in bench-speed (default 5)")
    common.add_argument("--catalog", nargs="+", help=f"shapes to generate, from {', '.join(harness.CATALOG)}")
    parser = argparse.ArgumentParser(prog="leanpn", description="Lean point-network training, verification and benchmarks.")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "gen-data": "write a synthetic dataset and its index file",
        "train": "train a preset and save history and checkpoint",
        "eval": "evaluate a checkpoint with multi-pass voting",
        "gradcheck": "finite-difference check of every layer",
        "bench-mem": "retained-memory sweep against the closed-form model",
        "bench-speed": "median forward/backward wall-clock per preset and mode",
    }
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name])
    return parser


def resolve_config(argv) -> RunConfig:
    args = build_parser().parse_args(argv)
    cfg = RunConfig()
    if args.config:
        try:
            with open(args.config) as f:
                cfg = RunConfig.from_text(f.read())
        except OSError as e:
            raise OSError(f"cannot read config {args.config}: {e.strerror}") from e
        except yaml.YAMLError as e:
            raise UsageError(f"config {args.config} is not valid YAML: {e}") from e
        except TypeError as e:
            raise UsageError(f"config {args.config}: {e}") from e
    overrides = {k: v for k, v in vars(args).items() if v is not None and k != "config"}
    return dataclasses.replace(cfg, **overrides).validate()


# ---------------------------------------------------------- checkpoints


def save_checkpoint(path, net: Network) -> None:
    with open(path, "w") as f:
        f.write(CHECKPOINT_TAG + "\n")
        for name, p in net.params.items():
            rows, cols = p.weight.shape
            f.write(f"param {name} {rows} {cols}\n")
            for row in p.weight:
                f.write(" ".join(repr(float(v)) for v in row) + "\n")
            f.write(" ".join(repr(float(v)) for v in p.bias) + "\n")


def load_checkpoint(path, net: Network) -> None:
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines or lines[0] != CHECKPOINT_TAG:
        raise CheckpointError(f"{path}: not a checkpoint (expected first line {CHECKPOINT_TAG!r})")
    values = {}
    i = 1
    while i < len(lines):
        head = lines[i].split()
        if len(head) != 4 or head[0] != "param":
            raise CheckpointError(f"{path}:{i + 1}: expected 'param NAME ROWS COLS'")
        name, rows, cols = head[1], int(head[2]), int(head[3])
        try:
            w = np.array([[float(v) for v in lines[i + 1 + r].split()] for r in range(rows)])
            b = np.array([float(v) for v in lines[i + 1 + rows].split()])
        except (IndexError, ValueError) as e:
            raise CheckpointError(f"{path}: parameter {name} is truncated or malformed") from e
        if w.shape != (rows, cols) or b.shape != (cols,):
            raise CheckpointError(f"{path}: parameter {name} does not match its declared shape")
        values[name] = (w, b)
        i += rows + 2
    for name, p in net.params.items():
        if name not in values:
            raise CheckpointError(f"parameter {name} missing from checkpoint")
        w, b = values[name]
        if w.shape != p.weight.shape:
            raise CheckpointError(f"parameter {name}: checkpoint shape {w.shape}, network {p.weight.shape}")
    extra = sorted(set(values) - set(net.params))
    if extra:
        raise CheckpointError(f"parameter {extra[0]} in checkpoint is not part of the network")
    for name, p in net.params.items():
        p.weight[...], p.bias[...] = values[name]


# ------------------------------------------------------------ commands


def _spec(cfg: RunConfig, n_points_default=512) -> ArchSpec:
    return build_preset(cfg.preset or "lpn", cfg.scale, n_points=cfg.n_points or n_points_default, k=cfg.k)


def _dataset(cfg: RunConfig, n_points) -> harness.Dataset:
    index = os.path.join(cfg.out, "data", "index.txt")
    if os.path.exists(index):
        ds = harness.read_dataset(index)
        if ds.samples and ds.samples[0].n != n_points:
            raise UsageError(f"dataset in {index} has {ds.samples[0].n} points, network expects {n_points}")
        return ds
    return harness.gen_synthetic(cfg.seed, cfg.n_samples, n_points, tuple(cfg.catalog))


def _write(path, text):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w") as f:
        f.write(text)


def cmd_gen_data(cfg: RunConfig) -> int:
    ds = harness.gen_synthetic(cfg.seed, cfg.n_samples, cfg.n_points or 512, tuple(cfg.catalog))
    index = harness.write_dataset(ds, os.path.join(cfg.out, "data"))
    print(f"wrote {len(ds.samples)} samples and {index}")
    return EXIT_OK


def cmd_train(cfg: RunConfig) -> int:
    spec = _spec(cfg)
    ds = _dataset(cfg, spec.n_points)
    train_set = ds.split("train")

    def log(r):
        print(f"epoch {r.epoch}: loss {r.loss:.4f} acc {r.acc:.4f} miou {r.miou:.4f}", flush=True)

    net, history = harness.train(spec, train_set, cfg.epochs, cfg.batch, cfg.lr, cfg.seed, cfg.mode, log=log)
    _write(os.path.join(cfg.out, "history.csv"), harness.history_csv(history))
    _write(os.path.join(cfg.out, "arch.yaml"), spec_to_text(spec))
    _write(os.path.join(cfg.out, "config.yaml"), cfg.to_text())
    save_checkpoint(os.path.join(cfg.out, "checkpoint.txt"), net)
    print(f"saved {os.path.join(cfg.out, 'checkpoint.txt')}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig) -> int:
    arch = os.path.join(cfg.out, "arch.yaml")
    if os.path.exists(arch):
        with open(arch) as f:
            spec = spec_from_text(f.read())
    else:
        spec = _spec(cfg)
    net = Network(spec, seed=cfg.seed, mode=cfg.mode)
    load_checkpoint(os.path.join(cfg.out, "checkpoint.txt"), net)
    ds = _dataset(cfg, spec.n_points)
    lines = ["split,passes,acc,miou,piou"]
    for split in harness.SPLITS:
        samples = ds.split(split)
        if not samples:
            continue
        m = harness.evaluate(net, samples, cfg.passes, cfg.seed)
        lines.append(f"{split},{cfg.passes},{m['acc']:.6f},{m['miou']:.6f},{m['piou']:.6f}")
        print(f"{split}: acc {m['acc']:.4f} miou {m['miou']:.4f} piou {m['piou']:.4f}")
    _write(os.path.join(cfg.out, "metrics.csv"), "\n".join(lines) + "\n")
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig) -> int:
    rows = gradcheck.run_suite(cfg.seed)
    _write(os.path.join(cfg.out, "gradcheck.csv"), gradcheck.rows_csv(rows))
    bad = [r for r in rows if not r.ok]
    for r in bad:
        print(f"FAIL {r.layer} {r.param}: max rel err {r.max_rel_err:.3e} ({r.n_checked} coords)")
    print(f"{len(rows) - len(bad)}/{len(rows)} gradient checks within {gradcheck.TOL:g}")
    return EXIT_VERIFY if bad else EXIT_OK


def cmd_bench_mem(cfg: RunConfig) -> int:
    n, k = cfg.n_points or 1024, cfg.k or 32
    rows = bench.mem_sweep(n, cfg.width, k, seed=cfg.seed)
    _write(os.path.join(cfg.out, "bench_mem.csv"), bench.mem_csv(rows))
    ratios = bench.depth_ratios(cfg.scale, n_points=512, k=cfg.k, seed=cfg.seed)
    _write(os.path.join(cfg.out, "bench_mem_depth.csv"), bench.depth_csv(ratios))
    print(bench.mem_csv(rows), end="")
    print(bench.depth_csv(ratios), end="")
    flagged = [r for r in rows if abs(r.deviation) > 0.10]
    return EXIT_VERIFY if flagged else EXIT_OK


def cmd_bench_speed(cfg: RunConfig) -> int:
    presets = [cfg.preset] if cfg.preset else list(PRESETS)
    rows = [row for p in presets
            for row in bench.time_modes(p, ("lean", "reference"), cfg.n_points or 1024, cfg.k or 32,
                                        cfg.runs, cfg.seed, cfg.scale)]
    _write(os.path.join(cfg.out, "bench_speed.csv"), bench.speed_csv(rows))
    print(bench.speed_csv(rows), end="")
    return EXIT_OK


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "bench-mem": cmd_bench_mem,
    "bench-speed": cmd_bench_speed,
}


def main(argv=None) -> int:
    try:
        cfg = resolve_config(argv)
        return HANDLERS[cfg.command](cfg)
    except SystemExit as e:  # argparse usage errors
        return int(e.code) if isinstance(e.code, int) else EXIT_USAGE
    except (UsageError, SpecError) as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, harness.DatasetFormatError, CheckpointError) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
