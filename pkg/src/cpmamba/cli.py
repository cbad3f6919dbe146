"""Command-line entry point: gen, train, eval, plot, info.

Exit codes: 0 success, 2 usage or configuration error, 3 I/O error,
4 numerical failure during training.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import os
import sys
from pathlib import Path

from .checkpoint import CheckpointError
from .config import PRESETS, ConfigFileError, RunConfig, load_run_config
from .dataset import Dataset, DatasetError, generate_dataset, read_dataset, split, write_dataset
from .evaluation import (
    CpMambaMethod,
    EmptyInput,
    GridMethod,
    LsMethod,
    OracleMethod,
    read_metrics_csv,
    sweep,
    write_metrics_csv,
)
from .net import ConfigError, CpMambaNet
from .pipeline import (
    ChannelModel,
    IncompatibleModels,
    NumericalFailure,
    PositionModel,
    train_stage1,
    train_stage2,
    write_trace_csv,
)

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
DATA_DIR_ENV = "CPMAMBA_DATA_DIR"
PARTS = ("train", "val", "test", "all")
# reference totals for the full-size network, whose layer widths are not known
REFERENCE_PARAMS = 1.71e6
REFERENCE_FLOPS = 1.96e9

log = logging.getLogger("cpmamba")


class UsageError(Exception):
    pass


def data_dir() -> Path:
    return Path(os.environ.get(DATA_DIR_ENV, "data"))


def resolve_input(path: str) -> Path:
    """A path as given if it exists, else the same relative path under the data directory."""
    p = Path(path)
    if p.exists() or p.is_absolute():
        return p
    candidate = data_dir() / p
    return candidate if candidate.exists() else p


def _overrides(args) -> dict:
    out: dict = {}
    if getattr(args, "seed", None) is not None:
        section = "gen" if args.command == "gen" else "train" if args.command == "train" else "sweep"
        out[section] = {"seed": args.seed}
    if getattr(args, "snr", None):
        out.setdefault("sweep", {})["snr"] = _float_list(args.snr)
    if getattr(args, "methods", None):
        out.setdefault("sweep", {})["methods"] = [m.strip() for m in args.methods.split(",") if m.strip()]
    return out


def _float_list(text: str) -> list:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"--snr expects comma-separated numbers, got {text!r}") from exc


def _run_config(args) -> RunConfig:
    rc = load_run_config(args.config, args.preset, _overrides(args))
    for notice in rc.notices:
        print(f"notice: {notice}", file=sys.stderr)
    return rc


def _part(ds: Dataset, rc: RunConfig, part: str) -> Dataset:
    if part == "all":
        return ds
    train, val, test = split(ds, tuple(rc.data["split"]), rc.data["split_seed"])
    chosen = {"train": train, "val": val, "test": test}[part]
    if len(chosen) == 0:
        raise UsageError(f"the {part!r} part of the dataset is empty (split {rc.data['split']})")
    return chosen


def _write_manifest(path: Path, entries: dict) -> None:
    with open(path, "w") as fh:
        for key, value in entries.items():
            fh.write(f"{key}: {value}\n")


# --- commands -------------------------------------------------------------------


def cmd_gen(args) -> int:
    rc = _run_config(args)
    cfg = rc.gen
    out = Path(args.out) if args.out else data_dir() / f"{args.preset or 'dataset'}.xlmd"
    layout = cfg.layout()
    if cfg.scene.L_max == 0:
        log.info("pure LoS scenes: no scattering clusters")
        print("pure LoS: no scattering clusters")
    print(f"array {cfg.kind.label()}: {layout.n_elements} elements, aperture {layout.aperture:.6g} m "
          f"({layout.aperture / cfg.d:.6g} d)")  # fmt: skip
    print(f"config sha256 {cfg.digest()}")
    ds = generate_dataset(cfg)
    out.parent.mkdir(parents=True, exist_ok=True)
    file_hash = write_dataset(ds, out)
    print(f"wrote {len(ds)} samples to {out}")
    print(f"file sha256 {file_hash}")
    return EXIT_OK


def cmd_train(args) -> int:
    if args.stage == "ch" and not args.pos_ckpt:
        raise UsageError("stage 'ch' needs a positioning checkpoint: pass --pos-ckpt")
    rc = _run_config(args)
    ds = _part(read_dataset(resolve_input(args.dataset)), rc, args.part)
    out = Path(args.out) if args.out else data_dir() / f"{args.stage}.xlmw"
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.stage == "pos":
        result = train_stage1(ds, rc.net, rc.train)
    else:
        pos_model = PositionModel.load(resolve_input(args.pos_ckpt))
        result = train_stage2(ds, pos_model, rc.net, rc.train)
    result.model.save(out)
    trace_path = out.with_suffix(".loss.csv")
    write_trace_csv(result.trace, trace_path)
    _write_manifest(
        out.with_suffix(".manifest.txt"),
        {
            "command": "train",
            "stage": args.stage,
            "dataset": args.dataset,
            "part": args.part,
            "gen_sha256": ds.config.digest(),
            "gen_seed": ds.config.seed,
            "samples": len(ds),
            "net": json.dumps(result.model.net.cfg.to_dict(), sort_keys=True),
            "train": json.dumps(dataclasses.asdict(rc.train), sort_keys=True),
            "data": json.dumps(rc.data, sort_keys=True),
            "pos_ckpt": args.pos_ckpt or "",
            "steps_run": result.steps_run,
            "initial_loss": repr(result.initial_loss),
            "final_loss": repr(result.final_loss),
        },
    )
    if not math.isfinite(result.final_loss):
        print(f"non-finite final loss {result.final_loss}", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"stage {args.stage}: {result.steps_run} steps, loss {result.initial_loss:.6g} -> {result.final_loss:.6g}")
    print(f"wrote {out} and {trace_path}")
    return EXIT_OK


def _methods(names, args, ds: Dataset):
    out = []
    for name in names:
        if name == "oracle":
            out.append(OracleMethod())
        elif name == "ls":
            out.append(LsMethod())
        elif name == "grid":
            out.append(GridMethod())
        elif name == "cpmamba":
            if not args.pos_ckpt:
                raise UsageError("method 'cpmamba' needs --pos-ckpt (and optionally --ch-ckpt)")
            pos = PositionModel.load(resolve_input(args.pos_ckpt))
            ch = ChannelModel.load(resolve_input(args.ch_ckpt), ds.combiner.stacked) if args.ch_ckpt else None
            out.append(CpMambaMethod(pos, ch))
        else:
            raise UsageError(f"unknown method {name!r}; choose from oracle, ls, grid, cpmamba")
    if not out:
        raise UsageError("no methods selected")
    return out


def cmd_eval(args) -> int:
    rc = _run_config(args)
    ds = _part(read_dataset(resolve_input(args.dataset)), rc, args.part)
    methods = _methods(rc.sweep["methods"], args, ds)
    rows = sweep(ds, methods, rc.sweep["snr"], int(rc.sweep["seed"]))
    out = Path(args.out) if args.out else data_dir() / "metrics.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(rows, out)
    for row in rows:
        print(f"{row.method:8s} snr {row.snr_db:6.1f} dB  mpe {row.mpe_m:9.4f} m  nmse {row.nmse_db:8.3f} dB")
    print(f"wrote {len(rows)} rows to {out}")
    return EXIT_OK


def cmd_plot(args) -> int:
    from .plotting import plot_metrics

    rows = read_metrics_csv(resolve_input(args.metrics))
    out = Path(args.out) if args.out else Path(args.metrics).with_suffix(".svg")
    out.parent.mkdir(parents=True, exist_ok=True)
    plot_metrics(rows, out, title=args.title)
    print(f"wrote {out}")
    return EXIT_OK


def cmd_info(args) -> int:
    """Parameter and FLOP counts of a network configuration at full input size."""
    rc = _run_config(args)
    g = rc.gen
    K, M, N = g.carrier.K, g.P * g.N_RF, g.layout().n_elements
    pos = CpMambaNet(dataclasses.replace(rc.net, head="position", in_channels=2, height=K, width=M))
    ch = CpMambaNet(dataclasses.replace(rc.net, head="channel", in_channels=ChannelModel.IN_CHANNELS, height=K, width=N))
    for label, net in (("positioning", pos), ("channel", ch)):
        p, f = net.param_count(), net.flop_estimate()
        print(f"{label:12s} params {p:>10d} ({p / REFERENCE_PARAMS:.2f}x of 1.71M)  "
              f"flops {f:>13d} ({f / REFERENCE_FLOPS:.2f}x of 1.96G)")  # fmt: skip
    print("note: the reference layer widths are unknown, so these counts are comparable only in order of magnitude")
    return EXIT_OK


# --- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cpmamba",
        description="Near-field XL-MIMO positioning and channel estimation lab.",
        epilog=(
            f"Relative dataset and checkpoint paths that do not exist are looked up under ${DATA_DIR_ENV} "
            "(default ./data), which is also where outputs go when --out is omitted. "
            "Exit codes: 0 ok, 2 usage/config error, 3 I/O error, 4 numerical failure."
        ),
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed_help):
        p.add_argument("--config", help="YAML run configuration (sections gen, net, train, sweep, data)")
        p.add_argument("--preset", choices=sorted(PRESETS), help="built-in configuration applied before --config")
        p.add_argument("--seed", type=int, help=seed_help)
        p.add_argument("--out", help="output path")

    p = sub.add_parser("gen", help="generate a dataset file")
    common(p, "master seed of the dataset (overrides gen.seed)")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train the positioning (pos) or channel (ch) stage")
    common(p, "training seed: batch order (overrides train.seed)")
    p.add_argument("dataset", help="XLMD dataset file")
    p.add_argument("--stage", choices=("pos", "ch"), required=True)
    p.add_argument("--pos-ckpt", help="positioning checkpoint (required for --stage ch)")
    p.add_argument("--part", choices=PARTS, default="train", help="dataset part to train on")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="SNR sweep of estimators; writes a metrics CSV")
    common(p, "observation-noise seed (overrides sweep.seed)")
    p.add_argument("dataset", help="XLMD dataset file")
    p.add_argument("--snr", help="comma-separated SNR points in dB; write --snr=-10,0 when the list starts negative")
    p.add_argument("--methods", help="comma-separated subset of oracle,ls,grid,cpmamba")
    p.add_argument("--pos-ckpt", help="positioning checkpoint for method cpmamba")
    p.add_argument("--ch-ckpt", help="channel checkpoint for method cpmamba")
    p.add_argument("--part", choices=PARTS, default="test", help="dataset part to evaluate")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plot", help="render a metrics CSV as SVG curves")
    p.add_argument("metrics", help="metrics CSV written by eval")
    p.add_argument("--out", help="SVG path (default: next to the CSV)")
    p.add_argument("--title")
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("info", help="parameter and FLOP counts of the network configuration")
    p.add_argument("--config")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.set_defaults(func=cmd_info, seed=None)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigFileError, ConfigError, IncompatibleModels, EmptyInput) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, DatasetError, CheckpointError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        # shape or configuration mismatches surfacing from the core modules
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
