"""Command-line entry point: ``tddhad <subcommand> [flags]``.

Exit codes: 0 success, 1 usage/argument error, 2 data or format error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ArgumentError, DataError, FormatError, LoadError, NumericError, TDDError
from .evaluate import (
    grx,
    identity_violations,
    read_auc_csv,
    roc_series,
    auc_report,
    separability_stats,
    write_auc_csv,
    write_roc_csv,
    write_separability_csv,
    AUC_FIELDS,
)
from .hsi import container_paths, load_cube, load_mask, load_score_map, normalize_cube, save_score_map
from .net import NetworkConfig
from .pipeline import TrainConfig, infer, load_checkpoint, load_config_file, save_checkpoint, train
from .simulate import simulate_dataset, write_dataset

log = logging.getLogger("tddhad")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
FORMAT_VERSIONS = {"hsi": 1, "tensor_bundle": 1, "checkpoint": 1, "manifest": 1}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_help(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _stem(path) -> str:
    return container_paths(path)[0].name[: -len(".hsi.json")]


def write_pgm(path, scores: np.ndarray) -> None:
    """8-bit binary PGM scaled by the map's min-max."""
    s = np.asarray(scores, dtype=np.float64)
    lo, hi = s.min(), s.max()
    img = np.zeros(s.shape, dtype=np.uint8) if hi == lo else np.round(255 * (s - lo) / (hi - lo)).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{s.shape[1]} {s.shape[0]}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def _write_provenance(out_dir: Path, args, argv, outputs) -> None:
    record = {
        "command": args.command,
        "argv": list(argv),
        "seed": getattr(args, "seed", None),
        "version": __version__,
        "formats": FORMAT_VERSIONS,
        "outputs": sorted(str(Path(o).name) for o in outputs),
    }
    (out_dir / "provenance.json").write_text(json.dumps(record, indent=1) + "\n", encoding="utf-8")


def _load_training_config(args, bands):
    train_d, net_d = load_config_file(args.config) if args.config else ({}, {})
    for flag, key in (("seed", "seed"), ("patch_size", "patch_size"), ("n_samples", "n_samples"), ("steps", "steps")):
        value = getattr(args, flag, None)
        if value is not None:
            train_d[key] = value
    net_d.setdefault("in_bands", bands)
    return TrainConfig.from_dict(train_d), NetworkConfig.from_dict(net_d)


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(args, out: Path):
    cube = load_cube(args.cube)
    if not args.no_normalize:
        cube = normalize_cube(cube)
    cfg, _ = _load_training_config(args, cube.bands)
    sim = cfg.simulator
    samples = simulate_dataset(cube, cfg.patch_size, cfg.n_samples, sim.max_fraction, sim.affine, cfg.seed, sim.regions)
    manifest = write_dataset(samples, out, cfg.seed)
    print(f"wrote {len(samples)} samples to {manifest}")
    return [manifest]


def cmd_train(args, out: Path):
    cube = load_cube(args.cube)
    if not args.no_normalize:
        cube = normalize_cube(cube)
    cfg, net_cfg = _load_training_config(args, cube.bands)
    ckpt = train(cube, cfg, net_cfg, source_id=_stem(args.cube), progress=lambda s, l: log.info("step %d loss %.4f", s, l))
    sidecar = save_checkpoint(ckpt, out / "model")
    digest = hashlib.sha256((out / "model.tb.bin").read_bytes()).hexdigest()
    print(f"checkpoint {sidecar} sha256={digest} final_loss={ckpt.train_meta.get('final_loss')}")
    return [sidecar, out / "model.tb.json", out / "model.tb.bin"]


def cmd_infer(args, out: Path):
    if not args.ckpt:
        raise UsageError("infer requires --ckpt")
    cube = load_cube(args.cube)
    if not args.no_normalize:
        cube = normalize_cube(cube)
    ckpt = load_checkpoint(args.ckpt)
    patch = args.patch_size or ckpt.train_meta.get("train_config", {}).get("patch_size", 10)
    scores = infer(cube, ckpt, patch, args.stride)
    return _emit_map(scores, out)


def cmd_grx(args, out: Path):
    scores = grx(load_cube(args.cube), args.regularization)
    return _emit_map(scores, out)


def _emit_map(scores, out: Path):
    save_score_map(scores, out / "scores")
    write_pgm(out / "scores.pgm", scores.scores)
    print(f"score map {scores.height}x{scores.width} written to {out / 'scores.hsi.json'}")
    return [out / "scores.hsi.json", out / "scores.hsi.bin", out / "scores.pgm"]


def cmd_eval(args, out: Path):
    if not args.scores or not args.gt:
        raise UsageError("eval requires --scores and --gt")
    scores = load_score_map(args.scores)
    gt = load_mask(args.gt)
    series = roc_series(scores, gt)
    report = auc_report(series)
    method = args.method or _stem(args.scores)
    dataset = args.dataset or _stem(args.gt)
    write_auc_csv(out / "auc.csv", [(dataset, method, report)])
    write_roc_csv(out / "roc.csv", series)
    write_separability_csv(out / "separability.csv", separability_stats(scores, gt), method)
    print(", ".join(f"{f}={getattr(report, f):.4f}" for f in AUC_FIELDS))
    return [out / "auc.csv", out / "roc.csv", out / "separability.csv"]


def cmd_report(args, out: Path):
    if not args.inputs:
        raise UsageError("report needs at least one AUC CSV")
    rows = []
    for path in args.inputs:
        rows.extend(read_auc_csv(path))
    target = out / "report.csv"
    flagged = 0
    with open(target, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("dataset", "method") + AUC_FIELDS + ("identity_violations",))
        for row in rows:
            bad = identity_violations(row)
            flagged += bool(bad)
            w.writerow([row["dataset"], row["method"]] + [repr(row[f]) for f in AUC_FIELDS] + [";".join(bad)])
            if bad:
                print(f"warning: {row['dataset']}/{row['method']} violates {', '.join(bad)}", file=sys.stderr)
    print(f"{len(rows)} rows merged into {target}; {flagged} flagged")
    return [target]


COMMANDS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "infer": cmd_infer,
    "grx": cmd_grx,
    "eval": cmd_eval,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tddhad", description="Transferable one-step hyperspectral anomaly detection")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def common(p, cube=True):
        if cube:
            p.add_argument("--cube", required=True, help="input cube container")
        p.add_argument("--out", required=True, help="output directory")
        return p

    p = common(sub.add_parser("simulate", help="write simulated training samples"))
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--patch-size", type=int)
    p.add_argument("--n-samples", type=int)
    p.add_argument("--no-normalize", action="store_true")

    p = common(sub.add_parser("train", help="train a checkpoint on one cube"))
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--patch-size", type=int)
    p.add_argument("--n-samples", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--no-normalize", action="store_true")

    p = common(sub.add_parser("infer", help="score a cube with a checkpoint"))
    p.add_argument("--ckpt", required=True)
    p.add_argument("--patch-size", type=int)
    p.add_argument("--stride", type=int)
    p.add_argument("--no-normalize", action="store_true")

    p = common(sub.add_parser("grx", help="global RX baseline"))
    p.add_argument("--regularization", type=float)

    p = common(sub.add_parser("eval", help="3D-ROC metrics for a score map"), cube=False)
    p.add_argument("--scores", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--dataset")
    p.add_argument("--method")

    p = common(sub.add_parser("report", help="merge AUC CSVs into one table"), cube=False)
    p.add_argument("inputs", nargs="+", help="auc.csv files from eval")
    return parser


@contextlib.contextmanager
def _thread_limit():
    raw = os.environ.get("TDD_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"TDD_THREADS must be an integer, got {raw!r}") from None
    if n > 0:
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=n):
            yield
    else:
        yield


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.error("a subcommand is required")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with _thread_limit():
            outputs = COMMANDS[args.command](args, out)
        _write_provenance(out, args, argv, outputs)
        return EXIT_OK
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, DataError, LoadError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ArgumentError as exc:
        print(f"argument error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TDDError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main():
    sys.exit(run())
