"""Command-line entry point: ``valvefdd <command> [--config FILE] [--set key=value ...]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import container, evaluation, pipeline, sim
from .config import ConfigError, PipelineConfig

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_ARTIFACT, EXIT_ACCEPTANCE, EXIT_MISSING = 0, 1, 2, 3, 4, 5

log = logging.getLogger("valvefdd")


def _stage(fn):
    def run(cfg, root, args):
        path = fn(cfg, root)
        print(path)
        return EXIT_OK
    return run


def cmd_evaluate(cfg: PipelineConfig, root: Path, args) -> int:
    pl = pipeline.Pipeline.load(cfg, root)
    sd = pipeline.load_split(cfg, root)
    test = sd.trajectories("test")
    src = sd.trajectories(cfg.raw["ood"]["source_split"])
    next_id = max((t.id for ts in sd.splits.values() for t in ts), default=-1) + 1
    oods = pipeline.ood_trajectories(cfg, src, next_id)
    report = evaluation.evaluate_pipeline(pl, test, oods)
    out = Path(args.out) if args.out else root / "reports"
    report.write(out)
    print(out / "report.json")
    bad = evaluation.check_thresholds(report, cfg)
    for b in bad:
        print(f"acceptance violation: {b}", file=sys.stderr)
    return EXIT_ACCEPTANCE if bad else EXIT_OK


def _read_stream_input(src: str):
    """Decode one input container: a whole trajectory or a batch of windows."""
    buf = sys.stdin.buffer.read() if src == "-" else Path(src).read_bytes()
    meta, arrays = container.decode(buf)
    kind = meta["_kind"]
    if kind == "trajectory":
        return "trajectory", sim.Trajectory(arrays["data"], meta["label"], meta["traj_type"], meta["id"],
                                            meta["sample_rate"], tuple(meta["channels"]))
    if kind == "windows":
        return "windows", (meta, arrays)
    raise container.VersionMismatchError(f"cannot stream a {kind!r} container")


def cmd_stream(cfg: PipelineConfig, root: Path, args) -> int:
    pl = pipeline.Pipeline.load(cfg, root)
    out = sys.stdout
    for src in args.input:
        kind, payload = _read_stream_input(src)
        if kind == "trajectory":
            res = pl.run(payload)
            events = res.events
        else:
            meta, arrays = payload
            vals = arrays["values"]
            if not meta.get("scaled", True):
                vals = pl.scaler.transform(vals)
            vals = vals.astype(np.float32)
            ids = arrays.get("traj_ids", np.zeros(len(vals), np.int64))
            starts = arrays.get("starts", np.arange(len(vals)) * cfg.step)
            events = []
            for tid in dict.fromkeys(ids.tolist()):
                sel = ids == tid
                events += pl.run_windows(vals[sel], starts[sel], tid).events
        for ev in events:
            out.write(json.dumps(ev, sort_keys=True) + "\n")
    out.flush()
    return EXIT_OK


def cmd_bench_arch(cfg: PipelineConfig, root: Path, args) -> int:
    sd = pipeline.load_split(cfg, root)
    b = cfg.raw["bench"]
    tc = cfg.train_config
    if b["max_epochs"]:
        tc.max_epochs = int(b["max_epochs"])
    rows = evaluation.ARCH_GRID if b["rows"] == "all" else [evaluation.ARCH_GRID[i] for i in b["rows"]]
    splits = {k: sd.trajectories(k) for k in ("train", "val", "test")}
    res = evaluation.bench_arch(splits, sd.scaler, cfg.T, cfg.step, tc, rows, cfg.detector_gbt,
                                cfg.diagnoser_gbt, cfg.tcae_config, int(b["timing_windows"]), log.info)
    out = Path(args.out) if args.out else root / "reports"
    out.mkdir(parents=True, exist_ok=True)
    (out / "bench_arch.csv").write_text(evaluation.arch_table(res))
    print(out / "bench_arch.csv")
    return EXIT_OK


def cmd_bench_imbalance(cfg: PipelineConfig, root: Path, args) -> int:
    feats = pipeline.load_features(cfg, root)
    var = cfg.raw["detector"]["features"]
    pick = lambda f: (f.X(var), (f.labels != 0).astype(int))  # noqa: E731
    rows = evaluation.benchmark_imbalance(pick(feats["train"]), pick(feats["calibration"]), pick(feats["test"]),
                                          cfg.detector_gbt, T_fp=cfg.raw["cusum"]["T_fp"],
                                          n_bins=cfg.raw["eval"]["reliability_bins"], seed=cfg.seed)
    out = Path(args.out) if args.out else root / "reports"
    out.mkdir(parents=True, exist_ok=True)
    (out / "bench_imbalance.csv").write_text(evaluation.imbalance_table(rows))
    for r in rows:
        for cm, c in r.calibration.items():
            (out / f"reliability_imbalance_{r.method}_{cm}.csv").write_text(c["reliability_csv"])
    print(out / "bench_imbalance.csv")
    return EXIT_OK


COMMANDS = {
    "simulate": _stage(pipeline.run_simulate),
    "split": _stage(pipeline.run_split),
    "train-tcae": _stage(pipeline.run_train_tcae),
    "extract": _stage(pipeline.run_extract),
    "train-detector": _stage(pipeline.run_train_detector),
    "train-diagnoser": _stage(pipeline.run_train_diagnoser),
    "calibrate": _stage(pipeline.run_calibrate),
    "calibrate-ood": _stage(pipeline.run_calibrate_ood),
    "evaluate": cmd_evaluate,
    "stream": cmd_stream,
    "bench-arch": cmd_bench_arch,
    "bench-imbalance": cmd_bench_imbalance,
}

PIPELINE_ORDER = ("simulate", "split", "train-tcae", "extract", "train-detector", "train-diagnoser",
                  "calibrate", "calibrate-ood", "evaluate")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="valvefdd", description="Valve actuator fault detection and diagnosis")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML/JSON config file (defaults apply when omitted)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key, e.g. --set tcae_train.max_epochs=5")
    common.add_argument("--root", help="data root (else $FDD_DATA_ROOT, else config 'root')")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[common])
        if name in ("evaluate", "bench-arch", "bench-imbalance"):
            sp.add_argument("--out", help="output directory (default <root>/reports)")
        if name == "stream":
            sp.add_argument("input", nargs="+", help="trajectory or windows container file, or '-' for stdin")
    sp = sub.add_parser("run-all", parents=[common], help="every stage from simulate to evaluate")
    sp.add_argument("--out")
    sub.add_parser("show-config", parents=[common], help="print the effective configuration")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = PipelineConfig.load(args.config, args.set)
        if args.command == "show-config":
            print(json.dumps(cfg.to_dict(), indent=1, sort_keys=True))
            return EXIT_OK
        root = cfg.root(args.root)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.command == "run-all":
            code = EXIT_OK
            for name in PIPELINE_ORDER:
                code = COMMANDS[name](cfg, root, args)
            return code
        return COMMANDS[args.command](cfg, root, args)
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except container.ContainerError as exc:
        print(f"artifact error: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT
    except pipeline.MissingArtifactError as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING


if __name__ == "__main__":
    sys.exit(main())
