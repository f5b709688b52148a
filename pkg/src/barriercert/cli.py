"""Command-line front end: ``barriercert {baseline,generate,certify,sweep,plot-data}``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .barrier import save_barrier
from .certifier import (CERTIFIED, NOT_CERTIFIABLE, Certificate, CertificationRun,
                        config_hash, monotone_alpha_sweep, read_curve, run_certification,
                        write_curve)
from .config import ConfigError, RunConfig
from .trajectories import STREAM_TRAIN, Pipeline, clean_baseline, generate, read_log, write_log

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NOT_CERTIFIABLE = 3
EXIT_MISSING_INPUT = 4
OUT_ENV = "BARRIERCERT_OUT"

CERT_FILE = "certificate.json"
CURVE_FILE = "curve.csv"
TRAJ_FILE = "trajectories.csv"
SIDECAR_FILE = "trajectories.bin"
BASELINE_FILE = "baseline.json"
BARRIER_FILE = "barrier.ckpt"

log = logging.getLogger("barriercert")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _output_dir(args, cfg: Optional[RunConfig]) -> Path:
    if args.out:
        return Path(args.out)
    if cfg is not None and cfg["out_dir"]:
        return Path(cfg["out_dir"])
    root = Path(os.environ.get(OUT_ENV, "barriercert-out"))
    stem = Path(cfg.source).stem if cfg is not None and cfg.source else "run"
    return root / stem


def _prepare(out: Path, force: bool) -> Path:
    if out.exists() and any(out.iterdir()) and not force:
        raise CliError(f"output directory {out} is not empty; pass --force to overwrite",
                       EXIT_CONFIG)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load(args) -> RunConfig:
    if not args.config:
        raise CliError("--config is required", EXIT_CONFIG)
    try:
        return RunConfig.load(args.config)
    except FileNotFoundError as err:
        raise CliError(str(err), EXIT_MISSING_INPUT) from None


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def _baseline_payload(baseline, chash: str) -> dict:
    return {"g_c": baseline.g_c, "accuracies": baseline.accuracies, "seeds": baseline.seeds,
            "source": baseline.source, "config_hash": chash, "tool_version": __version__}


def _write_run(out: Path, run: CertificationRun, certs: Sequence[Certificate]) -> None:
    write_log(run.corpus, out / TRAJ_FILE, out / SIDECAR_FILE)
    write_curve(certs, out / CURVE_FILE)
    if run.last_barrier is not None:
        save_barrier(run.last_barrier, out / BARRIER_FILE)


def cmd_baseline(args) -> int:
    cfg = _load(args)
    request = cfg.request(args.mode)
    out = _prepare(_output_dir(args, cfg), args.force)
    baseline = clean_baseline(Pipeline(request.experiment), jobs=args.jobs)
    _write_json(out / BASELINE_FILE, _baseline_payload(baseline, config_hash(request)))
    print(f"g_c = {baseline.g_c} ({baseline.source}); wrote {out / BASELINE_FILE}")
    return EXIT_OK


def cmd_generate(args) -> int:
    cfg = _load(args)
    request = cfg.request(args.mode)
    out = _prepare(_output_dir(args, cfg), args.force)
    pipeline = Pipeline(request.experiment)
    baseline = clean_baseline(pipeline, jobs=args.jobs)
    samples = generate(pipeline, request.n_train, baseline.g_c, STREAM_TRAIN, jobs=args.jobs)
    _write_json(out / BASELINE_FILE, _baseline_payload(baseline, config_hash(request)))
    write_log(samples, out / TRAJ_FILE, out / SIDECAR_FILE)
    print(f"wrote {len(samples)} trajectories to {out / TRAJ_FILE}")
    return EXIT_OK


def _summary(cert: Certificate) -> str:
    eps = "n/a" if cert.epsilon is None else f"{cert.epsilon:.3f}"
    eta = "n/a" if cert.eta_s is None else f"{cert.eta_s:.4g}"
    return (f"{cert.mode} alpha={cert.alpha_effective:g} status={cert.status} "
            f"delta_emp={cert.delta_emp:g} delta_cert={cert.delta_cert:g} eta_s={eta} "
            f"epsilon={eps}")


def cmd_certify(args) -> int:
    cfg = _load(args)
    request = cfg.request(args.mode, True if args.strict_scenarios else None)
    out = _prepare(_output_dir(args, cfg), args.force)
    cert, run = run_certification(request, args.jobs)
    (out / CERT_FILE).write_text(cert.to_json())
    _write_run(out, run, [cert])
    print(_summary(cert))
    return EXIT_NOT_CERTIFIABLE if cert.status == NOT_CERTIFIABLE else EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _load(args)
    request = cfg.request(args.mode, True if args.strict_scenarios else None)
    alphas = cfg["sweep_alphas"]
    if not alphas:
        raise CliError("key 'sweep_alphas': required for the sweep command", EXIT_CONFIG)
    alphas = sorted(alphas, reverse=True)
    out = _prepare(_output_dir(args, cfg), args.force)
    certs, run = monotone_alpha_sweep(request, alphas, args.jobs, return_run=True)
    for i, cert in enumerate(certs):
        (out / f"certificate_{i:03d}.json").write_text(cert.to_json())
        print(_summary(cert))
    _write_run(out, run, certs)
    if all(c.status == NOT_CERTIFIABLE for c in certs):
        return EXIT_NOT_CERTIFIABLE
    return EXIT_OK


def cmd_plot_data(args) -> int:
    folder = Path(args.dir or args.out or "")
    if not args.dir and not args.out:
        raise CliError("give the run directory", EXIT_CONFIG)
    curve_path, traj_path = folder / CURVE_FILE, folder / TRAJ_FILE
    for path in (curve_path, traj_path):
        if not path.is_file():
            raise CliError(f"missing {path}; run certify or sweep first", EXIT_MISSING_INPUT)
    curve = read_curve(curve_path)
    rows = read_log(traj_path)
    certified = [r["delta_cert"] for r in curve
                 if r["status"] == CERTIFIED or "reused" in r["flags"]]
    radius = max(certified) if certified else None
    by_delta: dict[float, list[float]] = {}
    for r in rows:
        by_delta.setdefault(r["delta"], []).append(r["g_p"])
    with open(folder / "accuracy_vs_delta.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["delta", "empirical_accuracy", "certified_flag"])
        for delta in sorted(by_delta):
            acc = sum(by_delta[delta]) / len(by_delta[delta])
            flag = int(radius is not None and delta <= radius + 1e-12)
            w.writerow([repr(delta), repr(acc), flag])
    with open(folder / "staircase.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["alpha", "g_p_star", "delta_cert"])
        for r in curve:
            w.writerow([repr(r["alpha"]), repr(r["g_p_star"]), repr(r["delta_cert"])])
    print(f"wrote {folder / 'accuracy_vs_delta.csv'} and {folder / 'staircase.csv'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="barriercert",
                                     description="Barrier-certificate robustness certification")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, with_config=True):
        if with_config:
            p.add_argument("--config", help="run configuration file")
            p.add_argument("--mode", choices=["train", "test"], help="override the config mode")
            p.add_argument("--jobs", type=int, default=1, help="worker processes")
            p.add_argument("--force", action="store_true", help="overwrite a non-empty --out")
        p.add_argument("--out", help=f"output directory (default: ${OUT_ENV}/<config name>)")
        p.add_argument("-v", "--verbose", action="store_true")

    for name, fn in (("baseline", cmd_baseline), ("generate", cmd_generate)):
        p = sub.add_parser(name)
        common(p)
        p.set_defaults(func=fn)
    for name, fn in (("certify", cmd_certify), ("sweep", cmd_sweep)):
        p = sub.add_parser(name)
        common(p)
        p.add_argument("--strict-scenarios", action="store_true",
                       help="draw fresh scenarios at every candidate radius")
        p.set_defaults(func=fn)
    p = sub.add_parser("plot-data", help="emit plot-ready CSVs from a certify/sweep directory")
    p.add_argument("dir", nargs="?")
    common(p, with_config=False)
    p.set_defaults(func=cmd_plot_data)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "jobs", 1) < 1:
        print("error: --jobs must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except CliError as err:
        print(f"error: {err}", file=sys.stderr)
        return err.code


if __name__ == "__main__":
    sys.exit(main())
