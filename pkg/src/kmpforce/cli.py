"""Command-line pipeline: generate, align, train, reproduce, evaluate and report.

Every stage works inside a run directory laid out as ``demos/``,
``models/``, ``logs/`` and ``reports/``. ``generate`` stores the effective
configuration as ``config.json`` in the run directory; later stages start from
it, then apply ``--config`` and explicit flags on top.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from kmpforce.alignment import align_database
from kmpforce.control import (PHANTOM_PRESETS, ControllerParams, ScanLog, ScanPlan, demonstration_frames,
                              get_phantom, run_reproduction)
from kmpforce.demo_data import (SCENARIOS, DemonstrationDatabase, FeatureSelector, extract_features,
                                load_demonstration, load_demonstrations, save_demonstrations,
                                split_train_validation, subsample, synthesize_demonstrations)
from kmpforce.errors import DataError, DivergenceError, KMPForceError, NumericalError
from kmpforce.gmm import build_reference_database, fit_gmm, uniform_grid
from kmpforce.kmp import KernelParams, KMPModel, ViaPoint, kl_diagnostic, train_kmp
from kmpforce.metrics import FramedDemonstration, evaluate_scan

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC, EXIT_DIVERGED = 0, 2, 3, 4, 5
OUTPUT_ROOT_ENV = "KMPFORCE_OUTPUT_ROOT"


class UsageError(KMPForceError):
    exit_code = EXIT_USAGE


@dataclasses.dataclass
class RunConfig:
    scenario: str = "compression"
    count: int = 10
    noise_std: float = 0.5
    time_warp: float = 0.1
    scan_length: float = 200.0  # mm
    seed: int = 42
    gamma: float = 1.0
    subsample: int = 1
    n_components: int = 8
    gmm_seed: int = 0
    gmm_tol: float = 1e-6
    gmm_restarts: int = 4
    grid_points: int = 500
    sigma_f: float = 50.0
    lam: float = 0.1
    lam_c: float = 10.0
    r_threshold: float = 5e-4
    mass: float = 2.5
    damping: float = 500.0
    stiffness: float = 270.0
    dt: float = 0.002
    phantom: str = "phantom-c"
    via: list = dataclasses.field(default_factory=list)
    feedforward_tau: float = 0.0
    sim_seed: int = 0
    image_seed: int = 0

    def validate(self):
        if self.scenario not in SCENARIOS:
            raise UsageError(f"unknown scenario {self.scenario!r}; choose from {', '.join(SCENARIOS)}")
        if self.count < 1:
            raise UsageError("--count must be at least 1")
        if not self.scan_length > 0:
            raise UsageError("--scan-length must be positive")
        if self.phantom not in PHANTOM_PRESETS:
            raise UsageError(f"unknown phantom {self.phantom!r}; choose from {', '.join(sorted(PHANTOM_PRESETS))}")
        for name in ("subsample", "n_components", "gmm_restarts", "grid_points"):
            if getattr(self, name) < 1:
                raise UsageError(f"{name} must be at least 1")
        if self.grid_points < 2:
            raise UsageError("grid_points must be at least 2")
        try:
            self.kernel_params()
            self.controller_params()
            self.via_points()
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        return self

    def kernel_params(self) -> KernelParams:
        return KernelParams(self.sigma_f, self.lam, self.lam_c)

    def controller_params(self) -> ControllerParams:
        return ControllerParams(self.mass * np.eye(3), self.damping * np.eye(3),
                                np.diag([self.stiffness, self.stiffness, 0.0]), self.dt)

    def via_points(self) -> list:
        return [ViaPoint.parse(v) for v in self.via]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(doc) - names)
        if unknown:
            raise UsageError(f"unknown configuration fields: {', '.join(unknown)}")
        return cls(**doc)


def _write_json(path: Path, doc):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2) + "\n")


def _read_json(path: Path, what: str):
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise DataError(f"{what} not found: {path}") from None
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read {what} {path}: {exc}") from exc


# ---------------------------------------------------------------- stages

def cmd_generate(config: RunConfig, run_dir: Path) -> Path:
    db = synthesize_demonstrations(config.scenario, config.count, config.noise_std, config.seed,
                                   time_warp=config.time_warp, scan_length=config.scan_length)
    demos_dir = run_dir / "demos"
    if demos_dir.exists():
        for old in [*demos_dir.glob("*.csv"), *demos_dir.glob("aligned/manifest.json")]:
            old.unlink()
    files = save_demonstrations(db, demos_dir)
    train, validation = split_train_validation(db.ids, config.seed)
    _write_json(demos_dir / "manifest.json", {
        "scenario": config.scenario, "files": [f.name for f in files],
        "train": list(train), "validation": list(validation)})
    _write_json(run_dir / "config.json", config.to_dict())
    return demos_dir


def _manifest(run_dir: Path) -> dict:
    return _read_json(run_dir / "demos" / "manifest.json", "demo manifest")


def _load_split(run_dir: Path, key: str) -> DemonstrationDatabase:
    manifest = _manifest(run_dir)
    ids = manifest.get(key, [])
    return DemonstrationDatabase([load_demonstration(run_dir / "demos" / f"{i}.csv") for i in ids])


def cmd_align(config: RunConfig, run_dir: Path) -> Path:
    train = _load_split(run_dir, "train")
    if len(train) == 0:
        raise DataError("the manifest lists no training demonstrations")
    result = align_database(subsample(train, config.subsample), config.gamma)
    out = run_dir / "demos" / "aligned"
    if out.exists():
        for old in out.glob("*.csv"):
            old.unlink()
    save_demonstrations(result.warped, out)
    _write_json(out / "manifest.json", {
        "reference": result.warped.aligned_to or train.ids[result.reference_index],
        "ids": result.warped.ids, "gamma": config.gamma, "subsample": config.subsample,
        "soft_dtw_costs": result.costs.tolist()})
    return out


def _load_aligned(run_dir: Path) -> DemonstrationDatabase:
    aligned = run_dir / "demos" / "aligned"
    manifest = _read_json(aligned / "manifest.json", "alignment manifest")
    db = load_demonstrations(aligned)
    return DemonstrationDatabase(list(db), aligned_to=manifest["reference"])


def cmd_train(config: RunConfig, run_dir: Path) -> Path:
    if not (run_dir / "demos").is_dir():
        raise DataError(f"no demos directory in {run_dir}; run generate first")
    if not (run_dir / "demos" / "aligned" / "manifest.json").exists():
        cmd_align(config, run_dir)
    aligned = _load_aligned(run_dir)
    joint = extract_features(aligned, FeatureSelector()).joint()
    gmm = fit_gmm(joint, config.n_components, seed=config.gmm_seed, tol=config.gmm_tol,
                  n_init=config.gmm_restarts)
    reference = build_reference_database(gmm, uniform_grid(config.grid_points))
    kmp = train_kmp(reference, config.kernel_params(), {"training_ids": aligned.ids,
                                                        "scenario": config.scenario})
    models = run_dir / "models"
    models.mkdir(parents=True, exist_ok=True)
    gmm.save(models / "gmm.json")
    kmp.save(models / "kmp.json")
    history = list(gmm.log_likelihood)
    _write_json(models / "diagnostic.json", {
        "log_likelihood": history,
        "log_likelihood_monotone": bool(np.all(np.diff(history) >= -1e-9)) if len(history) > 1 else True,
        "em_converged": gmm.converged,
        "kl_diagnostic": kl_diagnostic(kmp),
        "gram_condition_number": kmp.condition_number(),
        "reference_points": len(reference)})
    return models


def _scan_plan(run_dir: Path) -> ScanPlan:
    files = _manifest(run_dir).get("files", [])
    if not files:
        raise DataError("the demo manifest lists no files")
    length_mm = load_demonstration(run_dir / "demos" / files[0]).scan_length
    return ScanPlan(end=(length_mm / 1000.0, 0.0, 0.0))


def cmd_reproduce(config: RunConfig, run_dir: Path) -> Path:
    model = KMPModel.load(run_dir / "models" / "kmp.json")
    out = run_dir / "logs" / "scan"
    try:
        log = run_reproduction(model, _scan_plan(run_dir), get_phantom(config.phantom),
                               config.controller_params(), config.via_points(), config.sim_seed,
                               config.r_threshold, config.feedforward_tau)
    except DivergenceError as exc:
        if exc.log is not None:
            exc.log.save(out)
        raise
    log.save(out)
    return out


def validation_recordings(config: RunConfig, run_dir: Path) -> list:
    phantom = get_phantom(config.phantom)
    records = []
    for demo in _load_split(run_dir, "validation"):
        frames, times = demonstration_frames(demo, phantom, config.image_seed)
        records.append(FramedDemonstration(demo, frames, times))
    return records


def cmd_evaluate(config: RunConfig, run_dir: Path) -> Path:
    log = ScanLog.load(run_dir / "logs" / "scan")
    if log.metadata.get("aborted"):
        raise DataError("the scan log is from an aborted reproduction")
    validation = validation_recordings(config, run_dir)
    if not validation:
        raise DataError("the validation set is empty")
    report = evaluate_scan(log, validation)
    out = run_dir / "reports"
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json())
    (out / "per_demo.csv").write_text(report.per_demo_csv())
    (out / "summary.csv").write_text(report.summary_csv())
    return out


def cmd_report(run_dirs, out_path: Path) -> Path:
    rows = []
    for rd in run_dirs:
        summary = Path(rd) / "reports" / "summary.csv"
        if not summary.is_file():
            raise DataError(f"no summary report in {rd}")
        with summary.open(newline="") as fh:
            for row in csv.DictReader(fh):
                rows.append([Path(rd).name, row["metric"], row["mean"], row["std"]])
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with out_path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run", "metric", "mean", "std"])
        w.writerows(rows)
    return out_path


# ---------------------------------------------------------------- argument handling

_FLAGS = {
    "scenario": str, "count": int, "noise_std": float, "time_warp": float, "scan_length": float, "seed": int,
    "gamma": float, "subsample": int, "n_components": int, "gmm_seed": int, "gmm_tol": float,
    "gmm_restarts": int, "grid_points": int, "sigma_f": float, "lam": float, "lam_c": float,
    "r_threshold": float, "mass": float, "damping": float, "stiffness": float, "dt": float,
    "phantom": str, "feedforward_tau": float, "sim_seed": int, "image_seed": int,
}


def _add_config_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, help="JSON run configuration")
    p.add_argument("--run-dir", type=Path, help="run directory")
    for name, kind in _FLAGS.items():
        flag = "--" + name.replace("_", "-")
        p.add_argument(flag, dest=name, type=kind, default=None)
    p.add_argument("--via", action="append", default=None, metavar="S:F:VAR",
                   help="via-point progress:force_newtons:variance (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kmpforce", description="Force-profile learning and reproduction pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in (("generate", "synthesize demonstrations"), ("align", "align training demonstrations"),
                       ("train", "fit GMM and KMP models"), ("reproduce", "simulate the learned scan"),
                       ("evaluate", "score the scan against validation demos"),
                       ("run", "generate, align, train, reproduce and evaluate")):
        _add_config_flags(sub.add_parser(name, help=text))
    rep = sub.add_parser("report", help="concatenate summary CSVs of several runs")
    rep.add_argument("run_dirs", nargs="+", type=Path)
    rep.add_argument("--out", type=Path, required=True)
    return parser


def resolve_config(args) -> RunConfig:
    doc = {}
    if args.run_dir is not None and (args.run_dir / "config.json").is_file() and args.command != "generate":
        doc.update(_read_json(args.run_dir / "config.json", "run configuration"))
    if args.config is not None:
        loaded = _read_json(args.config, "configuration file")
        if not isinstance(loaded, dict):
            raise UsageError("the configuration file must hold a JSON object")
        doc.update(loaded)
    for name in _FLAGS:
        value = getattr(args, name)
        if value is not None:
            doc[name] = value
    if args.via is not None:
        doc["via"] = list(args.via)
    try:
        config = RunConfig.from_dict(doc)
    except TypeError as exc:
        raise UsageError(f"bad configuration: {exc}") from None
    return config.validate()


def _run_dir(args) -> Path:
    if args.run_dir is not None:
        return args.run_dir
    if args.command not in ("generate", "run"):
        raise UsageError("--run-dir is required for this command")
    root = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))
    return root / time.strftime("run-%Y%m%d-%H%M%S")


_STAGES = {"generate": cmd_generate, "align": cmd_align, "train": cmd_train,
           "reproduce": cmd_reproduce, "evaluate": cmd_evaluate}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "report":
            print(cmd_report(args.run_dirs, args.out))
            return EXIT_OK
        config = resolve_config(args)
        run_dir = _run_dir(args)
        stages = list(_STAGES) if args.command == "run" else [args.command]
        for stage in stages:
            print(f"{stage}: {_STAGES[stage](config, run_dir)}")
        return EXIT_OK
    except UsageError as exc:
        print(f"kmpforce: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"kmpforce: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"kmpforce: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DivergenceError as exc:
        print(f"kmpforce: controller diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
