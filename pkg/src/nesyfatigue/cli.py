"""Command-line entry point: ``nesyfatigue {synth,features,loso,ablate,audit}``.

Settings resolve as command-line flags > ``--config`` file (TOML or JSON) >
built-in defaults. Outputs go to ``--out`` or, failing that, to
``$NESY_OUTPUT_ROOT/<command>`` (``./runs/<command>`` when unset).

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .dataio import SyntheticCohortSpec, generate_synthetic_cohort, load_directory, save_session
from .eval import (DEFAULT_SEEDS, SUITES, LosoConfig, fidelity_report, run_ablations, run_loso, summarize,
                   write_ablation_csv, write_fidelity_csv)
from .exceptions import ConfigError, InvalidSpec, NesyError, UnknownSubject
from .features import FeatureTable, extract_cohort
from .fuzzy import OperatorFamily
from .normalize import Strategy
from .train import TrainConfig, config_dict

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

OUTPUT_ROOT_ENV = "NESY_OUTPUT_ROOT"
TRACE_COLUMNS = ("participant_id", "seed", "window_index", "y", "yhat",
                 "C1", "C2", "C3", "C4", "Ct1", "Ct2", "Ct3", "Ct4", "f1", "f2", "f3")
AUDIT_COLUMNS = ("window", "yhat", "y", "C1", "C2", "C3", "C4", "Ct1", "Ct2", "Ct3", "Ct4", "f1", "f2", "f3")


@dataclasses.dataclass
class ExperimentConfig:
    """Resolved settings for one invocation; serializes to a flat JSON document."""

    data: str | None = None
    features: str | None = None
    synthetic: dict = dataclasses.field(default_factory=dict)
    strategy: str = "participant"
    operator_family: str = "product"
    head: str = "logic"
    learn_thresholds: bool = True
    include_calibration: bool = True
    seeds: list = dataclasses.field(default_factory=lambda: list(DEFAULT_SEEDS))
    suites: list = dataclasses.field(default_factory=lambda: list(SUITES))
    operators: list = dataclasses.field(default_factory=lambda: [f.value for f in OperatorFamily])
    train: dict = dataclasses.field(default_factory=lambda: config_dict(TrainConfig()))
    out: str | None = None

    def validate(self) -> None:
        try:
            Strategy.parse(self.strategy)
            for f in [self.operator_family, *self.operators]:
                OperatorFamily.parse(f)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if set(self.suites) - set(SUITES):
            raise ConfigError(f"unknown suites {sorted(set(self.suites) - set(SUITES))}; choose from {SUITES}")
        if self.head not in ("logic", "linear"):
            raise ConfigError(f"head must be 'logic' or 'linear', got {self.head!r}")

    def train_config(self) -> TrainConfig:
        t = dict(self.train)
        if "betas" in t:
            t["betas"] = tuple(t["betas"])
        try:
            return TrainConfig(**t)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad training settings: {exc}") from exc

    def loso_config(self) -> LosoConfig:
        return LosoConfig(strategy=self.strategy, operator_family=self.operator_family, head=self.head,
                          learn_thresholds=self.learn_thresholds, train=self.train_config(),
                          include_calibration=self.include_calibration)

    def synthetic_spec(self) -> SyntheticCohortSpec:
        kw = dict(self.synthetic)
        for key in ("concept_effect_sizes", "noise_grade"):
            if kw.get(key) is not None:
                kw[key] = tuple(float(v) for v in kw[key])
        try:
            spec = SyntheticCohortSpec(**kw)
        except TypeError as exc:
            raise InvalidSpec(f"bad synthetic settings: {exc}") from exc
        spec.validate()
        return spec

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, doc: dict) -> ExperimentConfig:
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls()
        return merge(cfg, doc)


def merge(cfg: ExperimentConfig, overrides: dict) -> ExperimentConfig:
    """Apply ``overrides`` on top of ``cfg``; dict-valued fields merge key by key."""
    out = dataclasses.replace(cfg)
    for key, value in overrides.items():
        if value is None:
            continue
        current = getattr(out, key)
        if isinstance(current, dict) and isinstance(value, dict):
            merged = dict(current)
            merged.update(value)
            value = merged
        setattr(out, key, value)
    return out


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        doc = tomllib.loads(text) if path.suffix.lower() == ".toml" else json.loads(text)
    except (tomllib.TOMLDecodeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path.name}: {exc}") from exc
    return ExperimentConfig.from_dict(doc)


# ---------------------------------------------------------------------------
# argument parsing


def _floats(text):
    return [float(v) for v in str(text).split(",") if v.strip()]


def _ints(text):
    return [int(v) for v in str(text).split(",") if v.strip()]


def _strs(text):
    return [v.strip() for v in str(text).split(",") if v.strip()]


def _add_source(p):
    p.add_argument("--data", help="directory of recorded sessions (manifest_<pid>.json + CSVs)")
    p.add_argument("--features", help="feature CSV written by the 'features' command")


def _add_experiment(p):
    _add_source(p)
    p.add_argument("--strategy", help="normalization: participant (default), global, no_calibration")
    p.add_argument("--operator-family", dest="operator_family", help="product (default), lukasiewicz, goedel")
    p.add_argument("--no-logic", dest="head", action="store_const", const="linear",
                   help="replace the rule layer with a linear head over the concepts")
    p.add_argument("--fixed-thresholds", dest="learn_thresholds", action="store_const", const=False,
                   help="freeze all concept thresholds at 0.5")
    p.add_argument("--exclude-calibration", dest="include_calibration", action="store_const", const=False,
                   help="score held-out subjects without their calibration windows")
    p.add_argument("--seeds", type=_ints, help="comma-separated training seeds (default 42,123,456)")
    p.add_argument("--seed", type=int, help="synthetic generator seed when no --data/--features is given")
    p.add_argument("--subjects", type=int, help="synthetic cohort size when no --data/--features is given")
    p.add_argument("--effect", type=_floats, help="synthetic concept effect size(s)")
    p.add_argument("--lr", type=float)
    p.add_argument("--max-epochs", dest="max_epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)


def build_parser() -> argparse.ArgumentParser:
    # accepted before or after the subcommand; SUPPRESS keeps a later default from masking an earlier value
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", help="TOML or JSON experiment config")
    common.add_argument("--jobs", type=int, help="parallel worker processes (default 1)")
    common.add_argument("--out", help="output path (default: $NESY_OUTPUT_ROOT/<command>)")
    common.add_argument("--dump-config", dest="dump_config", help="write the resolved config as JSON and continue")
    parser = argparse.ArgumentParser(prog="nesyfatigue", description=__doc__.splitlines()[0], parents=[common])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, **kw):
        return sub.add_parser(name, parents=[common], **kw)

    p = add("synth", help="generate a synthetic cohort in the session file format")
    p.add_argument("--subjects", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--windows-per-phase", dest="windows_per_phase", type=int)
    p.add_argument("--effect", type=_floats, help="one effect size or four comma-separated")
    p.add_argument("--subject-noise", dest="subject_noise_sd", type=float)
    p.add_argument("--polarity-flips", dest="polarity_flips", type=float)
    p.add_argument("--noise-grade", dest="noise_grade", type=_floats, help="per-subject latent noise SDs")

    p = add("features", help="extract the 90-feature table from a session directory")
    p.add_argument("data", nargs="?", help="session directory")

    p = add("loso", help="leave-one-subject-out evaluation with fidelity audit")
    _add_experiment(p)

    p = add("ablate", help="normalization, concept, operator and threshold ablations")
    _add_experiment(p)
    p.add_argument("--suites", type=_strs, help=f"subset of {','.join(SUITES)}")
    p.add_argument("--operators", type=_strs, help="operator families for the operator suite")

    p = add("audit", help="export one subject's traces from a completed loso run")
    p.add_argument("run_dir")
    p.add_argument("--subject", required=True)
    p.add_argument("--trace-seed", dest="trace_seed", type=int, help="which training seed (default: first)")
    return parser


def resolve_config(args) -> ExperimentConfig:
    a = vars(args)
    cfg = load_config(a["config"]) if a.get("config") else ExperimentConfig()
    flags = {k: a.get(k) for k in ("data", "features", "strategy", "operator_family", "head",
                                   "learn_thresholds", "include_calibration", "seeds", "suites",
                                   "operators", "out")}
    flags["train"] = {k: a[k] for k in ("lr", "max_epochs", "batch_size", "patience", "weight_decay")
                      if a.get(k) is not None}
    synth = {"n_subjects": a.get("subjects"), "seed": a.get("seed"),
             "windows_per_phase": a.get("windows_per_phase"), "subject_noise_sd": a.get("subject_noise_sd"),
             "polarity_flips": a.get("polarity_flips"), "noise_grade": a.get("noise_grade")}
    if a.get("effect") is not None:
        eff = a["effect"]
        synth["concept_effect_sizes"] = eff * 4 if len(eff) == 1 else eff
    flags["synthetic"] = {k: v for k, v in synth.items() if v is not None}
    cfg = merge(cfg, flags)
    cfg.validate()
    return cfg


def output_path(cfg: ExperimentConfig, command: str) -> Path:
    if cfg.out:
        return Path(cfg.out)
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / command


# ---------------------------------------------------------------------------
# commands


def load_table(cfg: ExperimentConfig, jobs=1) -> FeatureTable:
    if cfg.features:
        return FeatureTable.from_csv(cfg.features)
    if cfg.data:
        return extract_cohort(load_directory(cfg.data), jobs=jobs)
    return extract_cohort(generate_synthetic_cohort(cfg.synthetic_spec()), jobs=jobs)


def cmd_synth(cfg: ExperimentConfig, out: Path, jobs=1) -> list[Path]:
    written = []
    for session in generate_synthetic_cohort(cfg.synthetic_spec()):
        written += save_session(session, out)
    return written


def cmd_features(cfg: ExperimentConfig, out: Path, jobs=1) -> Path:
    if not cfg.data:
        raise ConfigError("features needs a session directory")
    table = extract_cohort(load_directory(cfg.data), jobs=jobs)
    out.parent.mkdir(parents=True, exist_ok=True)
    table.to_csv(out)
    return out


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return str(int(v))
    return str(v)


def write_traces(folds, path) -> None:
    """One row per (subject, seed, window) with the stored activations, floats in repr form."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for fold in folds:
            if not fold.traces:
                continue
            for seed, tr in zip(fold.seeds, fold.traces):
                if tr.f is None:
                    continue
                for i, widx in enumerate(fold.window_index):
                    w.writerow([_fmt(v) for v in (fold.held_out_subject, seed, widx, fold.y[i], tr.yhat[i],
                                                  *tr.C[i], *tr.Ct[i], *tr.f[i])])


def _write_json(path, payload, metadata) -> None:
    doc = dict(payload)
    doc["metadata"] = metadata
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _metadata(command, out: Path):
    # run-specific fields live here so two identical runs produce identical payloads
    return {"command": command, "version": __version__, "out": str(out),
            "created": datetime.now(timezone.utc).isoformat(timespec="seconds")}


def _payload_config(cfg: ExperimentConfig) -> dict:
    doc = cfg.to_dict()
    doc.pop("out")
    return doc


def cmd_loso(cfg: ExperimentConfig, out: Path, jobs=1) -> Path:
    table = load_table(cfg, jobs)
    folds = run_loso(table, cfg.loso_config(), cfg.seeds, jobs=jobs)
    out.mkdir(parents=True, exist_ok=True)
    payload = {"config": _payload_config(cfg), "summary": summarize(folds),
               "folds": [f.to_dict(with_windows=True) for f in folds]}
    if cfg.head == "logic":
        fid = fidelity_report(folds)
        payload["fidelity"] = fid.to_dict()
        write_fidelity_csv(fid, out / "fidelity.csv")
        write_traces(folds, out / "traces.csv")
    with open(out / "folds.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["participant_id", "accuracy", *[f"seed_{s}" for s in cfg.seeds]])
        for f in folds:
            w.writerow([f.held_out_subject, repr(f.accuracy), *[repr(a) for a in f.seed_accuracies]])
    _write_json(out / "report.json", payload, _metadata("loso", out))
    return out


def cmd_ablate(cfg: ExperimentConfig, out: Path, jobs=1) -> Path:
    table = load_table(cfg, jobs)
    tables = run_ablations(table, cfg.loso_config(), cfg.seeds, cfg.suites, cfg.operators, jobs=jobs)
    out.mkdir(parents=True, exist_ok=True)
    for suite, rows in tables.items():
        write_ablation_csv(rows, out / f"ablation_{suite}.csv")
    payload = {"config": _payload_config(cfg),
               "suites": {k: [r.to_dict() for r in v] for k, v in tables.items()}}
    _write_json(out / "ablations.json", payload, _metadata("ablate", out))
    return out


def cmd_audit(run_dir, subject, out: Path, trace_seed=None) -> Path:
    """Time-ordered trace export for one subject (columns: AUDIT_COLUMNS)."""
    path = Path(run_dir) / "traces.csv"
    if not path.exists():
        raise UnknownSubject(f"{path} not found; run 'loso' with the logic head first")
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.DictReader(fh) if r["participant_id"] == subject]
    if not rows:
        raise UnknownSubject(f"subject {subject!r} not in {path}")
    seed = str(trace_seed) if trace_seed is not None else rows[0]["seed"]
    rows = sorted((r for r in rows if r["seed"] == seed), key=lambda r: int(r["window_index"]))
    if not rows:
        raise UnknownSubject(f"no traces for seed {seed} of subject {subject!r}")
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(AUDIT_COLUMNS)
        for r in rows:
            w.writerow([r["window_index"], *[r[c] for c in AUDIT_COLUMNS[1:]]])
    return out


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    cfg = resolve_config(args)
    jobs = getattr(args, "jobs", 1)
    if getattr(args, "dump_config", None):
        Path(args.dump_config).write_text(cfg.dumps(), encoding="utf-8")
    command = args.command
    if command == "audit":
        out = Path(cfg.out) if cfg.out else Path(args.run_dir) / f"audit_{args.subject}.csv"
        result = cmd_audit(args.run_dir, args.subject, out, args.trace_seed)
    else:
        out = output_path(cfg, command)
        if command == "features" and not cfg.out:
            out = out / "features.csv"
        handler = {"synth": cmd_synth, "features": cmd_features, "loso": cmd_loso, "ablate": cmd_ablate}[command]
        result = handler(cfg, out, jobs)
    if isinstance(result, list):
        print(f"wrote {len(result)} files to {out}")
    else:
        print(f"wrote {result}")
    return 0


def main(argv=None) -> int:
    try:
        return run(argv)
    except NesyError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
