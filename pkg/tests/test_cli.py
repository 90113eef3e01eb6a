import csv
import json

import numpy as np
import pytest

from nesyfatigue.cli import AUDIT_COLUMNS, ExperimentConfig, build_parser, load_config, main, resolve_config
from nesyfatigue.exceptions import ConfigError
from nesyfatigue.features import FEATURE_NAMES

FAST = ["--max-epochs", "2", "--patience", "1", "--seeds", "1"]


def small_config(tmp_path, **extra):
    doc = {"synthetic": {"n_subjects": 3, "windows_per_phase": 6, "seed": 5}, **extra}
    path = tmp_path / "small.json"
    path.write_text(json.dumps(doc))
    return path


@pytest.fixture(scope="module")
def loso_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("loso")
    cfg = small_config(root)
    assert main(["loso", "--config", str(cfg), "--out", str(root / "run"), *FAST]) == 0
    return root / "run"


def test_synth_writes_three_files_per_subject_deterministically(tmp_path):
    args = ["synth", "--subjects", "3", "--seed", "9", "--windows-per-phase", "4"]
    assert main([*args, "--out", str(tmp_path / "a")]) == 0
    assert main([*args, "--out", str(tmp_path / "b")]) == 0
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert len(names) == 9
    for n in names:
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()


def test_single_subject_is_config_error(tmp_path, capsys):
    assert main(["synth", "--subjects", "1", "--out", str(tmp_path)]) == 2
    assert "error" in capsys.readouterr().err


def test_features_table(tmp_path):
    main(["synth", "--subjects", "2", "--seed", "1", "--windows-per-phase", "4", "--out", str(tmp_path / "s")])
    assert main(["features", str(tmp_path / "s"), "--out", str(tmp_path / "f.csv")]) == 0
    with open(tmp_path / "f.csv") as fh:
        rows = list(csv.reader(fh))
    assert len(rows) == 1 + 2 * 2 * 4
    assert rows[0] == [*FEATURE_NAMES, "participant_id", "label"]


def test_missing_manifest_is_data_error(tmp_path):
    (tmp_path / "empty").mkdir()
    assert main(["features", str(tmp_path / "empty"), "--out", str(tmp_path / "f.csv")]) == 3


def test_output_root_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("NESY_OUTPUT_ROOT", str(tmp_path / "root"))
    assert main(["synth", "--subjects", "2", "--windows-per-phase", "4"]) == 0
    assert len(list((tmp_path / "root" / "synth").iterdir())) == 6


def test_config_round_trip_is_fixed_point(tmp_path):
    toml = tmp_path / "c.toml"
    toml.write_text('strategy = "global"\noperator_family = "goedel"\nseeds = [1, 2]\n'
                    '[train]\nlr = 0.001\n[synthetic]\nn_subjects = 4\n')
    cfg = load_config(toml)
    assert cfg.strategy == "global" and cfg.train["lr"] == 0.001 and cfg.train["max_epochs"] == 150
    dumped = tmp_path / "c.json"
    dumped.write_text(cfg.dumps())
    again = load_config(dumped)
    assert again == cfg and again.dumps() == cfg.dumps()


def test_dump_config_flag(tmp_path):
    out = tmp_path / "resolved.json"
    main(["synth", "--subjects", "2", "--windows-per-phase", "4", "--out", str(tmp_path / "s"),
          "--dump-config", str(out)])
    assert load_config(out).synthetic["n_subjects"] == 2


def test_unknown_config_key(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{"learning_rate": 1}')
    with pytest.raises(ConfigError):
        load_config(bad)
    assert main(["loso", "--config", str(bad)]) == 2


def test_flag_beats_file_beats_default(tmp_path):
    cfg_path = small_config(tmp_path, strategy="global", train={"lr": 0.01, "patience": 5})
    args = build_parser().parse_args(["loso", "--config", str(cfg_path), "--lr", "0.002", "--no-logic"])
    cfg = resolve_config(args)
    assert cfg.strategy == "global"
    assert cfg.train["lr"] == 0.002 and cfg.train["patience"] == 5 and cfg.train["batch_size"] == 32
    assert cfg.head == "linear"
    assert ExperimentConfig().head == "logic"


def test_global_options_after_subcommand(tmp_path):
    args = build_parser().parse_args(["--jobs", "2", "loso", "--out", "x"])
    assert args.jobs == 2 and args.out == "x"


def test_loso_outputs(loso_run):
    names = {p.name for p in loso_run.iterdir()}
    assert {"report.json", "fidelity.csv", "traces.csv", "folds.csv"} <= names
    report = json.loads((loso_run / "report.json").read_text())
    assert report["summary"]["n_folds"] == 3
    assert "created" in report["metadata"]


def test_audit_export(loso_run, tmp_path):
    out = tmp_path / "audit.csv"
    assert main(["audit", str(loso_run), "--subject", "S02", "--out", str(out)]) == 0
    with open(out) as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == AUDIT_COLUMNS
    windows = [int(r[0]) for r in rows[1:]]
    assert windows == sorted(windows) and len(windows) == 12
    with open(loso_run / "traces.csv") as fh:
        source = {r["window_index"]: r for r in csv.DictReader(fh) if r["participant_id"] == "S02"}
    for r in rows[1:]:
        assert r[1] == source[r[0]]["yhat"] and r[-1] == source[r[0]]["f3"]


def test_audit_traces_match_model_range(loso_run):
    with open(loso_run / "traces.csv") as fh:
        rows = list(csv.DictReader(fh))
    values = np.array([[float(r[c]) for c in ("C1", "C2", "C3", "C4", "Ct1", "yhat")] for r in rows])
    assert values.min() >= 0 and values.max() <= 1


def test_audit_unknown_subject(loso_run, tmp_path):
    assert main(["audit", str(loso_run), "--subject", "S99", "--out", str(tmp_path / "a.csv")]) == 3


def test_no_logic_skips_rule_outputs(tmp_path):
    cfg = small_config(tmp_path)
    assert main(["loso", "--config", str(cfg), "--out", str(tmp_path / "r"), "--no-logic", *FAST]) == 0
    names = {p.name for p in (tmp_path / "r").iterdir()}
    assert "report.json" in names and "traces.csv" not in names


def test_ablate_operator_subset(tmp_path):
    cfg = small_config(tmp_path)
    assert main(["ablate", "--config", str(cfg), "--out", str(tmp_path / "ab"), "--suites", "operators",
                 "--operators", "product,lukasiewicz", *FAST]) == 0
    with open(tmp_path / "ab" / "ablation_operators.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["variant"] for r in rows] == ["product", "lukasiewicz"]
    assert rows[0]["is_base"] == "True" and float(rows[0]["delta_pp"]) == 0.0
