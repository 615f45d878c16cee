import json

import numpy as np
import pytest

from dualcp import cli, store
from dualcp.prototypes import load_bank


SMALL = [
    "--classes", "6", "--domains", "2", "--dim", "16",
    "--per-class", "20", "--test-per-class", "5",
    "--group-plan", "2,3,1", "--seed", "11",
]


def run_pipeline(root, epochs="20", extra_proto=(), seed="11"):
    data = root / "data"
    bankdir = root / "bank"
    run = root / "run"
    assert cli.main(["synth", "--out", str(data)] + SMALL) == 0
    assert cli.main(
        ["prototypes", "--guidance", str(data / "guidance.dcp"),
         "--out", str(bankdir), *extra_proto]
    ) == 0
    assert cli.main(
        ["train", "--embeddings", str(data / "train.dcp"),
         "--test", str(data / "test.dcp"),
         "--bank", str(bankdir / "bank.dcpb"),
         "--out", str(run), "--epochs", epochs, "--batch", "32",
         "--seed", seed]
    ) == 0
    assert cli.main(
        ["eval", "--run", str(run), "--test", str(data / "test.dcp"),
         "--bank", str(bankdir / "bank.dcpb"), "--csv"]
    ) == 0
    return data, bankdir, run


def test_full_pipeline(tmp_path):
    data, bankdir, run = run_pipeline(tmp_path)
    report = json.loads((run / "report.json").read_text())
    assert report["num_domains"] == 2
    assert report["num_classes"] == 6
    assert report["average_accuracy"] >= 0.9
    assert report["forgetting"] is not None
    assert len(report["domain_id_accuracy"]) == 2
    lines = (run / "predictions.csv").read_text().strip().splitlines()
    assert lines[0] == "true_label,predicted_label,identified_domain"
    assert len(lines) == 1 + 6 * 2 * 5
    # every command drops a manifest
    assert (data / "manifest_synth.json").exists()
    assert (bankdir / "manifest_prototypes.json").exists()
    assert (run / "manifest_train.json").exists()
    assert json.loads((run / "timing.json").read_text())["eval_wall_time_seconds"] >= 0


def test_verify_exits_zero(capsys):
    assert cli.main(["verify", "--seed", "0"]) == 0
    out = capsys.readouterr().out
    assert out.count("[PASS]") == 4
    assert "[FAIL]" not in out


def test_verify_exits_one_on_failure(monkeypatch, capsys):
    from dualcp.verify import CheckResult

    monkeypatch.setattr(
        cli.verify, "run_all", lambda seed: [CheckResult("stub", False, "boom")]
    )
    assert cli.main(["verify"]) == 1
    assert "[FAIL] stub" in capsys.readouterr().out


def test_train_epochs_zero_exits_two(tmp_path):
    with pytest.raises(SystemExit) as exc:
        cli.main(
            ["train", "--embeddings", "x", "--test", "y", "--bank", "z",
             "--out", str(tmp_path), "--epochs", "0"]
        )
    assert exc.value.code == 2


def test_missing_subcommand_exits_two():
    with pytest.raises(SystemExit) as exc:
        cli.main([])
    assert exc.value.code == 2


def test_bad_input_path_exits_one(tmp_path, capsys):
    code = cli.main(
        ["prototypes", "--guidance", str(tmp_path / "nope.dcp"), "--out", str(tmp_path)]
    )
    assert code == 1


def test_threshold_one_equals_vanilla_flag(tmp_path):
    data = tmp_path / "data"
    assert cli.main(["synth", "--out", str(data)] + SMALL) == 0
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(
        ["prototypes", "--guidance", str(data / "guidance.dcp"), "--out", str(a),
         "--p", "1.0"]
    ) == 0
    assert cli.main(
        ["prototypes", "--guidance", str(data / "guidance.dcp"), "--out", str(b),
         "--vanilla"]
    ) == 0
    assert (a / "bank.dcpb").read_bytes() == (b / "bank.dcpb").read_bytes()
    bank = load_bank(a / "bank.dcpb")
    assert bank.num_groups == 6


def test_deterministic_reports(tmp_path):
    _, _, run_a = run_pipeline(tmp_path / "one", epochs="3")
    _, _, run_b = run_pipeline(tmp_path / "two", epochs="3")
    assert (run_a / "report.json").read_bytes() == (run_b / "report.json").read_bytes()
    assert (run_a / "history.json").read_bytes() == (run_b / "history.json").read_bytes()
    assert (run_a / "memory.dcm").read_bytes() == (run_b / "memory.dcm").read_bytes()


def test_synth_guidance_loadable(tmp_path):
    data = tmp_path / "data"
    assert cli.main(["synth", "--out", str(data)] + SMALL) == 0
    gm = store.load_guidance(data / "guidance.dcp")
    assert gm.num_classes == 6
    train = store.load(data / "train.dcp")
    assert train.num_domains == 2
    assert np.isfinite(train.features).all()
