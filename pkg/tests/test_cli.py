import csv
import json

import pytest

from mpituning.cli import main
from mpituning.experiment import sha256_file

TINY = """\
[detector]
image_size = 32
patch_size = 8
d = 16
heads = 2
num_queries = 6
ffn_hidden = 16

[data]
pretrain_count = 8
pretrain_val_count = 2
finetune_train_count = 6
finetune_val_count = 2
test_count = 4

[scenes.pretrain]
min_side = 6
max_side = 12
min_separation = 10

[scenes.finetune]
min_separation = 8

[pretrain]
epochs = 1
batch_size = 4

[finetune]
epochs = 1
batch_size = 3

[peft]
M = 3
mhp_dim = 4
table_length = 256
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    ini = root / "tiny.ini"
    ini.write_text(TINY)
    conf = ["--config", str(ini)]
    assert main(["datagen", "--out", str(root / "packs")] + conf) == 0
    assert main(["pretrain", "--packs", str(root / "packs"), "--out", str(root / "base.mpit")] + conf) == 0
    assert main(["finetune", "--method", "mpi", "--checkpoint", str(root / "base.mpit"),
                 "--packs", str(root / "packs"), "--out", str(root / "runs" / "mpi")] + conf) == 0
    assert main(["eval", "--zero-shot", "--checkpoint", str(root / "base.mpit"),
                 "--pack", str(root / "packs" / "test.spk"), "--out", str(root / "runs" / "zero-shot")]
                + conf) == 0
    return root, conf


def test_count_params_at_full_depth(capsys, tmp_path):
    out = tmp_path / "params.csv"
    assert main(["count-params", "--method", "mpi", "--M", "12", "--full-depth", "--out", str(out)]) == 0
    assert "insertion points N = 26" in capsys.readouterr().out
    row = next(csv.DictReader(out.open()))
    assert row["insertion_points"] == "26" and row["M"] == "12"
    assert int(row["total"]) == int(row["mhp"]) > 0
    assert (tmp_path / "params.manifest.json").exists()


def test_count_params_zero_shot(capsys):
    assert main(["count-params", "--method", "zero-shot"]) == 0
    assert capsys.readouterr().out.strip().splitlines()[-1].endswith(",0")


def test_gradcheck_ops_suite(capsys):
    assert main(["gradcheck", "--suite", "ops", "--seeds", "2"]) == 0
    assert "FAIL" not in capsys.readouterr().out


def test_report_over_zero_shot_and_mpi(workspace, capsys):
    root, conf = workspace
    out = root / "report"
    assert main(["report", str(root / "runs" / "zero-shot"), str(root / "runs" / "mpi"),
                 "--out", str(out)] + conf) == 0
    rows = list(csv.DictReader((out / "report.csv").open()))
    assert [r["Method"] for r in rows] == ["zero-shot", "mpi"]
    assert rows[0]["#Params"] == "0" and int(rows[1]["#Params"]) > 0
    assert list(rows[0]) == ["Method", "#Params", "mAP", "mAP50", "mAP75",
                             "mAP_eS", "mAP_rS", "mAP_gS", "mAP_N"]
    assert (out / "report.md").read_text().startswith("| Method")
    assert (out / "frontier.csv").exists()
    assert b"\r" not in (out / "report.csv").read_bytes()


def test_manifest_contents(workspace):
    root, _ = workspace
    m = json.loads((root / "runs" / "mpi" / "manifest.json").read_text())
    assert m["command"].startswith("mpi-tune finetune --method mpi")
    assert m["config"]["peft"]["M"] == 3 and len(m["config_hash"]) == 64
    assert m["seed"] == 0 and m["timing"]["seconds"] >= 0
    ckpt = str(root / "base.mpit")
    assert m["inputs"][ckpt] == sha256_file(ckpt)
    assert any(p.endswith("model.mpit") for p in m["outputs"])


def test_commands_are_idempotent(workspace, tmp_path):
    root, conf = workspace
    args = ["finetune", "--method", "mpi", "--checkpoint", str(root / "base.mpit"),
            "--packs", str(root / "packs"), "--out", str(tmp_path / "again")] + conf
    assert main(args) == 0
    first = json.loads((root / "runs" / "mpi" / "manifest.json").read_text())["outputs"]
    second = json.loads((tmp_path / "again" / "manifest.json").read_text())["outputs"]
    strip = lambda d: {p.rsplit("/", 1)[-1]: h for p, h in d.items()}
    assert strip(first) == strip(second)


def test_cli_flag_overrides_config(workspace, tmp_path):
    root, conf = workspace
    assert main(["finetune", "--method", "mpi", "--M", "2", "--checkpoint", str(root / "base.mpit"),
                 "--packs", str(root / "packs"), "--out", str(tmp_path / "m2")] + conf) == 0
    m = json.loads((tmp_path / "m2" / "manifest.json").read_text())
    assert m["config"]["peft"]["M"] == 2


def test_usage_errors_exit_1(capsys):
    with pytest.raises(SystemExit) as info:
        main(["finetune", "--method", "nonsense"])
    assert info.value.code == 1
    with pytest.raises(SystemExit) as info:
        main([])
    assert info.value.code == 1


def test_malformed_config_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[peft]\nM = lots\n")
    assert main(["count-params", "--method", "mpi", "--config", str(bad)]) == 2
    assert "bad.ini" in capsys.readouterr().err


def test_truncated_checkpoint_exits_2(workspace, tmp_path, capsys):
    root, conf = workspace
    cut = tmp_path / "cut.mpit"
    cut.write_bytes((root / "base.mpit").read_bytes()[:100])
    assert main(["eval", "--checkpoint", str(cut), "--pack", str(root / "packs" / "test.spk"),
                 "--out", str(tmp_path / "e")] + conf) == 2
    err = capsys.readouterr().err
    assert "cut.mpit" in err and "offset" in err


def test_missing_pack_exits_2(tmp_path):
    assert main(["pretrain", "--packs", str(tmp_path), "--out", str(tmp_path / "x.mpit")]) == 2


def test_experiment_command(tmp_path, capsys):
    ini = tmp_path / "tiny.ini"
    ini.write_text(TINY + "\n[experiment]\nbaselines = adapter\n")
    out = tmp_path / "exp"
    assert main(["experiment", "--out", str(out), "--config", str(ini)]) == 0
    rows = (out / "report.csv").read_text().splitlines()
    assert [r.split(",")[0] for r in rows[1:]] == ["zero-shot", "mpi", "adapter"]
    for name in ("pretrain/model.mpit", "runs/mpi/run.json", "loss_curves.csv", "params.csv",
                 "frontier.csv", "summary.json", "manifest.json"):
        assert (out / name).exists(), name
    assert "| zero-shot" in capsys.readouterr().out
