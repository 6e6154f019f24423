import json

import numpy as np
import pytest

from ara_vos import cli
from ara_vos import serial

TINY = """
[run]
seed = 4
[data]
train_count = 4
eval_count = 3
frames = 4
[train]
steps = 20
warmup = 5
log_every = 0
[attack]
iterations = 2
[defense]
step_fraction = 0.1
"""


def run(*argv):
    assert cli.main([str(a) for a in argv]) == 0


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.ini").write_text(TINY)
    run("gen-data", "--config", root / "tiny.ini", "--out", root / "data")
    run("train", "--data", root / "data", "--out", root / "model.ckpt")
    return root


def test_gen_data_layout(pipeline):
    d = pipeline / "data"
    assert (d / "train" / "manifest.txt").exists() and (d / "eval" / "manifest.txt").exists()
    man = json.loads((d / "manifest.json").read_text())
    assert man["seed"] == 4 and man["inputs"]["config"]["hash"].startswith("sha256:")
    assert (man["train_videos"], man["eval_videos"]) == (4, 3)


def test_train_manifest_records_data(pipeline):
    man = json.loads((pipeline / "model.ckpt.manifest.json").read_text())
    assert man["command"] == "train" and man["train"]["steps"] == 20
    assert man["inputs"]["data"]["path"].endswith("train")


def test_attack_outputs(pipeline):
    out = pipeline / "pgd"
    run("attack", "--ckpt", pipeline / "model.ckpt", "--data", pipeline / "data", "--attacker", "pgd",
        "--out", out, "--seeds", 2)
    rows = cli.read_csv(out / "results.csv")
    assert list(rows[0]) == cli.RESULT_HEADER and len(rows) == 6
    assert all(float(r["linf"]) <= 8 / 255 + 1e-6 for r in rows)
    assert len(cli.read_csv(out / "iterations.csv")) == 12
    frame = serial.load_tensor(out / "frames" / "base" / "s0" / f"{rows[0]['vid']}_t0.arat")
    assert frame.shape == (64, 64, 3)
    pgm = (out / "previews" / "base" / "s0" / f"{rows[0]['vid']}_t0.pgm").read_text().split("\n")
    assert pgm[:3] == ["P2", "64 64", "255"]
    assert json.loads((out / "manifest.json").read_text())["attacker"] == "pgd"


def test_csvs_are_byte_identical_across_reruns(pipeline):
    for name in ("a", "b"):
        run("attack", "--ckpt", pipeline / "model.ckpt", "--data", pipeline / "data", "--attacker", "ara",
            "--out", pipeline / f"rerun_{name}", "--sweep", "epsilon=4/255,8/255")
        run("eval", "--ckpt", pipeline / "model.ckpt", "--data", pipeline / "data",
            "--adv", pipeline / f"rerun_{name}", "--out", pipeline / f"rerun_{name}.csv")
    for f in ("results.csv", "iterations.csv"):
        assert (pipeline / "rerun_a" / f).read_bytes() == (pipeline / "rerun_b" / f).read_bytes()
    assert (pipeline / "rerun_a.csv").read_bytes() == (pipeline / "rerun_b.csv").read_bytes()


def test_random_attack_then_eval_barely_moves(pipeline):
    run("attack", "--ckpt", pipeline / "model.ckpt", "--data", pipeline / "data", "--attacker", "random",
        "--out", pipeline / "random")
    run("eval", "--ckpt", pipeline / "model.ckpt", "--data", pipeline / "data", "--out", pipeline / "clean.csv")
    run("eval", "--ckpt", pipeline / "model.ckpt", "--data", pipeline / "data", "--adv", pipeline / "random",
        "--out", pipeline / "random.csv")
    clean = np.mean([float(r["JF"]) for r in cli.read_csv(pipeline / "clean.csv")])
    adv_rows = cli.read_csv(pipeline / "random.csv")
    assert {r["variant"] for r in adv_rows} == {"base/s0"}
    assert clean - np.mean([float(r["JF"]) for r in adv_rows]) <= 0.01
    # eval agrees with the attack's own bookkeeping
    res = cli.read_csv(pipeline / "random" / "results.csv")
    np.testing.assert_allclose(sorted(float(r["adv_JF"]) for r in res),
                               sorted(float(r["JF"]) for r in adv_rows), atol=1e-9)


def test_report_orders_attackers_by_drop(pipeline):
    runs = []
    for attacker in ("fgsm", "random", "ara"):
        out = pipeline / f"rep_{attacker}"
        run("attack", "--ckpt", pipeline / "model.ckpt", "--data", pipeline / "data", "--attacker", attacker,
            "--out", out)
        runs.append(out)
    run("report", "--runs", *runs, "--out", pipeline / "report.md")
    text = (pipeline / "report.md").read_text()
    table = [l for l in text.splitlines() if l.startswith("| ") and not l.startswith("| attacker")]
    names = [l.split("|")[1].strip() for l in table]
    assert names[0] == "clean" and sorted(names[1:]) == ["ara", "fgsm", "random"]
    drops = {}
    for attacker, r in zip(("fgsm", "random", "ara"), runs):
        drops[attacker] = np.mean([float(x["drop"]) for x in cli.read_csv(r / "results.csv")])
    assert names[1:] == sorted(drops, key=lambda a: (drops[a], a))
    assert text.count("## Attack comparison") == 1


def test_defend_uses_recorded_training_data(pipeline):
    run("defend", "--ckpt", pipeline / "model.ckpt", "--attacker", "pgd", "--out", pipeline / "def.ckpt",
        "--steps", 2)
    man = json.loads((pipeline / "def.ckpt.manifest.json").read_text())
    assert man["finetune"]["steps"] == 2 and man["attacker"] == "pgd"


def test_config_error_exit_code(tmp_path, capsys):
    (tmp_path / "bad.ini").write_text("[attack]\nepsilon = 0.1\nwhoops = 2\n")
    assert cli.main(["gen-data", "--config", str(tmp_path / "bad.ini"), "--out", str(tmp_path / "d")]) == 2
    assert "bad.ini:3:" in capsys.readouterr().err


def test_bad_checkpoint_reports_error(tmp_path, pipeline):
    (tmp_path / "junk.ckpt").write_bytes(b"junk")
    with pytest.raises(SystemExit, match="checkpoint"):
        cli.main(["eval", "--ckpt", str(tmp_path / "junk.ckpt"), "--data", str(pipeline / "data"),
                  "--out", str(tmp_path / "x.csv")])
