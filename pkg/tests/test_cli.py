import csv

import pytest

from semguide.cli import ablation_rows, main

TINY = [
    f"--set={kv}"
    for kv in (
        "epochs=1", "enc_dim=16", "enc_depth=2", "enc_heads=2", "dec_depth=1", "seg_dim=16",
        "seg_depth=2", "seg_heads=2", "class_dim=4", "U=2", "crop_size=32", "batch_size=4",
    )
]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data, run = root / "data", root / "run"
    gen = ["--set=num_images=6", "--set=eval_images=4", "--set=image_size=32",
           "--set=min_shape_size=8", "--set=max_shape_size=14"]
    assert main(["gen-data", "--out", str(data), *gen]) == 0
    assert main(["train-caae", "--data", str(data), "--out", str(run), *TINY]) == 0
    assert main(["train-seg", "--data", str(data), "--out", str(run), *TINY]) == 0
    return data, run


def test_gen_data_layout(workspace):
    data, _ = workspace
    assert len((data / "train.txt").read_text().split()) == 6
    assert len((data / "eval.txt").read_text().split()) == 4
    assert len(list((data / "images").glob("*.png"))) == 10


def test_training_outputs(workspace):
    _, run = workspace
    for name in ("caae.ckpt", "caae_log.csv", "seg.ckpt", "seg_log.csv"):
        assert (run / name).exists()
    assert (run / "seg_log.csv").read_text().startswith("epoch,term,value\n")
    assert not list(run.glob(".staging-*"))


def test_eval_on_ground_truth_is_perfect(workspace, tmp_path, capsys):
    data, _ = workspace
    assert main(["eval", "--data", str(data), "--pred", str(data / "masks"), "--out", str(tmp_path)]) == 0
    assert capsys.readouterr().out.strip() == "miou=1.000 fp=0.000 fn=0.000"
    assert (tmp_path / "metrics.csv").exists()


def test_infer_and_eval(workspace, capsys):
    data, run = workspace
    assert main(["infer", "--data", str(data), "--out", str(run)]) == 0
    assert len(list((run / "maps").glob("*_mask.png"))) == 4
    assert len(list((run / "maps").glob("*_class*.png"))) == 12
    assert main(["eval", "--data", str(data), "--out", str(run), "--select-tau"]) == 0
    assert capsys.readouterr().out.strip().splitlines()[-1].startswith("miou=")


def test_plot(workspace):
    _, run = workspace
    assert main(["plot", "--out", str(run)]) == 0
    assert (run / "caae_log.png").exists() and (run / "seg_log.png").exists()


def test_ablation_rows_layout():
    rows = ablation_rows("loss-flags", 6)
    assert len(rows) == 8 and all(r["loss_cf"] for r in rows)
    assert rows[0] == {"loss_cf": True, "loss_cb": False, "loss_as": False, "loss_ac": False}
    assert rows[-1] == {"loss_cf": True, "loss_cb": True, "loss_as": True, "loss_ac": True}
    assert len({tuple(r.values()) for r in rows}) == 8
    assert [r["sigma"] for r in ablation_rows("sigma", 6)] == [0.025, 0.05, 0.075, 0.1]
    assert [r["U"] for r in ablation_rows("U", 3)] == [1, 2, 3]


def test_ablate_loss_flags_writes_eight_rows(workspace):
    data, run = workspace
    assert main(["ablate", "--grid", "loss-flags", "--data", str(data), "--out", str(run), *TINY]) == 0
    with open(run / "ablate_loss_flags.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 8
    assert [int(r["seed"]) for r in rows] == list(range(8))


def test_missing_caae_checkpoint(workspace, tmp_path, capsys):
    data, _ = workspace
    code = main(["train-seg", "--data", str(data), "--out", str(tmp_path), *TINY])
    assert code == 2
    err = capsys.readouterr().err
    assert str(tmp_path / "caae.ckpt") in err and len(err.strip().splitlines()) == 1
    assert list(tmp_path.iterdir()) == []


def test_usage_errors(workspace, tmp_path, capsys):
    data, _ = workspace
    assert main(["frobnicate"]) == 1
    assert main(["ablate", "--data", str(data), "--out", str(tmp_path)]) == 1  # --grid missing
    assert main(["train-caae", "--data", str(data), "--out", str(tmp_path), "--set", "nonsense"]) == 1
    assert main(["train-caae", "--data", str(data), "--out", str(tmp_path), "--set", "colour=red"]) == 1
    assert "colour" in capsys.readouterr().err
    assert list(tmp_path.iterdir()) == []


def test_config_file_and_seed(workspace, tmp_path):
    data, _ = workspace
    cfg = tmp_path / "caae.cfg"
    cfg.write_text("# tiny\n" + "\n".join(a.split("=", 1)[1].replace("=", " = ") for a in TINY) + "\n")
    out = tmp_path / "run"
    assert main(["train-caae", "--data", str(data), "--out", str(out), "--config", str(cfg), "--seed", "7"]) == 0
    assert "seed = 7" in (out / "caae.cfg").read_text()
