import json

import numpy as np
import pytest

from depthstab import cli
from depthstab import io as dio
from depthstab.cli import EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_OK, RunConfig, main
from depthstab.training import NumericalError

TINY = {"data": {"n_train": 3, "n_test": 2, "n_frames": 4, "n_val": 1},
        "model": {"embed_dim": 16, "encoder_channels": [8, 8, 16]},
        "optim": {"steps": 4, "batch": 2, "crop": 24, "val_every": 2}}


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps(TINY))
    c = ["--config", str(cfg)]
    assert main(["generate", *c, "--out", str(root / "data")]) == EXIT_OK
    assert main(["train", *c, "--data", str(root / "data"), "--out", str(root / "run")]) == EXIT_OK
    for mode in ("forward", "backward", "bi", "flow"):
        assert main(["infer", *c, "--checkpoint", str(root / "run" / "model.ckpt"),
                     "--data", str(root / "data"), "--out", str(root / mode), "--mode", mode]) == EXIT_OK
    return root, c


def read_preds(d):
    return {p.name: [m.values for m in dio.read_disparities(p)] for p in sorted(d.iterdir())}


# ---------------------------------------------------------------- config


def test_config_round_trip():
    cfg = RunConfig.preset("desk")
    assert RunConfig.from_json(cfg.to_json()) == cfg
    paper = RunConfig.preset("paper")
    assert RunConfig.from_json(paper.to_json()) == paper


def test_presets():
    assert RunConfig.preset("desk").optim.lr == pytest.approx(6e-4)
    assert RunConfig.preset("paper").optim.lr == pytest.approx(6e-5)
    assert RunConfig.preset("paper").optim.batch == 9


def test_config_errors_exit_2(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"optim": {"nonsense": 1}}))
    assert main(["generate", "--config", str(bad), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    bad.write_text(json.dumps({"infer": {"beta": 2.0}}))
    assert main(["generate", "--config", str(bad), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert main(["generate", "--config", str(tmp_path / "missing.json"), "--out", "x"]) == EXIT_CONFIG


def test_data_errors_exit_3(tmp_path):
    assert main(["train", "--data", str(tmp_path / "nothing"), "--out", str(tmp_path / "r")]) == EXIT_DATA
    assert main(["eval", "--pred", str(tmp_path), "--gt", str(tmp_path), "--out", str(tmp_path / "e")]) == EXIT_DATA


def test_numerical_failure_exits_4(run, monkeypatch, tmp_path):
    root, c = run

    def explode(*a, **k):
        raise NumericalError("non-finite loss")

    monkeypatch.setattr(cli, "train", explode)
    assert main(["train", *c, "--data", str(root / "data"), "--out", str(tmp_path / "r")]) == EXIT_NUMERIC


# ---------------------------------------------------------------- generate and train


def test_manifest_counts(run):
    root, _ = run
    m = json.loads((root / "data" / "manifest.json").read_text())
    assert m["accepted"] == {"train": 3, "test": 2}
    assert m["requested"] == len(m["draws"]) and m["rejected"] == sum(not d["accepted"] for d in m["draws"])
    assert len(dio.list_sequences(root / "data" / "train")) == 3


def test_loss_log_running_best_is_monotone(run):
    root, _ = run
    rows = [json.loads(l) for l in (root / "run" / "loss_log.jsonl").read_text().splitlines()]
    best = [r["running_best"] for r in rows]
    assert len(rows) == 4 and all(b <= a for a, b in zip(best, best[1:]))


def test_stop_and_resume_matches_straight_run(run, tmp_path):
    root, c = run
    data = str(root / "data")
    assert main(["train", *c, "--data", data, "--out", str(tmp_path), "--stop-at", "2"]) == EXIT_OK
    assert main(["train", *c, "--data", data, "--out", str(tmp_path), "--resume"]) == EXIT_OK
    resumed = [json.loads(l) for l in (tmp_path / "loss_log.jsonl").read_text().splitlines()]
    straight = [json.loads(l) for l in (root / "run" / "loss_log.jsonl").read_text().splitlines()]
    assert [r["step"] for r in resumed] == [0, 1, 2, 3]
    assert np.allclose([r["total"] for r in resumed], [r["total"] for r in straight], atol=1e-6)
    assert (tmp_path / "model.ckpt").read_bytes() == (root / "run" / "model.ckpt").read_bytes()


def test_resume_without_state_is_a_data_error(run, tmp_path):
    root, c = run
    assert main(["train", *c, "--data", str(root / "data"), "--out", str(tmp_path), "--resume"]) == EXIT_DATA


# ---------------------------------------------------------------- infer


def test_infer_writes_one_map_per_frame(run):
    root, _ = run
    for seq_dir in dio.list_sequences(root / "data" / "test"):
        n = len(list((seq_dir / "frames").glob("*.png")))
        assert len(list((root / "forward" / seq_dir.name / "disp").glob("*.pfm"))) == n
        t = json.loads((root / "bi" / seq_dir.name / "timing.json").read_text())
        assert t["mode"] == "bi" and t["encoder_calls"] == n


def test_bi_is_mean_of_forward_and_backward(run):
    root, _ = run
    f, b, bi = (read_preds(root / m) for m in ("forward", "backward", "bi"))
    for name in bi:
        for x, y, z in zip(f[name], b[name], bi[name]):
            assert np.allclose(z, (x + y) / 2, atol=1e-6)


def test_flow_with_beta_one_is_bi(run, tmp_path):
    root, c = run
    assert main(["infer", *c, "--checkpoint", str(root / "run" / "model.ckpt"), "--data",
                 str(root / "data"), "--out", str(tmp_path), "--mode", "flow", "--beta", "1.0"]) == EXIT_OK
    bi, fl = read_preds(root / "bi"), read_preds(tmp_path)
    for name in bi:
        assert all(np.array_equal(x, y) for x, y in zip(bi[name], fl[name]))


# ---------------------------------------------------------------- eval


def test_eval_ground_truth_against_itself(run, tmp_path):
    root, c = run
    pred = tmp_path / "pred"
    for seq_dir in dio.list_sequences(root / "data" / "test"):
        seq = dio.read_sequence(seq_dir)
        dio.write_disparities(pred / seq.name, seq.gt_disparity)
    assert main(["eval", *c, "--pred", str(pred), "--gt", str(root / "data"),
                 "--out", str(tmp_path / "ev"), "--timestamp", "T"]) == EXIT_OK
    doc = json.loads((tmp_path / "ev" / "report.json").read_text())
    assert doc["overall"]["delta1"] == 1.0 and doc["overall"]["rel"] == pytest.approx(0.0, abs=1e-12)
    assert set(doc["per_video"]) == {"scene_50000", "scene_50001"}
    assert doc["timestamp"] == "T"


def test_eval_plots_and_per_video_report(run, tmp_path):
    root, c = run
    assert main(["eval", *c, "--pred", str(root / "flow"), "--gt", str(root / "data"),
                 "--out", str(tmp_path), "--plots", "--timestamp", "T"]) == EXIT_OK
    doc = json.loads((tmp_path / "report.json").read_text())
    assert len(doc["per_video"]) == 2 and "initial" in doc
    pngs = sorted(p.name for p in (tmp_path / "plots").glob("*.png"))
    assert pngs == ["scene_50000_opw.png", "scene_50000_slice.png",
                    "scene_50001_opw.png", "scene_50001_slice.png"]


def test_eval_frame_count_mismatch(run, tmp_path):
    root, c = run
    pred = tmp_path / "pred"
    seq = dio.read_sequence(dio.list_sequences(root / "data" / "test")[0])
    dio.write_disparities(pred / seq.name, seq.gt_disparity[:-1])
    assert main(["eval", *c, "--pred", str(pred), "--gt", str(root / "data"), "--out", str(tmp_path / "e")]) == EXIT_DATA
