import json

import pytest

from evdet.cli import main, read_detections
from evdet.config import load_config
from evdet.datasets import make_toy_dataset


@pytest.fixture
def tiny(tmp_path):
    """A toy config small enough for a few seconds of training."""
    doc = {"include": "toy-64",
           "dataset": {"train": {"n_sequences": 4}, "val": {"n_sequences": 2}, "test": {"n_sequences": 2},
                       "common": {"seq_len": 3}},
           "train": {"stage1_epochs": 1, "stage2_epochs": 1, "batch_size": 2, "seq_len": 3}}
    p = tmp_path / "tiny.json"
    p.write_text(json.dumps(doc))
    return p


def run(*argv):
    return main([str(a) for a in argv])


def test_synth_is_byte_identical(tiny, tmp_path):
    for d in ("a", "b"):
        assert run("synth", "--config", tiny, "--out", tmp_path / d, "--split", "test") == 0
    fa = sorted((tmp_path / "a" / "data" / "test").iterdir())
    fb = sorted((tmp_path / "b" / "data" / "test").iterdir())
    assert [f.name for f in fa] == [f.name for f in fb] and len(fa) == 2 * 2 + 1
    assert all(x.read_bytes() == y.read_bytes() for x, y in zip(fa, fb))
    rep = json.loads((tmp_path / "a" / "data" / "synth_report.json").read_text())
    assert rep["config_hash"] == load_config(tiny).hash and rep["splits"]["test"]["sequences"] == 2
    assert rep["binning"] == {"frame_ms": 50.0, "micro_bins": 2}


def test_synth_csv(tiny, tmp_path):
    assert run("synth", "--config", tiny, "--out", tmp_path, "--split", "val", "--csv") == 0
    assert len(list((tmp_path / "data" / "val").glob("*.csv"))) == 2


def test_train_then_eval(tiny, tmp_path):
    out = tmp_path / "run"
    assert run("train", "--config", tiny, "--out", out) == 0
    rep = json.loads((out / "train_report.json").read_text())
    assert set(rep["stages"]) == {"1", "2"} and rep["train"]["stage1_epochs"] == 1
    assert run("eval", "--config", tiny, "--out", out, "--checkpoint", out / "stage2_best.seedw") == 0
    ev = json.loads((out / "eval_test.json").read_text())
    assert 0.0 <= ev["mAP"]["mAP"] <= 1.0
    assert all(0.0 <= v <= 1.0 for v in ev["densities"].values())
    assert ev["effective_gsop"]["total"] > 0.0
    dets = read_detections(out / "detections_test.jsonl", 2 * 3)
    assert len(dets) == 6

    # the density map from an eval report feeds hwsim directly
    assert run("hwsim", "--config", tiny, "--out", out, "--densities", out / "eval_test.json") == 0
    hw = json.loads((out / "hwsim_toy-64.json").read_text())
    assert hw["gsop"] == pytest.approx(ev["effective_gsop"]["total"], rel=1e-9)


def test_stage2_from_explicit_checkpoint(tiny, tmp_path):
    assert run("train", "--config", tiny, "--out", tmp_path / "s1", "--stage", "1") == 0
    assert run("train", "--config", tiny, "--out", tmp_path / "s2", "--stage", "2",
               "--from", tmp_path / "s1" / "stage1_best.seedw") == 0
    assert run("train", "--config", tiny, "--out", tmp_path / "s3", "--stage", "2") == 1


def test_eval_injected_detections(tiny, tmp_path):
    ds = make_toy_dataset(load_config(tiny).toy_cfg("test"))
    perfect = tmp_path / "perfect.jsonl"
    with open(perfect, "w") as fh:
        for f, boxes in enumerate(ds.flat_gt()):
            for b in boxes:
                fh.write(json.dumps({"frame": f, "bbox": b.as_list(), "class": b.cls, "score": 0.9}) + "\n")
    assert run("eval", "--config", tiny, "--out", tmp_path, "--detections", perfect) == 0
    assert json.loads((tmp_path / "eval_test.json").read_text())["mAP"]["mAP"] == pytest.approx(1.0)

    (tmp_path / "empty.jsonl").write_text("")
    assert run("eval", "--config", tiny, "--out", tmp_path, "--detections", tmp_path / "empty.jsonl") == 0
    assert json.loads((tmp_path / "eval_test.json").read_text())["mAP"]["mAP"] == 0.0

    (tmp_path / "bad.jsonl").write_text('{"frame": 99, "bbox": [0, 0, 1, 1], "class": 0, "score": 1}\n')
    assert run("eval", "--config", tiny, "--out", tmp_path, "--detections", tmp_path / "bad.jsonl") == 1


def test_count_ops(tmp_path, capsys):
    assert run("count-ops", "--network", "seed-256", "--out", tmp_path) == 0
    rep = json.loads((tmp_path / "count_ops_seed-256.json").read_text())
    assert rep["params_M"] == pytest.approx(13.772585) and rep["dense"]
    assert rep["gsop"] == pytest.approx(22.349363776)
    assert (tmp_path / "count_ops_seed-256.csv").read_text().startswith("layer,gsop,")
    assert run("count-ops", "--network", "seed-256", "--resolution", "120x152", "--out", tmp_path) == 0
    small = json.loads((tmp_path / "count_ops_seed-256.json").read_text())
    # recurrent thresholds are per neuron, so only they shrink with the input; GSOp scales with area
    assert 12.0 < small["params_M"] < rep["params_M"] and small["gsop"] < rep["gsop"] / 10
    assert run("count-ops", "--resolution", "tall", "--out", tmp_path) == 1


def test_hwsim_feasibility(tmp_path):
    assert run("hwsim", "--network", "red-like", "--out", tmp_path) == 0
    rep = json.loads((tmp_path / "hwsim_red-like.json").read_text())
    assert rep["feasible"] is False and "rnn" in rep["reason"] and rep["latency_ms"] is None
    csv = tmp_path / "map.csv"
    assert run("hwsim", "--network", "red-like", "--cores", "unlimited", "--out", tmp_path,
               "--mapping-csv", csv) == 0
    rep = json.loads((tmp_path / "hwsim_red-like.json").read_text())
    assert rep["feasible"] and rep["cores"] > 256 and rep["core_budget"] == "unlimited"
    assert len(csv.read_text().splitlines()) == rep["cores"] + 1
    assert run("hwsim", "--cores", "many", "--out", tmp_path) == 1


@pytest.mark.parametrize("argv", [
    ["count-ops", "--config", "no-such-config.json"],
    ["count-ops", "--network", "no-such-net.json"],
    ["gradcheck", "--component", "teleport"],
    ["hwsim", "--densities", "missing.json"],
    ["eval"],
])
def test_user_errors_exit_1(argv, tmp_path, capsys):
    assert run(*argv, "--out", tmp_path) == 1
    assert "error" in capsys.readouterr().err


def test_bad_densities_exit_1(tmp_path):
    (tmp_path / "d.json").write_text(json.dumps({"conv0": 2.0}))
    assert run("hwsim", "--densities", tmp_path / "d.json", "--out", tmp_path) == 1


def test_gradcheck(tmp_path, capsys):
    assert run("gradcheck", "--component", "gru", "--probes", "5", "--out", tmp_path) == 0
    assert "gru" in capsys.readouterr().out
    assert json.loads((tmp_path / "gradcheck.json").read_text())["reports"][0]["passed"]


def test_threads_and_seed_flags(tmp_path):
    assert run("count-ops", "--threads", "1", "--seed", "3", "--out", tmp_path) == 0
    assert run("count-ops", "--threads", "0", "--out", tmp_path) == 1


def test_staged_training_matches_one_shot(tiny, tmp_path):
    assert run("train", "--config", tiny, "--out", tmp_path / "both") == 0
    assert run("train", "--config", tiny, "--out", tmp_path / "split", "--stage", "1") == 0
    assert run("train", "--config", tiny, "--out", tmp_path / "split", "--stage", "2", "--from", "best") == 0
    for f in ("stage1_best.seedw", "stage2_best.seedw"):
        assert (tmp_path / "both" / f).read_bytes() == (tmp_path / "split" / f).read_bytes()
    assert (tmp_path / "both" / "metrics.csv").read_text() == (tmp_path / "split" / "metrics.csv").read_text()


def test_resume_after_completion_is_a_no_op(tiny, tmp_path):
    assert run("train", "--config", tiny, "--out", tmp_path, "--stage", "1") == 0
    before = (tmp_path / "stage1_best.seedw").read_bytes()
    assert run("train", "--config", tiny, "--out", tmp_path, "--stage", "1", "--resume") == 0
    assert (tmp_path / "stage1_best.seedw").read_bytes() == before
    rep = json.loads((tmp_path / "train_report.json").read_text())
    assert rep["stages"]["1"]["best_epoch"] == 0
