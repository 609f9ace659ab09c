import json
import math

import numpy as np
import pytest
import yaml

from mtctl import cli
from mtctl.errors import NumericsError
from mtctl.metrics import CSV_HEADER, MetricReport, MetricRow
from mtctl.network import NetConfig
from mtctl.trainer import TrainConfig, init_state, save_checkpoint
from mtctl.volumes import load_mask, load_volume, read_manifest


def _synth(tmp_path, n=3, shape="16,16,16", seed=0, name="data"):
    out = tmp_path / name
    assert cli.main(["synth", "--out", str(out), "--n-cases", str(n), "--shape", shape, "--seed", str(seed)]) == 0
    return out


def test_synth_deterministic(tmp_path):
    a = _synth(tmp_path, name="a")
    b = _synth(tmp_path, name="b")
    entries = read_manifest(a / "manifest.json")
    assert len(entries) == 3
    for e in entries:
        assert (a / e.image.name).read_bytes() == (b / e.image.name).read_bytes()
        m = load_mask(e.mask)
        assert set(np.unique(m.data)) <= {0, 1} and m.data.any()
        assert load_volume(e.image).shape == (16, 16, 16)


def test_synth_refuses_nonempty(tmp_path, capsys):
    out = _synth(tmp_path)
    assert cli.main(["synth", "--out", str(out), "--n-cases", "1", "--shape", "16,16,16"]) == 2
    assert "not empty" in capsys.readouterr().err
    assert cli.main(["synth", "--out", str(out), "--n-cases", "1", "--shape", "16,16,16", "--force"]) == 0


def _config(tmp_path, data, **train):
    base = dict(max_iters=6, batch_labeled=2, batch_unlabeled=2, gamma_rampup_iters=3,
                checkpoint_every=3, k=100.0, mc={"n_samples": 2})
    base.update(train)
    cfg = {
        "data": {"manifest": str(data / "manifest.json"), "labeled_fraction": 0.5},
        "out_dir": "run",
        "net": {"in_shape": [16, 16, 16], "base_channels": 4, "depth": 2},
        "train": base,
    }
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return path, cfg


def test_train_resume_eval_compare(tmp_path, capsys):
    data = _synth(tmp_path, n=5)
    path, cfg = _config(tmp_path, data)
    assert cli.main(["train", "--config", str(path)]) == 0
    run = tmp_path / "run"
    recs = [json.loads(l) for l in (run / "train_log.ndjson").read_text().splitlines()]
    assert [r["step"] for r in recs] == list(range(1, 7))
    assert (run / "checkpoints" / "step_000003" / "manifest.json").exists()
    assert (run / "report.csv").read_text().splitlines()[0] == ",".join(CSV_HEADER)

    # resume from step 3 to a longer horizon, numbering continues
    cfg["train"]["max_iters"] = 8
    path.write_text(yaml.safe_dump(cfg))
    assert cli.main(["train", "--config", str(path), "--resume", str(run / "checkpoints" / "step_000003")]) == 0
    steps = [json.loads(l)["step"] for l in (run / "train_log.ndjson").read_text().splitlines()]
    assert steps[6:] == [4, 5, 6, 7, 8]

    assert cli.main(["eval", "--ckpt", str(run / "final"), "--manifest", str(data / "manifest.json"),
                     "--out", str(tmp_path / "r.csv")]) == 0
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "case_id,dice,jaccard,hd95,asd,ravd,precision,recall"
    assert len(lines) == 1 + 5 + 1 and all(len(l.split(",")) == 8 for l in lines)

    capsys.readouterr()
    assert cli.main(["compare", "--reports", str(tmp_path / "r.csv"), str(tmp_path / "r.csv")]) == 0
    assert "p_value=1\n" in capsys.readouterr().out


@pytest.mark.parametrize("edit", [
    lambda c: c["train"].update(bogus=1),
    lambda c: c.update(extra=1),
    lambda c: c["net"].update(depth=9),
    lambda c: c["data"].update(manifest="missing.json"),
    lambda c: c["train"].update(weights={"gamma": 0.1, "lambda_x": 2}),
])
def test_train_bad_config_exits_2(tmp_path, edit, capsys):
    data = _synth(tmp_path, n=2)
    path, cfg = _config(tmp_path, data)
    edit(cfg)
    path.write_text(yaml.safe_dump(cfg))
    assert cli.main(["train", "--config", str(path)]) == 2
    assert "error:" in capsys.readouterr().err


def test_train_numeric_failure_exits_3(tmp_path, monkeypatch, capsys):
    data = _synth(tmp_path, n=2)
    path, _ = _config(tmp_path, data)

    def blow_up(*a, **kw):
        raise NumericsError("non-finite loss", step=4)

    monkeypatch.setattr(cli, "fit", blow_up)
    assert cli.main(["train", "--config", str(path)]) == 3
    assert "step 4" in capsys.readouterr().err


def _ckpt(tmp_path, shape=(16, 16, 16)):
    cfg = TrainConfig(checkpoint_every=0)
    state = init_state(NetConfig(shape, 4, 2), cfg)
    return save_checkpoint(state, tmp_path / "ck", cfg)


def test_eval_requires_masks(tmp_path):
    data = _synth(tmp_path, n=2)
    man = json.loads((data / "manifest.json").read_text())
    del man["cases"][1]["mask"]
    (data / "manifest.json").write_text(json.dumps(man))
    assert cli.main(["eval", "--ckpt", str(_ckpt(tmp_path)), "--manifest", str(data / "manifest.json"),
                     "--out", str(tmp_path / "r.csv")]) == 2


def test_eval_stub_returning_gt(tmp_path, monkeypatch):
    data = _synth(tmp_path, n=2)
    masks = {e.image.name: load_mask(e.mask).data for e in read_manifest(data / "manifest.json")}
    current = {}
    real_load = cli.load_volume

    def load(path, case_id=None):
        current["mask"] = masks[path.name]
        return real_load(path, case_id)

    monkeypatch.setattr(cli, "load_volume", load)
    monkeypatch.setattr(cli, "_infer", lambda net, vol: (vol, current["mask"].astype(float), None))
    assert cli.main(["eval", "--ckpt", str(_ckpt(tmp_path)), "--manifest", str(data / "manifest.json"),
                     "--out", str(tmp_path / "r.csv")]) == 0
    for row in MetricReport.from_csv(tmp_path / "r.csv").rows:
        assert (row.dice, row.jaccard, row.precision, row.recall) == (100, 100, 100, 100)


def test_predict_outputs(tmp_path):
    data = _synth(tmp_path, n=1, shape="20,18,16")
    img = read_manifest(data / "manifest.json")[0].image
    ck = str(_ckpt(tmp_path))
    args = ["predict", "--ckpt", ck, "--in", str(img), "--uncertainty", "3", "--seed", "5"]
    assert cli.main(args + ["--out", str(tmp_path / "p1")]) == 0
    assert cli.main(args + ["--out", str(tmp_path / "p2")]) == 0
    p1, p2 = tmp_path / "p1", tmp_path / "p2"
    assert load_mask(p1 / "mask.mtv").shape == (20, 18, 16)
    assert load_volume(p1 / "distance.mtv").shape == (20, 18, 16)
    u1 = load_volume(p1 / "uncertainty.mtv").data
    assert u1.max() <= math.log(2) + 1e-6 and u1.min() >= 0
    assert np.array_equal(u1, load_volume(p2 / "uncertainty.mtv").data)
    assert (p1 / "slices.png").stat().st_size > 0
    assert cli.main(["predict", "--ckpt", ck, "--in", str(img), "--out", str(tmp_path / "p3"),
                     "--uncertainty", "1"]) == 2


def _report(path, values):
    MetricReport([MetricRow(f"c{i}", v, v, 1.0, 1.0, 0.0, v, v) for i, v in enumerate(values)]).to_csv(path)


def test_compare_shifted(tmp_path, capsys):
    base = np.linspace(70, 90, 10)
    _report(tmp_path / "a.csv", base + 5)
    _report(tmp_path / "b.csv", base)
    assert cli.main(["compare", "--reports", str(tmp_path / "a.csv"), str(tmp_path / "b.csv"), "--metric", "dice"]) == 0
    out = capsys.readouterr().out
    p = float(next(l for l in out.splitlines() if l.startswith("p_value=")).split("=")[1])
    assert p == 2 / 2 ** 10
    assert "mean_diff=5" in out


def test_compare_mismatched_ids(tmp_path):
    _report(tmp_path / "a.csv", np.arange(6.0))
    MetricReport([MetricRow(f"x{i}", 1, 1, 1, 1, 0, 1, 1) for i in range(6)]).to_csv(tmp_path / "b.csv")
    assert cli.main(["compare", "--reports", str(tmp_path / "a.csv"), str(tmp_path / "b.csv")]) == 2


@pytest.mark.slow
def test_train_supervised_single_phantom(tmp_path):
    data = _synth(tmp_path, n=1)
    path, cfg = _config(tmp_path, data, max_iters=300, batch_labeled=1, batch_unlabeled=0, checkpoint_every=0,
                        weights={"lambda_dist": 0, "lambda_ct": 0, "lambda_g": 0, "gamma": 0})
    cfg["data"]["labeled_fraction"] = 1.0
    path.write_text(yaml.safe_dump(cfg))
    assert cli.main(["train", "--config", str(path)]) == 0
    report = MetricReport.from_csv(tmp_path / "run" / "report.csv")
    assert len(report) == 1 and report.rows[0].dice >= 90
