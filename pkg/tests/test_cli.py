import json

import pytest

from strobe import io as sio
from strobe.cli import main

from conftest import scene_arch


def _cfg(tmp_path, **kw):
    doc = {"scenario": "crossing_pedestrians", "scenario_args": {"duration": 0.3},
           "packets": "p.strbp", "labels": "l.json", "weights": "w.strbw",
           "detections": "d.jsonl", "report": "r.json", "checkpoint": "ckpt"}
    doc.update(kw)
    p = tmp_path / "run.json"
    p.write_text(json.dumps(doc))
    return str(p)


@pytest.fixture
def arch_doc():
    return scene_arch().to_dict()


@pytest.fixture
def simulated(tmp_path, arch_doc):
    cfg = _cfg(tmp_path, arch=arch_doc, train={"steps": 0, "seq_len": 3, "warmup": 2, "window": 1})
    assert main(["simulate", "--config", cfg]) == 0
    assert main(["train", "--config", cfg]) == 0
    return cfg


def test_simulate_is_deterministic_per_seed(tmp_path):
    cfg = _cfg(tmp_path, scenario_args={"duration": 1.0})
    assert main(["simulate", "--config", cfg]) == 0
    first = sio.sha256(tmp_path / "p.strbp")
    assert len(sio.read_packets(tmp_path / "p.strbp").packets) == 100
    assert main(["simulate", "--config", cfg]) == 0
    assert sio.sha256(tmp_path / "p.strbp") == first
    assert main(["simulate", "--config", cfg, "--seed", "5"]) == 0
    assert sio.sha256(tmp_path / "p.strbp") != first
    assert sio.read_labels(tmp_path / "l.json").scenario.seed == 5


def test_infer_batch_counts(tmp_path, simulated):
    assert main(["infer", "--config", simulated]) == 0
    run = sio.read_detections(tmp_path / "d.jsonl")
    assert run.mode == "packet" and len(run.batches) == 30
    assert main(["infer", "--config", simulated, "--mode", "sweep"]) == 0
    run = sio.read_detections(tmp_path / "d.jsonl")
    assert run.mode == "sweep" and len(run.batches) == 3
    assert all(d.emitted_at == b.emitted_at for b in run.batches for d in b.detections)


def test_eval_report_has_both_sections(tmp_path, simulated, capsys):
    assert main(["infer", "--config", simulated]) == 0
    capsys.readouterr()
    assert main(["eval", "--config", simulated]) == 0
    out = capsys.readouterr().out
    rep = json.loads((tmp_path / "r.json").read_text())
    assert {"latency", "common", "latency_breakdown", "seed"} <= set(rep)
    assert "Latency mAP" in out and "Common mAP" in out
    assert (tmp_path / "r.txt").read_text() == out
    before = (tmp_path / "r.json").read_bytes()
    assert main(["eval", "--config", simulated]) == 0
    assert (tmp_path / "r.json").read_bytes() == before


def test_validation_errors_exit_two(tmp_path, simulated, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"scenario": "empty_scene", "bogus": True}))
    assert main(["simulate", "--config", str(bad)]) == 2
    bad.write_text(json.dumps({"scenario": "no_such_scene", "packets": "a", "labels": "b"}))
    assert main(["simulate", "--config", str(bad)]) == 2
    # weights for a different architecture
    other = _cfg(tmp_path, arch="toy")
    assert main(["infer", "--config", other]) == 2
    assert "shape" in capsys.readouterr().err
    (tmp_path / "p.strbp").write_bytes(b"garbage")
    assert main(["infer", "--config", simulated]) == 2


def test_train_resume_matches_uninterrupted(tmp_path, arch_doc):
    tr = {"steps": 4, "seq_len": 3, "warmup": 2, "window": 1, "negatives": [20, 20, 20], "hard_k": 4}
    a = tmp_path / "a"
    a.mkdir()
    cfg = _cfg(a, arch=arch_doc, train=tr, loss_trace="trace.csv")
    assert main(["train", "--config", cfg]) == 0
    b = tmp_path / "b"
    b.mkdir()
    cfg_b = _cfg(b, arch=arch_doc, train=dict(tr, steps=2), loss_trace="trace.csv", resume=True)
    assert main(["train", "--config", cfg_b]) == 0
    cfg_b = _cfg(b, arch=arch_doc, train=tr, loss_trace="trace.csv", resume=True)
    assert main(["train", "--config", cfg_b]) == 0
    assert (a / "trace.csv").read_text() == (b / "trace.csv").read_text()
    assert (a / "w.strbw").read_bytes() == (b / "w.strbw").read_bytes()
    cfg_c = _cfg(b, arch=arch_doc, train=dict(tr, lr=0.5), resume=True)
    assert main(["train", "--config", cfg_c]) == 2


def test_bench_reports_both_modes(tmp_path, arch_doc, capsys):
    cfg = _cfg(tmp_path, arch=arch_doc, bench_packets=20)
    doc = json.loads(open(cfg).read())
    del doc["weights"]
    open(cfg, "w").write(json.dumps(doc))
    assert main(["bench", "--config", cfg]) == 0
    rep = json.loads((tmp_path / "r.json").read_text())
    assert rep["packet"]["accumulation_ms"] == pytest.approx(10.0)
    assert rep["sweep"]["accumulation_ms"] == pytest.approx(100.0)
    assert "ratio" in capsys.readouterr().out
