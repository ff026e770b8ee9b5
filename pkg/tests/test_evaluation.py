import json

import numpy as np
import pytest

from msadgn.data import DomainDataset, make_benchmark
from msadgn.errors import DataError, FormatError, ParameterError
from msadgn.evaluation import (
    BenchmarkSpec,
    EvalReport,
    RunMatrix,
    ablation_sweep,
    confusion_matrix,
    directional_checks,
    dump_embeddings,
    evaluate,
    read_predictions,
    report_from_labels,
    run_scenario,
)
from msadgn.trainer import build_networks, predict_with
from tests.conftest import small_config


def test_perfect_predictions():
    y = np.array([0, 1, 2, 2, 1, 0])
    rep = report_from_labels(y, y)
    assert rep.overall_accuracy == 1.0
    assert np.array_equal(rep.confusion, np.diag([2, 2, 2]))
    assert rep.per_class_accuracy.tolist() == [1.0, 1.0, 1.0]


def test_constant_predictor_balanced():
    y = np.repeat([0, 1, 2], 10)
    rep = report_from_labels(y, np.ones(30, int))
    assert rep.overall_accuracy == 1 / 3
    assert rep.per_class_accuracy.tolist() == [0.0, 1.0, 0.0]


def test_report_invariants(rng):
    y, p = rng.integers(0, 3, 200), rng.integers(0, 3, 200)
    rep = report_from_labels(y, p, seed=4, config_hash="abc")
    rep.check()
    assert rep.confusion.sum() == rep.n_samples == 200
    assert rep.confusion.sum(axis=1).tolist() == np.bincount(y, minlength=3).tolist()
    assert rep.overall_accuracy == np.trace(rep.confusion) / 200
    assert rep.overall_accuracy == np.mean(y == p)


def test_confusion_orientation():
    c = confusion_matrix([0, 0, 1], [2, 0, 1])
    assert c[0, 2] == 1 and c[0, 0] == 1 and c[1, 1] == 1


def test_confusion_errors():
    with pytest.raises(DataError):
        confusion_matrix([0, 1], [0])
    with pytest.raises(DataError):
        confusion_matrix([0, 3], [0, 1])


def test_report_json_round_trip(tmp_path, rng):
    rep = report_from_labels(rng.integers(0, 3, 50), rng.integers(0, 3, 50), seed=2, config_hash="h")
    rep.save(tmp_path / "r.json")
    back = EvalReport.load(tmp_path / "r.json")
    assert back.overall_accuracy == rep.overall_accuracy
    assert np.array_equal(back.confusion, rep.confusion) and back.seed == 2
    assert json.loads((tmp_path / "r.json").read_text())["version"] == "msadgn-report-v1"


def test_report_missing_class_nan(tmp_path):
    rep = report_from_labels([0, 0], [0, 1])
    assert np.isnan(rep.per_class_accuracy[2])
    rep.save(tmp_path / "r.json")
    assert np.isnan(EvalReport.load(tmp_path / "r.json").per_class_accuracy[2])


def test_report_tampered(tmp_path, rng):
    rep = report_from_labels(rng.integers(0, 3, 20), rng.integers(0, 3, 20))
    d = rep.to_dict()
    d["n_samples"] = 21
    (tmp_path / "r.json").write_text(json.dumps(d))
    with pytest.raises(FormatError):
        EvalReport.load(tmp_path / "r.json")
    d = rep.to_dict()
    d["version"] = "other"
    (tmp_path / "r.json").write_text(json.dumps(d))
    with pytest.raises(FormatError, match="version"):
        EvalReport.load(tmp_path / "r.json")


@pytest.fixture(scope="module")
def tiny():
    return make_benchmark(0, 3, 4, n_per_class=16, length=32)


def test_evaluate_recount(tiny, tmp_path):
    _, target = tiny
    cfg = small_config()
    model = build_networks(cfg)
    rep = evaluate(model, cfg, target, tmp_path / "pred.jsonl")
    rows = [json.loads(l) for l in (tmp_path / "pred.jsonl").read_text().splitlines()]
    assert [r["index"] for r in rows] == list(range(target.n))
    recount = sum(r["label"] == r["pred"] for r in rows) / len(rows)
    assert rep.overall_accuracy == recount
    assert all(abs(sum(r["weights"]) - 1) < 1e-9 and len(r["logits"]) == 3 for r in rows)
    direct = predict_with(model, cfg, target.signals).labels
    assert [r["pred"] for r in rows] == direct.tolist()
    assert rep.config_hash == cfg.config_hash() and rep.seed == cfg.seed


def test_evaluate_unlabeled(tiny):
    sources, _ = tiny
    cfg = small_config()
    with pytest.raises(DataError):
        evaluate(build_networks(cfg), cfg, sources[1])


def test_read_predictions_errors(tmp_path):
    with pytest.raises(DataError):
        read_predictions(tmp_path / "none.jsonl")
    (tmp_path / "bad.jsonl").write_text('{"index": 0}\n')
    with pytest.raises(FormatError):
        read_predictions(tmp_path / "bad.jsonl")


def test_dump_embeddings(tiny, tmp_path):
    _, target = tiny
    cfg = small_config()
    dump_embeddings(build_networks(cfg), target, tmp_path / "e.csv")
    lines = (tmp_path / "e.csv").read_text().splitlines()
    assert len(lines) == target.n + 1
    assert len(lines[0].split(",")) == cfg.embedding_dim + 1


# ---------------------------------------------------------------- run matrix


def rep(acc, n=100):
    k = int(round(acc * n))
    return report_from_labels(np.zeros(n, int), np.r_[np.zeros(k, int), np.ones(n - k, int)])


def test_matrix_single_seed():
    m = RunMatrix()
    m.add("M7", 0, rep(0.6))
    assert m.mean("M7") == 0.6 and m.std("M7") == 0.0


def test_matrix_stats():
    m = RunMatrix()
    accs = [0.5, 0.6, 0.7, 0.8, 0.9]
    for s, a in enumerate(accs, start=1):
        m.add("M1", s, rep(a))
    assert abs(m.mean("M1") - 0.7) < 1e-12
    assert abs(m.std("M1") - np.std(accs, ddof=1)) < 1e-12
    assert min(accs) <= m.mean("M1") <= max(accs)
    assert m.seeds("M1") == [1, 2, 3, 4, 5]
    with pytest.raises(DataError):
        m.mean("M9")


def test_directional_checks():
    m = RunMatrix()
    for s in range(3):
        m.add("M1", s, rep(0.40 + 0.01 * s))
        m.add("M3", s, rep(0.62 + 0.01 * s))
        m.add("M7", s, rep(0.60 + 0.01 * s))
    checks = {c.name: c for c in directional_checks(m)}
    assert checks["M7-M1"].passed
    assert not checks["M7>=M3"].passed  # 2pp gap, 1pp pooled std
    m.add("M3", 3, rep(0.52))
    checks = {c.name: c for c in directional_checks(m)}
    assert checks["M7>=M3"].passed


def test_run_scenario_and_files(tmp_path):
    bench = BenchmarkSpec(0, 3, 4, n_per_class=8, length=32)
    cfg = small_config(epochs=1)
    m = run_scenario(cfg, bench, [1, 2], out_dir=tmp_path)
    assert m.scenarios() == ["M7"] and m.seeds("M7") == [1, 2]
    for s in (1, 2):
        d = tmp_path / f"M7_seed{s}"
        assert (d / "report.json").exists() and (d / "predictions.jsonl").exists() and (d / "train_log.csv").exists()
        r = EvalReport.load(d / "report.json")
        assert r.seed == s and r.n_samples == 24
    m.write_csv(tmp_path / "m.csv")
    assert len((tmp_path / "m.csv").read_text().splitlines()) == 3


def test_run_scenario_errors():
    with pytest.raises(ParameterError):
        run_scenario(small_config(), BenchmarkSpec(length=32), [])
    with pytest.raises(ParameterError):
        run_scenario(small_config(), BenchmarkSpec(length=64), [0])


def test_ablation_sweep_labels():
    bench = BenchmarkSpec(0, 3, 4, n_per_class=8, length=32)
    m = ablation_sweep(small_config(epochs=1), bench, ["M1", "M7"], [0])
    assert m.scenarios() == ["M1", "M7"]
    assert [row["n"] for row in m.summary()] == [1, 1]
