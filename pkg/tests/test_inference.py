import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mext import _kernels as K
from mext import inference as I
from mext.data import Dataset
from mext.errors import ContractError
from mext.model import ModelConfig, forward_all_exits, init


def test_entropy_examples():
    assert I.entropy([1.0, 0.0]) == 0.0
    assert I.entropy([0.5, 0.5]) == pytest.approx(math.log(2), abs=1e-12)
    assert I.entropy([0.9, 0.1]) == pytest.approx(0.325083, abs=1e-6)


def test_entropy_bits():
    assert I.entropy([0.5, 0.5], base=2) == pytest.approx(1.0)


def test_entropy_rejects_negative():
    with pytest.raises(ContractError):
        I.entropy([1.2, -0.2])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0.0, 1.0), min_size=2, max_size=8).filter(lambda xs: sum(xs) > 1e-3))
def test_entropy_bounds(xs):
    p = np.asarray(xs) / sum(xs)
    h = I.entropy(p)
    assert -1e-12 <= h <= math.log(len(p)) + 1e-12


def _table(entropies, preds=None):
    ent = np.asarray(entropies, dtype=np.float64)
    preds = np.zeros(ent.shape, dtype=np.int64) if preds is None else np.asarray(preds)
    return I.ExitTable(preds, ent)


def test_exit_layers_first_crossing():
    # example 0: layer-1 entropy 0.9, layer-2 0.30, S=0.4 -> exits at 2
    t = _table([[0.9, 0.1, 0.5], [0.30, 0.2, 0.45], [0.6, 0.6, 0.6]])
    assert t.exit_layers(0.4).tolist() == [2, 1, 3]
    assert t.exit_layers(0.0).tolist() == [3, 3, 3]


def test_exit_layers_backends_agree():
    ent = np.random.default_rng(0).uniform(0, 0.7, size=(6, 500))
    for s in (0.0, 0.1, 0.35, 0.69, 1.0):
        results = [impl["first_exit"](ent.copy(), s) for impl in K.IMPLS.values()]
        for r in results[1:]:
            np.testing.assert_array_equal(r, results[0])


def test_expected_time_formula():
    assert I.expected_time_pct([0, 0, 5, 0, 0, 5]) == pytest.approx(75.0)
    assert I.expected_time_pct([4, 0, 0]) == pytest.approx(100 / 3)


def test_f1_metric():
    pred = np.array([1, 1, 0, 0, 1])
    gold = np.array([1, 0, 1, 0, 1])
    # tp=2 fp=1 fn=1
    assert I.score(pred, gold, "f1") == pytest.approx(2 * 2 / (2 * 2 + 1 + 1))
    assert I.score(pred, gold, "accuracy") == pytest.approx(0.6)


@pytest.fixture(scope="module")
def trained_like():
    cfg = ModelConfig(k=4, hidden=16, heads=2, ffn=32, vocab=40, classes=3, max_len=10, seed=9, init_std=0.5)
    store = init(cfg)
    rng = np.random.default_rng(1)
    tok = rng.integers(4, 40, size=(60, 10)).astype(np.int32)
    tok[:, 0] = 2
    tok[::3, 7:] = 0
    ds = Dataset(tok, rng.integers(0, 3, size=60))
    return store, ds


def test_sweep_zero_threshold_is_full_depth(trained_like):
    store, ds = trained_like
    (rec,) = I.sweep(store, ds, [0.0])
    assert rec.expected_time_pct == pytest.approx(100.0)
    assert rec.histogram == [0, 0, 0, 60]
    assert rec.metric == I.eval_fixed_layers(store, ds)[-1]


def test_sweep_above_log_c_exits_at_one(trained_like):
    store, ds = trained_like
    (rec,) = I.sweep(store, ds, [math.log(3) + 1e-6])
    assert rec.histogram == [60, 0, 0, 0]
    assert rec.expected_time_pct == pytest.approx(25.0)
    assert rec.metric == I.eval_fixed_layers(store, ds)[0]


def test_sweep_monotone_and_histogram_identity(trained_like):
    store, ds = trained_like
    table = I.ExitTable.build(store, ds.tokens)
    grid = np.linspace(0, 1.2, 20)
    recs = I.sweep_table(table, ds.labels, grid)
    times = [r.expected_time_pct for r in recs]
    assert all(b <= a + 1e-12 for a, b in zip(times, times[1:]))
    prev = None
    for s, r in zip(grid, recs):
        assert sum(r.histogram) == 60
        direct = sum(c * i / 4 for i, c in enumerate(r.histogram, start=1)) / 60 * 100
        assert abs(direct - r.expected_time_pct) <= 1e-9
        layers = table.exit_layers(s)
        if prev is not None:
            assert (layers <= prev).all()
        prev = layers


def test_fixed_layers_length_and_consistency(trained_like):
    store, ds = trained_like
    vals = I.eval_fixed_layers(store, ds)
    assert len(vals) == 4
    assert vals[-1] == I.sweep(store, ds, [0])[0].metric


def test_infer_adaptive_matches_per_layer_inspection(trained_like):
    store, ds = trained_like
    for j in range(12):
        x = ds.tokens[j:j + 1]
        outs = forward_all_exits(store, x)
        ents = [I.entropy(I._softmax64(o.data[0])) for o in outs]
        for s in (0.0, 0.5, float(np.median(ents)), 2.0):
            d = I.infer_adaptive(store, x, s)
            expect = next((i for i, h in enumerate(ents[:-1], start=1) if h < s), 4)
            assert d.exit_layer == expect
            assert d.prediction == int(outs[d.exit_layer - 1].data[0].argmax())
            assert d.entropy_at_exit == pytest.approx(ents[d.exit_layer - 1])
            if d.exit_layer < 4:
                assert d.entropy_at_exit < s
            assert all(h >= s for h in ents[: d.exit_layer - 1])


def test_infer_adaptive_extremes(trained_like):
    store, ds = trained_like
    assert I.infer_adaptive(store, ds.tokens[0], 0.0).exit_layer == 4
    assert I.infer_adaptive(store, ds.tokens[0], math.log(3) + 0.01).exit_layer == 1
    with pytest.raises(ContractError):
        I.infer_adaptive(store, ds.tokens[0], -1.0)


def test_histogram_extremes(trained_like):
    store, ds = trained_like
    assert I.exit_histogram(store, ds, 0.0) == [0, 0, 0, 60]
    assert I.exit_histogram(store, ds, 10.0) == [60, 0, 0, 0]
    assert sum(I.exit_histogram(store, ds, 0.37)) == 60


def test_threaded_evaluation_matches(trained_like, monkeypatch):
    store, ds = trained_like
    single = I.all_exit_logits(store, ds.tokens, batch_size=16)
    monkeypatch.setenv("MEXT_THREADS", "3")
    multi = I.all_exit_logits(store, ds.tokens, batch_size=16)
    assert np.array_equal(single, multi)


def test_sweep_csv_schema():
    recs = [I.SweepRecord(0.0, 0.9, 100.0, [0, 0, 3]), I.SweepRecord(0.5, 0.8, 50.0, [2, 0, 1])]
    lines = I.sweep_csv(recs, 3).splitlines()
    assert lines[0] == "threshold,metric,expected_time_pct,count_layer_1,count_layer_2,count_layer_3"
    assert lines[1] == "0.0,0.900000,100.000000,0,0,3"
    assert len(lines) == 3


def test_histogram_json():
    doc = json.loads(I.histogram_json([1, 0, 3], 0.2))
    assert doc["counts"] == [1, 0, 3] and doc["n"] == 4 and doc["k"] == 3
