import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ttbd import repair as rp
from ttbd.data import LabeledDataset, badnets_trigger
from ttbd.nn import (
    IDENTITY, Dense, Flatten, Model, NeuronId, PruneMask, ReLU, batch_activations, forward, mlp, predict,
    reference_cnn,
)
from ttbd.shapley import ShapleyReport


def report(players, values, abs_values=None):
    values = np.asarray(values, dtype=float)
    abs_values = np.abs(values) if abs_values is None else np.asarray(abs_values, dtype=float)
    return ShapleyReport(list(players), values, abs_values, 1, 0.0, np.ones(len(values), dtype=int))


def players(n):
    return [NeuronId(1, i) for i in range(n)]


def tiny_test_set(n=60, seed=0):
    rng = np.random.default_rng(seed)
    return LabeledDataset(rng.random((n, 1, 28, 28)).astype(np.float32), rng.integers(0, 10, n))


# ---------------------------------------------------------------- selection

def test_full_k_and_m_take_everything_in_asr_order():
    p = players(6)
    asr = report(p, [0.1, 0.5, -0.2, 0.5, 0.0, 0.3])
    acc = report(p, np.zeros(6))
    plan = rp.select_prune_set(asr, acc, k=6, m=6)
    # Ties on ASR value fall back to NeuronId order.
    assert plan.prune_set == [p[1], p[3], p[5], p[0], p[4], p[2]]


def test_top_asr_unit_in_critical_tier_is_excluded():
    p = players(5)
    asr = report(p, [0.9, 0.5, 0.4, 0.0, 0.0])
    acc = report(p, [0, 0, 0, 0, 0], abs_values=[0.8, 0.1, 0.2, 0.0, 0.05])
    plan = rp.select_prune_set(asr, acc, k=3, m=4)
    assert p[0] not in plan.prune_set
    assert plan.prune_set == [p[1], p[2]]


def test_disjoint_sets_raise():
    p = players(4)
    asr = report(p, [1.0, 0.9, 0.0, 0.0])
    acc = report(p, np.zeros(4), abs_values=[1.0, 1.0, 0.0, 0.0])
    with pytest.raises(rp.RepairError, match="increase m"):
        rp.select_prune_set(asr, acc, k=2, m=2)


def test_selection_validates_inputs():
    p = players(3)
    with pytest.raises(rp.RepairError):
        rp.select_prune_set(report(p, [1, 2, 3]), report(players(4), [1, 2, 3, 4]), 1, 1)
    with pytest.raises(rp.RepairError):
        rp.select_prune_set(report(p, [1, 2, 3]), report(p, [1, 2, 3]), 0, 1)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 30), st.data())
def test_prune_set_within_intersection(n, data):
    p = players(n)
    vals = data.draw(st.lists(st.floats(-1, 1), min_size=n, max_size=n))
    absv = data.draw(st.lists(st.floats(0, 1), min_size=n, max_size=n))
    k = data.draw(st.integers(1, n))
    m = data.draw(st.integers(1, n))
    asr, acc = report(p, vals), report(p, np.zeros(n), absv)
    top = set(np.lexsort((np.arange(n), -np.array(vals)))[:k])
    bottom = set(np.lexsort((np.arange(n), np.array(absv)))[:m])
    inter = [p[i] for i in top & bottom]
    if not inter:
        with pytest.raises(rp.RepairError):
            rp.select_prune_set(asr, acc, k, m)
        return
    plan = rp.select_prune_set(asr, acc, k, m)
    assert set(plan.prune_set) == set(inter)
    chosen = [vals[p.index(x)] for x in plan.prune_set]
    assert chosen == sorted(chosen, reverse=True)


# ---------------------------------------------------------------- greedy repair

def test_target_one_prunes_nothing():
    model = reference_cnn(seed=1)
    x = tiny_test_set(20).images
    plan = rp.RepairPlan(3, 3, model.neurons()[:3], rp.StopRule(asr_value_target=1.0, max_prune=10))
    res = rp.repair(model, plan, x, [0, 1, 2])
    assert res.mask == IDENTITY


def test_dummy_units_run_to_max_prune():
    # Units of a dense layer whose outgoing weights are zero cannot change any prediction.
    model = mlp(6, 8, 3, seed=2)
    model.layers[-1].weight[:, :5] = 0
    dummies = [NeuronId(1, i) for i in range(5)]
    x = np.random.default_rng(0).random((15, 1, 1, 6)).astype(np.float32)
    plan = rp.RepairPlan(5, 5, dummies, rp.StopRule(0.1, max_prune=4))
    res = rp.repair(model, plan, x, [0, 3, 7])
    assert len(res.mask) == 4 and res.trace == [1.0] * 5
    np.testing.assert_array_equal(predict(model, x, res.mask), predict(model, x))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 1000), st.integers(1, 8))
def test_mask_grows_monotonically_inside_plan(seed, max_prune):
    model = mlp(6, 12, 4, seed=seed)
    x = np.random.default_rng(seed).random((20, 1, 1, 6)).astype(np.float32)
    order = np.random.default_rng(seed + 1).permutation(12)
    plan_units = [NeuronId(1, int(i)) for i in order[:9]]
    plan = rp.RepairPlan(9, 12, plan_units, rp.StopRule(0.0, max_prune))
    res = rp.repair(model, plan, x, list(range(10)))
    assert res.mask.pruned <= set(plan_units)
    # The mask is always a prefix of the plan.
    assert res.mask.pruned == set(plan_units[:len(res.mask)])
    assert len(res.mask) <= max_prune


def test_clearing_mask_restores_predictions():
    model = reference_cnn(seed=3)
    x = tiny_test_set(30).images
    before = forward(model, x).copy()
    plan = rp.RepairPlan(5, 5, model.neurons()[10:15], rp.StopRule(0.0, 5))
    res = rp.repair(model, plan, x, [1, 2])
    assert len(res.mask) == 5
    np.testing.assert_array_equal(forward(model, x, IDENTITY), before)


# ---------------------------------------------------------------- evaluation

def test_all_pruned_reduces_to_head_bias():
    model = reference_cnn(seed=4)
    model.layers[-1].bias[:] = np.arange(10, dtype=np.float32) * 0.01
    test = tiny_test_set(200, seed=1)
    ev = rp.evaluate(model, PruneMask(model.neurons()), test, badnets_trigger((1, 28, 28)))
    assert ev.acc == pytest.approx(100 * np.mean(test.labels == 9))
    assert ev.fraction_pruned == 1.0 and ev.neurons_pruned == 176


def test_evaluation_invariant_to_logit_scale():
    model = reference_cnn(seed=5)
    test = tiny_test_set(80, seed=2)
    spec = badnets_trigger((1, 28, 28))
    mask = PruneMask(model.neurons()[:7])
    a = rp.evaluate(model, mask, test, spec)
    scaled = model.copy()
    scaled.layers[-1].weight *= 3.0
    scaled.layers[-1].bias *= 3.0
    assert rp.evaluate(scaled, mask, test, spec) == a


def test_asr_counts_only_non_target_images():
    model = reference_cnn(seed=6)
    model.layers[-1].weight[:] = 0
    model.layers[-1].bias[:] = 0
    model.layers[-1].bias[0] = 1  # always predicts the target
    test = tiny_test_set(50, seed=3)
    ev = rp.evaluate(model, IDENTITY, test, badnets_trigger((1, 28, 28), target_label=0))
    assert ev.asr == 100.0
    assert ev.acc == pytest.approx(100 * np.mean(test.labels == 0))


# ---------------------------------------------------------------- ablations and files

def test_random_detection_is_seeded():
    a = rp.random_detected(100, 6, seed=3)
    np.testing.assert_array_equal(a, rp.random_detected(100, 6, seed=3))
    assert len(set(a.tolist())) == 6
    assert not np.array_equal(a, rp.random_detected(100, 6, seed=4))


def test_activation_plan_orders_by_mean_activation():
    model = mlp(4, 6, 3, seed=7)
    x = np.random.default_rng(4).random((10, 1, 1, 4)).astype(np.float32)
    plan = rp.activation_plan(model, x, [2, 5], k=4)
    mean = batch_activations(model, x[[2, 5]]).mean(axis=0)
    got = [mean[model.neurons().index(n)] for n in plan.prune_set]
    assert got == sorted(got, reverse=True) and len(got) == 4


def test_mask_file_round_trip(tmp_path):
    mask = PruneMask([NeuronId(3, 31), NeuronId(0, 2), NeuronId(7, 100)])
    path = tmp_path / "mask.txt"
    rp.save_mask(mask, path, {"config_hash": "abc", "seed": 0})
    back, prov = rp.load_mask(path)
    assert back == mask
    assert prov == {"config_hash": "abc", "seed": "0"}
    with pytest.raises(rp.RepairError):
        rp.mask_from_text("0\t1\n")


# ---------------------------------------------------------------- margin

def _flip_model():
    # Dense units 0..3 each carry the class-1 evidence alone; pruning any one flips nothing,
    # pruning unit 0 flips every sample (its weight dominates).
    w1 = np.eye(4, dtype=np.float32)
    b1 = np.zeros(4, dtype=np.float32)
    w2 = np.array([[0, 0, 0, 0], [5, 0.1, 0.1, 0.1]], dtype=np.float32)
    b2 = np.array([1.0, 0.0], dtype=np.float32)
    return Model([Flatten(), Dense(w1, b1), ReLU(), Dense(w2, b2)], (1, 1, 4), 2)


def test_margin_prunes_extra_units_after_target():
    model = _flip_model()
    x = np.ones((4, 1, 1, 4), dtype=np.float32)
    units = [NeuronId(1, i) for i in range(4)]
    base = rp.repair(model, rp.RepairPlan(4, 4, units, rp.StopRule(0.0, 4)), x, [0, 1])
    assert len(base.mask) == 1 and base.trace == [1.0, 0.0]
    more = rp.repair(model, rp.RepairPlan(4, 4, units, rp.StopRule(0.0, 4, margin=2)), x, [0, 1])
    assert more.mask.pruned == set(units[:3])
    capped = rp.repair(model, rp.RepairPlan(4, 4, units, rp.StopRule(0.0, 2, margin=5)), x, [0, 1])
    assert len(capped.mask) == 2


def test_margin_ignored_when_target_already_met():
    model = _flip_model()
    x = np.ones((3, 1, 1, 4), dtype=np.float32)
    plan = rp.RepairPlan(4, 4, [NeuronId(1, i) for i in range(4)], rp.StopRule(1.0, 4, margin=3))
    assert rp.repair(model, plan, x, [0]).mask == IDENTITY


def test_stop_rule_validation():
    with pytest.raises(ValueError):
        rp.StopRule(0.1, 17, margin=-1)
