from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ttbd.nn import (
    BatchEvaluator,
    Conv2D,
    Dense,
    Flatten,
    MaxPool2D,
    Model,
    NeuronId,
    PruneMask,
    ReLU,
    ShapeError,
    TrainingError,
    TrainParams,
    apply_mask,
    argmax_labels,
    forward,
    forward_with_activations,
    mlp,
    predict,
    reference_cnn,
    train,
)
from ttbd.nn import checkpoint
from ttbd.nn.train import loss_and_grads


def rel_err(a, b):
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return np.linalg.norm(a - b) / denom


def numeric_grad(f, arr, eps=1e-6):
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + eps
        hi = f()
        arr[i] = old - eps
        lo = f()
        arr[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return g


def layer_cases():
    rng = np.random.default_rng(3)
    f64 = lambda *s: rng.standard_normal(s)
    return {
        "conv": (Conv2D(f64(3, 2, 3, 3), f64(3)), f64(2, 2, 6, 5)),
        "conv-stride2": (Conv2D(f64(2, 2, 3, 3), f64(2), stride=2), f64(2, 2, 7, 7)),
        "dense": (Dense(f64(4, 5), f64(4)), f64(3, 5)),
        "relu": (ReLU(), f64(2, 3, 4, 4)),
        "maxpool": (MaxPool2D(2, 2), f64(2, 2, 6, 6)),
        "maxpool-odd": (MaxPool2D(2, 2), f64(1, 2, 5, 5)),
        "maxpool-overlap": (MaxPool2D(3, 2), f64(1, 2, 7, 7)),
        "flatten": (Flatten(), f64(2, 2, 3, 3)),
    }


@pytest.mark.parametrize("name", list(layer_cases()))
def test_layer_gradients_match_finite_differences(name):
    layer, x = layer_cases()[name]
    rng = np.random.default_rng(11)
    out, _ = layer.forward(x)
    proj = rng.standard_normal(out.shape)

    def objective():
        return float(np.sum(layer.forward(x)[0] * proj))

    _, cache = layer.forward(x)
    dx, grads = layer.backward(proj, cache)
    assert rel_err(dx, numeric_grad(objective, x)) < 1e-3
    for key, p in layer.params().items():
        assert rel_err(grads[key], numeric_grad(objective, p)) < 1e-3, key


def test_full_model_loss_gradient():
    model = reference_cnn(num_classes=3, input_shape=(1, 12, 12), seed=2)
    for layer in model.layers:
        for k, p in layer.params().items():
            setattr(layer, k, p.astype(np.float64))
    rng = np.random.default_rng(0)
    x = rng.random((4, 1, 12, 12))
    y = np.array([0, 1, 2, 1])
    _, grads, _ = loss_and_grads(model, x, y)

    def loss():
        return loss_and_grads(model, x, y)[0]

    for i in (0, 3, 7, 9):
        for k, p in model.layers[i].params().items():
            assert rel_err(grads[i][k], numeric_grad(loss, p)) < 1e-3, (i, k)


def small_cnn(seed=0):
    return reference_cnn(num_classes=4, input_shape=(1, 12, 12), seed=seed)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 9))
def test_identity_mask_is_bit_exact(seed, n):
    model = small_cnn(seed)
    x = np.random.default_rng(seed).random((n, 1, 12, 12), dtype=np.float32)
    plain = forward(model, x)
    assert np.array_equal(forward(model, x, PruneMask()), plain)
    assert np.array_equal(forward(model, x, PruneMask.from_entries({NeuronId(0, 1): 1})), plain)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), a=st.sets(st.integers(0, 175), max_size=20),
       b=st.sets(st.integers(0, 175), max_size=20))
def test_mask_composition_is_entrywise_min(seed, a, b):
    model = small_cnn(seed)
    neurons = model.neurons()
    ma = PruneMask(neurons[i % len(neurons)] for i in a)
    mb = PruneMask(neurons[i % len(neurons)] for i in b)
    x = np.random.default_rng(seed).random((3, 1, 12, 12), dtype=np.float32)
    sequential = forward(apply_mask(apply_mask(model, ma), mb), x)
    combined = forward(model, x, ma.combine(mb))
    np.testing.assert_array_equal(sequential, combined)


def test_zero_multiplier_silences_unit():
    # x=3, w=2, b=1: the unit would emit 7; the head reads it with weight 1
    model = Model([Flatten(), Dense(np.array([[2.0]], np.float32), np.array([1.0], np.float32)),
                   Dense(np.array([[1.0]], np.float32), np.array([0.0], np.float32))], (1, 1, 1), 1)
    x = np.array([[[[3.0]]]], np.float32)
    assert forward(model, x)[0, 0] == 7.0
    assert forward(model, x, PruneMask([NeuronId(1, 0)]))[0, 0] == 0.0


def test_pruning_penultimate_layer_leaves_head_bias():
    w1 = np.array([[1.0, -1.0], [0.5, 2.0], [-1.0, 1.0]], np.float32)
    b1 = np.array([0.1, 0.2, 0.3], np.float32)
    w2 = np.array([[1.0, 2.0, 3.0], [-1.0, 0.0, 1.0]], np.float32)
    b2 = np.array([0.25, -0.75], np.float32)
    model = Model([Flatten(), Dense(w1, b1), ReLU(), Dense(w2, b2)], (1, 1, 2), 2)
    x = np.random.default_rng(0).standard_normal((5, 1, 1, 2)).astype(np.float32)
    # hidden units are zero, so each logit is exactly its head bias
    out = forward(model, x, PruneMask(NeuronId(1, u) for u in range(3)))
    np.testing.assert_array_equal(out, np.tile(b2, (5, 1)))


def test_mask_rejects_unknown_neurons():
    model = small_cnn()
    with pytest.raises(ValueError):
        forward(model, np.zeros((1, 1, 12, 12), np.float32), PruneMask([NeuronId(1, 0)]))
    with pytest.raises(ValueError):
        forward(model, np.zeros((1, 1, 12, 12), np.float32), PruneMask([NeuronId(0, 99)]))
    # classifier head is not prunable
    with pytest.raises(ValueError):
        forward(model, np.zeros((1, 1, 12, 12), np.float32), PruneMask([NeuronId(9, 0)]))


def test_shape_mismatch_names_layer():
    model = small_cnn()
    with pytest.raises(ShapeError, match="layer 0"):
        forward(model, np.zeros((2, 1, 10, 10), np.float32))
    with pytest.raises(ShapeError, match="layer 3"):
        Model([Flatten(), Dense(np.zeros((4, 9), np.float32), np.zeros(4, np.float32)), ReLU(),
               Dense(np.zeros((2, 5), np.float32), np.zeros(2, np.float32))], (1, 3, 3), 2)


def test_reference_cnn_has_176_prunable_neurons():
    model = reference_cnn()
    assert model.num_neurons == 176
    assert [model.layers[i].units for i in model.prunable_layers()] == [16, 32, 128]


def test_zero_image_gives_zero_activations():
    model = small_cnn()
    for layer in model.layers:
        if hasattr(layer, "bias"):
            layer.bias[:] = 0
    _, rec = forward_with_activations(model, np.zeros((1, 1, 12, 12), np.float32))
    assert np.all(rec.values == 0)
    assert rec.neurons == model.neurons()


def test_activation_record_is_deterministic_and_nonnegative():
    model = small_cnn(4)
    x = np.random.default_rng(1).random((1, 1, 12, 12), dtype=np.float32)
    l1, r1 = forward_with_activations(model, x)
    l2, r2 = forward_with_activations(model, x)
    np.testing.assert_array_equal(r1.values, r2.values)
    np.testing.assert_array_equal(l1, forward(model, x))
    assert np.all(r1.values >= 0)


def test_hand_built_conv_channel_activation():
    kernel = np.array([[1, 0], [0, -1]], np.float32)
    image = np.array([[1, 2, 3, 4], [5, 6, 7, 8], [9, 8, 7, 6], [5, 4, 3, 2]], np.float32)
    model = Model(
        [Conv2D(kernel[None, None], np.array([0.5], np.float32)), ReLU(), Flatten(),
         Dense(np.ones((2, 9), np.float32), np.zeros(2, np.float32))],
        (1, 4, 4), 2)
    # by hand: x[i,j] - x[i+1,j+1] + 0.5, then ReLU, then mean over the 3x3 map
    fmap = np.array([[1 - 6, 2 - 7, 3 - 8], [5 - 8, 6 - 7, 7 - 6], [9 - 4, 8 - 3, 7 - 2]], np.float32) + 0.5
    expected = np.maximum(fmap, 0).mean()
    _, rec = forward_with_activations(model, image[None, None])
    assert rec.as_dict()[NeuronId(0, 0)] == pytest.approx(expected, rel=1e-6)
    assert expected == pytest.approx(18 / 9)


def test_activation_record_tracks_mask():
    model = small_cnn(5)
    x = np.random.default_rng(2).random((1, 1, 12, 12), dtype=np.float32)
    _, rec = forward_with_activations(model, x, PruneMask([NeuronId(0, 3)]))
    assert rec.as_dict()[NeuronId(0, 3)] == 0


def test_predict_argmax_and_tie_break():
    assert argmax_labels(np.array([[0.1, 0.9, 0.3]])).tolist() == [1]
    assert argmax_labels(np.array([[0.5, 0.5]])).tolist() == [0]


def test_predict_batch_matches_per_sample():
    model = small_cnn(6)
    x = np.random.default_rng(3).random((20, 1, 12, 12), dtype=np.float32)
    batch = predict(model, x)
    singles = np.concatenate([predict(model, x[i:i + 1]) for i in range(20)])
    np.testing.assert_array_equal(batch, singles)


def test_forward_is_independent_of_worker_count():
    model = small_cnn(7)
    x = np.random.default_rng(4).random((700, 1, 12, 12), dtype=np.float32)
    mask = PruneMask([NeuronId(3, 2), NeuronId(7, 5)])
    np.testing.assert_array_equal(forward(model, x, mask, workers=1), forward(model, x, mask, workers=4))


def test_batch_evaluator_matches_forward():
    model = small_cnn(8)
    x = np.random.default_rng(5).random((300, 1, 12, 12), dtype=np.float32)
    ev = BatchEvaluator(model, x)
    np.testing.assert_array_equal(ev.logits(), forward(model, x))
    for mask in (PruneMask([NeuronId(7, 1)]), PruneMask([NeuronId(3, 0), NeuronId(7, 9)]),
                 PruneMask([NeuronId(0, 2)])):
        np.testing.assert_array_equal(ev.logits(mask), forward(model, x, mask))
    assert ev.agreement(PruneMask()) == 1.0


def separable_toy(n=200, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, 1, size=(n, 2))
    x = x[np.abs(x[:, 0] + x[:, 1]) > 0.1][:n]
    y = (x[:, 0] + x[:, 1] > 0).astype(np.int64)
    return x.astype(np.float32).reshape(-1, 1, 1, 2), y


def test_training_separates_toy_data():
    x, y = separable_toy()
    model = train(mlp(2, 8, 2, seed=1), x, y, TrainParams(lr=0.1, momentum=0.9, epochs=50, batch_size=16, seed=0))
    assert np.mean(predict(model, x) == y) >= 0.99


def test_zero_epochs_returns_initial_weights():
    x, y = separable_toy()
    init = mlp(2, 8, 2, seed=1)
    out = train(init, x, y, TrainParams(epochs=0))
    assert checkpoint.dumps(out) == checkpoint.dumps(init)


def test_training_is_deterministic():
    x, y = separable_toy()
    p = TrainParams(lr=0.1, epochs=3, batch_size=16, seed=42)
    a = train(mlp(2, 8, 2, seed=1), x, y, p)
    b = train(mlp(2, 8, 2, seed=1), x, y, p)
    assert checkpoint.dumps(a) == checkpoint.dumps(b)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")  # the divergent run overflows on purpose
def test_training_rejects_bad_labels_and_nonfinite_loss():
    x, y = separable_toy()
    with pytest.raises(ValueError):
        train(mlp(2, 8, 2), x, y + 5, TrainParams(epochs=1))
    with pytest.raises(TrainingError, match="non-finite"):
        train(mlp(2, 8, 2), x * np.float32(1e30), y, TrainParams(lr=1e10, epochs=2))


def test_checkpoint_round_trip_is_byte_exact(tmp_path):
    model = reference_cnn(seed=3)
    path = tmp_path / "m.ttbd"
    checkpoint.save(model, path)
    raw = path.read_bytes()
    assert raw[:4] == b"TTBD"
    back = checkpoint.load(path)
    assert checkpoint.dumps(back) == raw
    x = np.random.default_rng(0).random((3, 1, 28, 28), dtype=np.float32)
    np.testing.assert_array_equal(forward(back, x), forward(model, x))


def test_checkpoint_rejects_corruption():
    raw = checkpoint.dumps(small_cnn())
    with pytest.raises(checkpoint.CheckpointError, match="magic"):
        checkpoint.loads(b"XXXX" + raw[4:])
    with pytest.raises(checkpoint.CheckpointError, match="truncated"):
        checkpoint.loads(raw[:-7])
    with pytest.raises(checkpoint.CheckpointError, match="trailing"):
        checkpoint.loads(raw + b"\0")


def test_mask_walk_states_match_forward():
    model = small_cnn(9)
    x = np.random.default_rng(6).random((300, 1, 12, 12), dtype=np.float32)
    ev = BatchEvaluator(model, x)
    walk = ev.walk()
    order = [NeuronId(7, 4), NeuronId(0, 1), NeuronId(3, 5), NeuronId(7, 0), NeuronId(0, 7), NeuronId(3, 1)]
    for k in range(0, len(order), 2):
        walk.prune(order[k:k + 2])
        np.testing.assert_array_equal(walk.logits, forward(model, x, PruneMask(order[:k + 2])))
    # the evaluator's own cache is untouched by the walk
    np.testing.assert_array_equal(ev.logits(), forward(model, x))
