import numpy as np
import pytest

from hnca.errors import ConfigError, DataFormatError, NumericError
from hnca.netcore import (
    BernoulliLayer,
    Encoding,
    SoftmaxLayer,
    StochasticNet,
    counterfactual_logits,
    counterfactual_sample_probs,
    example_stream,
    forward_sample,
    load_net,
    pinned_log_prob_sums,
    save_net,
    sigmoid,
)

from conftest import binary_context, rand_layer, rand_net


def test_zero_parameters_give_uniform_probs(rng):
    net = StochasticNet([BernoulliLayer(np.zeros((4, 3)), np.zeros(4))])
    trace = forward_sample(net, binary_context(rng, 3), rng)
    assert np.all(trace.layers[0].probs == 0.5)


def test_single_unit_logit_and_prob_high_precision(rng):
    mpmath = pytest.importorskip("mpmath")
    layer = BernoulliLayer(np.array([[1.0, -2.0]]), np.array([0.5]))
    net = StochasticNet([layer])
    trace = forward_sample(net, np.array([1.0, 0.0]), rng)
    assert trace.layers[0].logits[0] == 1.5
    reference = float(1 / (1 + mpmath.exp(mpmath.mpf("-1.5"))))
    assert abs(trace.layers[0].probs[0] - reference) < 1e-15


def test_clamped_unit_always_emits_high(rng):
    layer = rand_layer(rng, 3, 2, Encoding.PLUS_MINUS_ONE)
    net = StochasticNet([layer])
    for _ in range(200):
        trace = forward_sample(net, binary_context(rng, 2), rng, prob_override={0: 1.0})
        assert np.all(trace.layers[0].sample == 1.0)


def test_counterfactual_logits_zero_weight(rng):
    layer = rand_layer(rng, 3, 4)
    layer.weights[1, 2] = 0.0
    net = StochasticNet([layer])
    trace = forward_sample(net, binary_context(rng, 4), rng)
    L_hi, L_lo = counterfactual_logits(layer, trace.layers[0])
    assert L_hi[1, 2] == trace.layers[0].logits[1]
    assert L_lo[1, 2] == trace.layers[0].logits[1]


def test_counterfactual_logits_worked_example(rng):
    # theta = [1, -2], b = 0.5, x = [1, 0]: l = 1.5; pinning x0 low gives 0.5,
    # pinning x1 high gives -0.5 (recomputed from scratch below)
    layer = BernoulliLayer(np.array([[1.0, -2.0]]), np.array([0.5]))
    net = StochasticNet([layer])
    trace = forward_sample(net, np.array([1.0, 0.0]), rng)
    L_hi, L_lo = counterfactual_logits(layer, trace.layers[0])
    assert L_lo[0, 0] == pytest.approx(1.0 * 0.0 + (-2.0) * 0.0 + 0.5, abs=1e-15)
    assert L_hi[0, 1] == pytest.approx(1.0 * 1.0 + (-2.0) * 1.0 + 0.5, abs=1e-15)


def test_counterfactual_logits_pm1_realized_high_is_identity(rng):
    first = rand_layer(rng, 3, 2, Encoding.PLUS_MINUS_ONE)
    second = rand_layer(rng, 4, 3, Encoding.ZERO_ONE)
    net = StochasticNet([first, second])
    for _ in range(50):
        trace = forward_sample(net, binary_context(rng, 2), rng)
        lt = trace.layers[1]
        L_hi, _ = counterfactual_logits(second, lt)
        fixed = lt.inputs == 1.0
        assert np.array_equal(L_hi[:, fixed], np.broadcast_to(lt.logits[:, None], L_hi.shape)[:, fixed])


def test_counterfactual_probs_zero_weight_gives_realized(rng):
    layer = rand_layer(rng, 3, 4)
    layer.weights[:, 1] = 0.0
    net = StochasticNet([layer])
    trace = forward_sample(net, binary_context(rng, 4), rng)
    lt = trace.layers[0]
    P_hi, P_lo = counterfactual_sample_probs(layer, lt, *counterfactual_logits(layer, lt))
    realized = np.where(lt.high == 1.0, lt.probs, 1.0 - lt.probs)
    assert np.allclose(P_hi[:, 1], realized, atol=1e-15)
    assert np.allclose(P_lo[:, 1], realized, atol=1e-15)


def test_counterfactual_probs_saturate_towards_one(rng):
    # p = 0.5 unit that realized high; a parent weight pushing the pinned-high
    # logit towards +inf saturates the realized-sample probability to 1
    layer = BernoulliLayer(np.array([[60.0]]), np.array([0.0]))
    net = StochasticNet([layer])
    while True:
        trace = forward_sample(net, np.array([0.0]), rng)
        if trace.layers[0].high[0] == 1.0:
            break
    lt = trace.layers[0]
    assert lt.probs[0] == 0.5
    P_hi, _ = counterfactual_sample_probs(layer, lt, *counterfactual_logits(layer, lt))
    assert P_hi[0, 0] == pytest.approx(1.0, abs=1e-6)


@pytest.mark.parametrize("encoding", [Encoding.ZERO_ONE, Encoding.PLUS_MINUS_ONE])
@pytest.mark.parametrize("width", [2, 17, 128, 512])
def test_pin_and_recompute_identity(rng, encoding, width):
    first = rand_layer(rng, width, 8, encoding, scale=1.0 / np.sqrt(8))
    second = rand_layer(rng, 5, width, Encoding.ZERO_ONE, scale=1.0 / np.sqrt(width))
    net = StochasticNet([first, second])
    trace = forward_sample(net, binary_context(rng, 8), rng)
    lt = trace.layers[1]
    L_hi, L_lo = counterfactual_logits(second, lt)
    P_hi, P_lo = counterfactual_sample_probs(second, lt, L_hi, L_lo)
    for i in range(width):
        for pin, L, P in ((encoding.high, L_hi, P_hi), (encoding.low, L_lo, P_lo)):
            x = lt.inputs.copy()
            x[i] = pin
            from_scratch = second.weights @ x + second.bias
            assert np.abs(L[:, i] - from_scratch).max() < 1e-12
            probs = sigmoid(from_scratch)
            realized = np.where(lt.high == 1.0, probs, 1.0 - probs)
            realized = np.clip(realized, 1e-7, 1.0 - 1e-7)
            assert np.abs(P[:, i] - realized).max() < 1e-12


def test_forward_determinism(rng):
    net = rand_net(rng, 4, [5, 3], n_actions=3, encoding=Encoding.PLUS_MINUS_ONE)
    ctx = binary_context(rng, 4)
    t1 = forward_sample(net, ctx, example_stream(9, 2, 7))
    t2 = forward_sample(net, ctx, example_stream(9, 2, 7))
    for a, b in zip(t1.layers, t2.layers):
        assert np.array_equal(a.logits, b.logits)
        assert np.array_equal(a.sample, b.sample)
        assert np.array_equal(a.probs, b.probs)
    assert t1.head.action == t2.head.action


def test_distinct_streams_differ():
    base = example_stream(3, 1, 4, 0).random(16)
    assert not np.array_equal(base, example_stream(3, 1, 5, 0).random(16))
    assert not np.array_equal(base, example_stream(3, 2, 4, 0).random(16))
    assert not np.array_equal(base, example_stream(4, 1, 4, 0).random(16))
    assert not np.array_equal(base, example_stream(3, 1, 4, 1).random(16))


def test_sample_frequency_matches_probability(rng):
    layer = rand_layer(rng, 1, 3)
    net = StochasticNet([layer])
    ctx = binary_context(rng, 3)
    n = 100_000
    hits = 0
    stream = example_stream(0, 0, 0)
    p = None
    for _ in range(n):
        trace = forward_sample(net, ctx, stream)
        p = trace.layers[0].probs[0]
        hits += trace.layers[0].high[0]
    se = np.sqrt(p * (1.0 - p) / n)
    assert abs(hits / n - p) <= 4.0 * se


def test_head_uses_one_uniform_inverse_cdf(rng):
    net = rand_net(rng, 3, [4], n_actions=5)
    ctx = binary_context(rng, 3)
    stream = example_stream(2, 0, 0)
    trace = forward_sample(net, ctx, stream)
    # replay the stream: four layer draws then one head draw
    replay = example_stream(2, 0, 0)
    replay.random(4)
    u = replay.random()
    assert trace.head.action == min(
        int(np.searchsorted(np.cumsum(trace.head.probs), u, side="right")), 4
    )


def test_pinned_log_sums_match_full_precision_messages(rng):
    first = rand_layer(rng, 6, 4, Encoding.PLUS_MINUS_ONE)
    second = rand_layer(rng, 40, 6, Encoding.ZERO_ONE)
    net = StochasticNet([first, second])
    trace = forward_sample(net, binary_context(rng, 4), rng)
    lt = trace.layers[1]
    P_hi, P_lo = counterfactual_sample_probs(second, lt, *counterfactual_logits(second, lt))
    S_hi, S_lo = pinned_log_prob_sums(second, lt)
    assert np.allclose(S_hi, np.log(P_hi).sum(axis=0), rtol=1e-4, atol=1e-4)
    assert np.allclose(S_lo, np.log(P_lo).sum(axis=0), rtol=1e-4, atol=1e-4)


def test_serialization_roundtrip(tmp_path, rng):
    net = rand_net(rng, 4, [5, 3], n_actions=3, encoding=Encoding.PLUS_MINUS_ONE)
    path = tmp_path / "net.bin"
    save_net(net, path)
    loaded = load_net(path)
    for a, b in zip(net.param_arrays(), loaded.param_arrays()):
        assert np.array_equal(a, b)
    assert loaded.hidden[0].encoding is Encoding.PLUS_MINUS_ONE
    # re-serialize: byte identical
    save_net(loaded, tmp_path / "again.bin")
    assert (tmp_path / "again.bin").read_bytes() == path.read_bytes()


def test_serialization_truncation_detected(tmp_path, rng):
    net = rand_net(rng, 4, [5], n_actions=3)
    path = tmp_path / "net.bin"
    save_net(net, path)
    blob = path.read_bytes()
    path.write_bytes(blob[:-8])
    with pytest.raises(DataFormatError):
        load_net(path)
    path.write_bytes(blob + b"\x00" * 8)
    with pytest.raises(DataFormatError):
        load_net(path)


def test_shape_validation():
    with pytest.raises(ConfigError):
        BernoulliLayer(np.zeros((2, 2)), np.zeros(3))
    with pytest.raises(ConfigError):
        BernoulliLayer(np.array([[np.inf, 0.0]]), np.zeros(1))
    with pytest.raises(ConfigError):
        SoftmaxLayer(np.zeros((1, 4)), np.zeros(1))  # one action is no choice
    with pytest.raises(ConfigError):
        StochasticNet([BernoulliLayer(np.zeros((3, 2)), np.zeros(3)),
                       BernoulliLayer(np.zeros((2, 4)), np.zeros(2))])


def test_context_dimension_mismatch(rng):
    net = rand_net(rng, 4, [3])
    with pytest.raises(ConfigError):
        forward_sample(net, np.zeros(5), rng)


def test_nonfinite_logit_reports_layer_and_unit(rng):
    huge = BernoulliLayer(np.full((2, 2), 1e308), np.zeros(2))
    net = StochasticNet([huge])
    with np.errstate(over="ignore"), pytest.raises(NumericError, match="layer 0"):
        forward_sample(net, np.array([1.0, 1.0]), rng)
