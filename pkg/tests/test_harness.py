import numpy as np
import pytest

from hnca.errors import ConfigError, DataFormatError
from hnca.fhnca import init_vae
from hnca.harness import (
    AdamState,
    Dataset,
    RunMetrics,
    adam_step,
    bandit_train_arrays,
    dynamic_binarize,
    load_idx,
    multisample_bound,
    read_idx,
    run_bench,
    synthetic_dataset,
    vae_train_arrays,
    write_idx,
)
from hnca.netcore import Encoding, StochasticNet, init_net

from conftest import rand_vae


# --- IDX ------------------------------------------------------------------


def test_idx_single_zero_image_roundtrip(tmp_path):
    img = np.zeros((1, 28, 28), dtype=np.uint8)
    write_idx(tmp_path / "img.idx", img)
    back = read_idx(tmp_path / "img.idx")
    assert back.shape == (1, 28, 28)
    assert back.sum() == 0
    # 784 zero pixels
    assert back.size == 784


def test_idx_roundtrip_bit_exact(tmp_path, rng):
    imgs = rng.integers(0, 256, size=(7, 28, 28)).astype(np.uint8)
    labels = rng.integers(0, 10, size=7).astype(np.uint8)
    write_idx(tmp_path / "i.idx", imgs)
    write_idx(tmp_path / "l.idx", labels)
    assert np.array_equal(read_idx(tmp_path / "i.idx"), imgs)
    assert np.array_equal(read_idx(tmp_path / "l.idx"), labels)
    # re-serialization reproduces the file byte for byte
    write_idx(tmp_path / "i2.idx", read_idx(tmp_path / "i.idx"))
    assert (tmp_path / "i2.idx").read_bytes() == (tmp_path / "i.idx").read_bytes()


def test_idx_bad_magic_names_offset(tmp_path):
    (tmp_path / "bad.idx").write_bytes(b"\x00\x00\x09\x99" + b"\x00" * 16)
    with pytest.raises(DataFormatError, match="offset 0"):
        read_idx(tmp_path / "bad.idx")


def test_idx_truncated_payload_reports_expected_length(tmp_path):
    img = np.zeros((2, 28, 28), dtype=np.uint8)
    write_idx(tmp_path / "t.idx", img)
    blob = (tmp_path / "t.idx").read_bytes()
    (tmp_path / "t.idx").write_bytes(blob[:-100])
    with pytest.raises(DataFormatError, match="expected 1568"):
        read_idx(tmp_path / "t.idx")


def test_dataset_count_mismatch(tmp_path):
    write_idx(tmp_path / "i.idx", np.zeros((3, 28, 28), dtype=np.uint8))
    write_idx(tmp_path / "l.idx", np.zeros(2, dtype=np.uint8))
    with pytest.raises(DataFormatError):
        load_idx(tmp_path / "i.idx", tmp_path / "l.idx", "train")


def test_dataset_label_range():
    with pytest.raises(DataFormatError, match="< 10"):
        Dataset(np.zeros((1, 28, 28), dtype=np.uint8), np.array([11], dtype=np.uint8), "train")


# --- binarization -----------------------------------------------------------


def test_binarize_endpoints():
    imgs = np.zeros((4, 2, 2), dtype=np.uint8)
    imgs[2:] = 255
    out = dynamic_binarize(imgs, epoch=0, seed=0)
    assert np.all(out[:2] == 0.0)
    assert np.all(out[2:] == 1.0)


def test_binarize_frequency_half_intensity():
    n = 100_000
    imgs = np.full((n, 1, 1), 128, dtype=np.uint8)
    out = dynamic_binarize(imgs, epoch=3, seed=9)
    p = 128.0 / 255.0
    se = np.sqrt(p * (1 - p) / n)
    assert abs(out.mean() - p) <= 4 * se


def test_binarize_deterministic_per_epoch():
    imgs = np.full((5, 3, 3), 77, dtype=np.uint8)
    a = dynamic_binarize(imgs, epoch=2, seed=4)
    b = dynamic_binarize(imgs, epoch=2, seed=4)
    c = dynamic_binarize(imgs, epoch=3, seed=4)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


# --- Adam ---------------------------------------------------------------------


def test_adam_zero_gradient_keeps_parameters():
    p = np.ones((2, 2))
    state = AdamState.for_params([p])
    for _ in range(5):
        adam_step([p], [np.zeros_like(p)], state, lr=0.1)
    assert np.array_equal(p, np.ones((2, 2)))


def test_adam_first_step_closed_form():
    # first bias-corrected step is lr * g / (|g| + eps), an ascent step
    p = np.zeros(3)
    g = np.array([0.2, -0.2, 5.0])
    state = AdamState.for_params([p])
    adam_step([p], [g], state, lr=1e-3)
    want = 1e-3 * g / (np.abs(g) + state.eps)
    assert np.allclose(p, want, rtol=1e-6)
    # odd symmetry in the gradient sign
    q = np.zeros(3)
    state2 = AdamState.for_params([q])
    adam_step([q], [-g], state2, lr=1e-3)
    assert np.allclose(q, -p, atol=1e-15)


def test_adam_shape_mismatch():
    p = np.zeros(3)
    state = AdamState.for_params([p])
    with pytest.raises(ConfigError):
        adam_step([p], [np.zeros(4)], state, lr=0.1)


# --- metrics ------------------------------------------------------------------


def test_metrics_csv_header_and_rows():
    m = RunMetrics()
    m.log(1, 0, 0.5, 0.25, -3.5, 12.25)
    text = m.to_csv()
    lines = text.strip().split("\n")
    assert lines[0] == "step,epoch,train_metric,test_metric,ln_grad_var,wall_ms"
    assert lines[1].startswith("1,0,0.5,0.25,-3.5,")
    assert m.column("train_metric")[0] == 0.5


# --- training loops -------------------------------------------------------------


@pytest.fixture(scope="module")
def small_data():
    imgs, labels = synthetic_dataset(400, seed=21)
    timgs, tlabels = synthetic_dataset(120, seed=22)
    return imgs, labels, timgs, tlabels


def test_zero_learning_rate_keeps_parameters_and_chance_accuracy(small_data, rng):
    imgs, labels, timgs, tlabels = small_data
    net = init_net(784, [16], 10, Encoding.PLUS_MINUS_ONE, rng)
    before = [a.copy() for a in net.param_arrays()]
    metrics = bandit_train_arrays(
        net, imgs, labels, timgs, tlabels, estimator="hnca",
        learning_rate=0.0, batch_size=50, epochs=1, seed=1, log_every=4,
    )
    for a, b in zip(net.param_arrays(), before):
        assert np.array_equal(a, b)
    acc = metrics.column("test_metric")
    assert np.all((acc > 0.0) & (acc < 0.25))  # 10-class chance with slack


def test_bandit_requires_head(small_data, rng):
    imgs, labels, timgs, tlabels = small_data
    headless = StochasticNet([init_net(784, [8], 10, Encoding.ZERO_ONE, rng).hidden[0]])
    with pytest.raises(ConfigError, match="head"):
        bandit_train_arrays(headless, imgs, labels, timgs, tlabels, estimator="hnca",
                            learning_rate=1e-4, batch_size=50, epochs=1, seed=0)


def test_bandit_rejects_unknown_estimator(small_data, rng):
    imgs, labels, timgs, tlabels = small_data
    net = init_net(784, [8], 10, Encoding.PLUS_MINUS_ONE, rng)
    with pytest.raises(ConfigError, match="disarm"):
        bandit_train_arrays(net, imgs, labels, timgs, tlabels, estimator="disarm",
                            learning_rate=1e-4, batch_size=50, epochs=1, seed=0)


def test_bandit_reward_is_binary_and_metrics_complete(small_data, rng):
    imgs, labels, timgs, tlabels = small_data
    net = init_net(784, [12], 10, Encoding.PLUS_MINUS_ONE, rng)
    metrics = bandit_train_arrays(
        net, imgs, labels, timgs, tlabels, estimator="reinforce-b",
        learning_rate=1e-4, batch_size=50, epochs=2, seed=3, log_every=3,
    )
    steps = metrics.column("step")
    assert np.all(np.diff(steps) > 0)  # monotone step counter
    train = metrics.column("train_metric")
    assert np.all((train >= 0.0) & (train <= 1.0))  # mean of {0,1} rewards
    assert np.all(np.isfinite(metrics.column("ln_grad_var")))


def test_vae_loop_all_estimators_run(small_data):
    imgs = small_data[0][:100]
    timgs = small_data[2][:40]
    for est in ("fhnca", "fhnca-b", "fhnca-noprune", "fhnca-fullreward",
                "reinforce", "reinforce-b", "rloo", "rloo-is"):
        rng = np.random.default_rng(5)
        model = init_vae(784, [6, 4], rng)
        metrics = vae_train_arrays(
            model, imgs, timgs, estimator=est, learning_rate=1e-3,
            batch_size=25, epochs=1, seed=2, log_every=2,
        )
        assert np.all(np.isfinite(metrics.column("train_metric"))), est
        assert len(metrics.rows) >= 1


def test_vae_fhnca_b_rejected_single_layer(small_data):
    imgs = small_data[0][:60]
    model = init_vae(784, [5], np.random.default_rng(0))
    with pytest.raises(ConfigError, match="mediated"):
        vae_train_arrays(model, imgs, imgs, estimator="fhnca-b",
                         learning_rate=1e-3, batch_size=20, epochs=1, seed=0)


def test_decoder_ascent_improves_reconstruction(rng):
    # frozen uniform encoder; decoder-only ascent must increase the
    # reconstruction term over 100 batches
    imgs, _ = synthetic_dataset(200, seed=31)
    model = init_vae(784, [6], rng)
    for layer in model.encoder.hidden:
        layer.weights[...] = 0.0
        layer.bias[...] = 0.0
    from hnca import batched
    from hnca.harness import AdamState, adam_step, dynamic_binarize

    dec_params = []
    for lvl in model.decoder:
        dec_params += [lvl.weights, lvl.bias]
    adam = AdamState.for_params(dec_params)
    recon_first = recon_last = None
    for step in range(100):
        X = dynamic_binarize(imgs[:50], epoch=step, seed=7)
        U = rng.random((50, 6))
        bt = batched.forward_batch(model.encoder, X, U)
        samples = [lt.sample for lt in bt.layers]
        logits = [lt.logits for lt in bt.layers]
        vals = batched.evaluate_components_batch(model, X, samples, logits)
        recon = float(vals.recon[0].sum(axis=1).mean())
        if step == 0:
            recon_first = recon
        recon_last = recon
        grads = []
        for r, lvl in enumerate(model.decoder):
            obs = X if r == 0 else samples[r - 1]
            from hnca.netcore import sigmoid

            delta = obs - sigmoid(vals.dec_logits[r])
            grads += [delta.T @ samples[r] / 50.0, delta.sum(axis=0) / 50.0]
        adam_step(dec_params, grads, adam, lr=0.05)
    assert recon_last > recon_first + 10.0  # strict, clearly above noise


def test_determinism_same_config_same_csv(small_data, rng):
    imgs, labels, timgs, tlabels = small_data

    def run():
        net = init_net(784, [10], 10, Encoding.PLUS_MINUS_ONE, np.random.default_rng(42))
        m = bandit_train_arrays(
            net, imgs, labels, timgs, tlabels, estimator="hnca-b",
            learning_rate=1e-4, batch_size=50, epochs=1, seed=11, log_every=2,
        )
        return m

    a, b = run(), run()
    # every logged number except wall time is bit-for-bit identical
    for col in ("step", "epoch", "train_metric", "test_metric", "ln_grad_var"):
        assert np.array_equal(a.column(col), b.column(col)), col


def test_gradient_variance_metric_hand_computation(rng):
    # three examples, tiny net: the logged metric must equal the mean over
    # parameters of the per-parameter variance over examples, done by hand
    from hnca import batched

    toy_net = init_net(2, [2], 2, Encoding.ZERO_ONE, rng)
    X = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    U = rng.random((3, batched.uniforms_needed(toy_net)))
    bt = batched.forward_batch(toy_net, X, U)
    rewards = np.array([1.0, 0.0, 1.0])
    coefs, head_coef = batched.bandit_coefs(toy_net, bt, rewards, "reinforce")
    inputs = [lt.inputs for lt in bt.layers]
    got = batched.mean_gradient_variance(coefs, inputs, head_coef, bt.head_inputs)

    per_example = []
    for i in range(3):
        grads = []
        for c, x in zip(coefs + [head_coef], inputs + [bt.head_inputs]):
            for j in range(c.shape[1]):
                for k in range(x.shape[1]):
                    grads.append(c[i, j] * x[i, k])
            grads.extend(c[i])
        per_example.append(grads)
    per_example = np.array(per_example)
    n = 3
    hand = np.mean(
        [per_example[:, p].var(ddof=1) for p in range(per_example.shape[1])]
    )
    assert got == pytest.approx(hand, rel=1e-12)


# --- multisample bound -------------------------------------------------------------


def test_multisample_k1_is_single_sample_integrand(rng):
    model = rand_vae(rng, 4, [3, 2])
    x = np.array([1.0, 0.0, 1.0, 1.0])
    stream = np.random.default_rng(3)
    got = multisample_bound(model, x, 1, stream)
    # recompute log p - log q for the same draw
    from hnca.fhnca import build_elbo_components
    from hnca.netcore import forward_sample

    replay = np.random.default_rng(3)
    trace = forward_sample(model.encoder, x, replay)
    vals = build_elbo_components(model, x).evaluate(trace)
    log_p = vals.prior.sum() + sum(v.sum() for v in vals.recon)
    log_q = sum(
        np.log(np.where(lt.high == 1.0, lt.probs, 1.0 - lt.probs)).sum()
        for lt in trace.layers
    )
    assert got == pytest.approx(log_p - log_q, abs=1e-12)


@pytest.mark.parametrize("k", [1, 10, 100])
def test_multisample_uniform_model_closed_form(rng, k):
    # deterministic (clamped) encoder proposes with probability one, so each
    # importance weight is the uniform joint: -(visible + latents) log 2
    model = rand_vae(rng, 6, [3, 2])
    for lvl in model.decoder:
        lvl.weights[...] = 0.0
        lvl.bias[...] = 0.0
    model.prior_logits[...] = 0.0
    x = (rng.random(6) < 0.5).astype(np.float64)
    got = multisample_bound(
        model, x, k, np.random.default_rng(1), prob_override={0: 1.0, 1: 1.0}
    )
    assert got == pytest.approx(-(6 + 5) * np.log(2.0), abs=1e-9)


def test_multisample_bound_tightens_with_k(rng):
    model = rand_vae(rng, 5, [3])
    x = (rng.random(5) < 0.5).astype(np.float64)
    reps = 400
    means = {}
    stream = np.random.default_rng(8)
    for k in (1, 10, 100):
        vals = np.array([multisample_bound(model, x, k, stream) for _ in range(reps)])
        means[k] = (vals.mean(), vals.std(ddof=1) / np.sqrt(reps))
    assert means[10][0] >= means[1][0] - 2 * (means[1][1] + means[10][1])
    assert means[100][0] >= means[10][0] - 2 * (means[10][1] + means[100][1])


# --- bench -----------------------------------------------------------------------


def test_bench_reports_structure():
    report = run_bench(depth=2, widths=(20, 40), reps=20, seed=0)
    assert [r["width"] for r in report["rows"]] == [20, 40]
    for row in report["rows"]:
        assert row["forward_us"] > 0 and row["backward_us"] > 0
        assert row["edges"] == 784 * row["width"] + row["width"] ** 2 + 10 * row["width"]


def test_synthetic_dataset_deterministic():
    a_imgs, a_labels = synthetic_dataset(50, seed=5)
    b_imgs, b_labels = synthetic_dataset(50, seed=5)
    assert np.array_equal(a_imgs, b_imgs)
    assert np.array_equal(a_labels, b_labels)
    assert a_imgs.dtype == np.uint8 and a_imgs.shape == (50, 28, 28)
    assert a_labels.max() < 10
