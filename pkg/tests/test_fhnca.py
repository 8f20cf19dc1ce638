import numpy as np
import pytest

from hnca.errors import ConfigError
from hnca.fhnca import (
    Connectivity,
    FhncaMode,
    RlooVariant,
    _assemble_mode,
    _backward_pieces,
    build_elbo_components,
    component_counterfactuals,
    connectivity,
    decoder_direct_grads,
    entropy_direct_grads,
    fhnca_backward,
    init_vae,
    load_vae,
    reinforce_loo,
    save_vae,
)
from hnca.netcore import LayerTrace, bernoulli_entropy, forward_sample, sigmoid
from hnca.estimators import BaselineState

from conftest import binary_context, rand_vae


def make_components(rng, vis=4, widths=(3, 3)):
    model = rand_vae(rng, vis, list(widths))
    x = binary_context(rng, vis)
    return model, x, build_elbo_components(model, x)


def test_component_insensitive_parent(rng):
    model, x, cs = make_components(rng)
    model.decoder[0].weights[2, 1] = 0.0
    trace = forward_sample(model.encoder, x, rng)
    comp = next(c for c in cs.components() if c.id == "recon0[2]")
    f, f_hi, f_lo = component_counterfactuals(comp, trace)
    # parent 1 of layer 0 cannot move this component
    assert f_hi[1] == pytest.approx(f, abs=1e-15)
    assert f_lo[1] == pytest.approx(f, abs=1e-15)


def test_linear_logprob_at_zero_logit(rng):
    model, x, cs = make_components(rng)
    model.decoder[0].weights[0, :] = 0.0
    model.decoder[0].bias[0] = 0.0
    x[0] = 1.0
    cs = build_elbo_components(model, x)
    trace = forward_sample(model.encoder, x, rng)
    comp = next(c for c in cs.components() if c.id == "recon0[0]")
    f, _, _ = component_counterfactuals(comp, trace)
    assert f == pytest.approx(np.log(0.5), abs=1e-15)


def test_entropy_at_zero_logit(rng):
    model, x, cs = make_components(rng)
    model.encoder.hidden[0].weights[1, :] = 0.0
    model.encoder.hidden[0].bias[1] = 0.0
    trace = forward_sample(model.encoder, x, rng)
    comp = next(c for c in cs.components() if c.id == "ent0[1]")
    f, _, _ = component_counterfactuals(comp, trace)
    assert f == pytest.approx(np.log(2.0), abs=1e-15)


def test_component_pin_and_recompute(rng):
    model, x, cs = make_components(rng, vis=5, widths=(4, 3))
    trace = forward_sample(model.encoder, x, rng)
    samples = [lt.sample for lt in trace.layers]
    for comp in cs.components():
        parents = comp.direct_parents()
        if not parents:
            continue
        f, f_hi, f_lo = component_counterfactuals(comp, trace)
        for slot, (layer, unit) in enumerate(parents):
            for pin, got in ((1.0, f_hi[slot]), (0.0, f_lo[slot])):
                forced = [s.copy() for s in samples]
                forced[layer][unit] = pin
                want = _component_value_from_scratch(model, x, trace, forced, comp)
                assert got == pytest.approx(want, abs=1e-12)


def _component_value_from_scratch(model, x, trace, samples, comp):
    if comp.term == "recon":
        lvl = model.decoder[comp.level]
        lam = lvl.weights[comp.unit] @ samples[comp.level] + lvl.bias[comp.unit]
        obs = x[comp.unit] if comp.level == 0 else samples[comp.level - 1][comp.unit]
        p = sigmoid(lam)
        return float(np.log(p if obs == 1.0 else 1.0 - p))
    if comp.term == "prior":
        p = sigmoid(model.prior_logits[comp.unit])
        obs = samples[-1][comp.unit]
        return float(np.log(p if obs == 1.0 else 1.0 - p))
    layer = model.encoder.hidden[comp.level]
    inputs = x if comp.level == 0 else samples[comp.level - 1]
    logit = layer.weights[comp.unit] @ inputs + layer.bias[comp.unit]
    return float(bernoulli_entropy(logit))


def test_classification_matches_taxonomy(rng):
    model, x, cs = make_components(rng, vis=4, widths=(2, 2, 2))
    got = cs.classify(layer=0)
    for cid, want in {
        "recon0[0]": Connectivity.DIRECT_ONLY,
        "ent1[0]": Connectivity.DIRECT_ONLY,
        "recon1[1]": Connectivity.DIRECT_AND_MEDIATED,
        "recon2[0]": Connectivity.MEDIATED_ONLY,
        "prior[1]": Connectivity.MEDIATED_ONLY,
        "ent2[1]": Connectivity.MEDIATED_ONLY,
        "ent0[0]": Connectivity.UPSTREAM,
    }.items():
        assert got[cid] is want, cid
    top = cs.classify(layer=2)
    assert top["prior[0]"] is Connectivity.DIRECT_ONLY
    assert top["recon2[1]"] is Connectivity.DIRECT_ONLY
    assert top["recon0[0]"] is Connectivity.UPSTREAM


def test_single_layer_has_no_mediated(rng):
    model, x, cs = make_components(rng, vis=4, widths=(3,))
    assert not cs.has_mediated()
    assert all(v is not Connectivity.MEDIATED_ONLY and v is not Connectivity.DIRECT_AND_MEDIATED
               for v in cs.classify(0).values())


def test_component_count_two_layer_mnist_shape(rng):
    # 784 visible, two latent layers of 200: Eq-7 term structure gives
    # 784 + 200 reconstruction, 200 prior, 200 + 200 entropy components
    model = init_vae(784, [200, 200], rng)
    cs = build_elbo_components(model, np.zeros(784))
    assert cs.component_count == 784 + 200 + 200 + 200 + 200
    assert cs.component_count == len(cs.components())


def test_clamped_encoder_uniform_decoder_closed_form(rng):
    model, x, cs = make_components(rng, vis=4, widths=(3, 2))
    for lvl in model.decoder:
        lvl.weights[...] = 0.0
        lvl.bias[...] = 0.0
    model.prior_logits[...] = 0.0
    trace = forward_sample(model.encoder, x, rng, prob_override={0: 1.0, 1: 1.0})
    vals = cs.evaluate(trace)
    entropies = sum(
        float(bernoulli_entropy(lt.logits).sum()) for lt in trace.layers
    )
    want = -(4 + 5) * np.log(2.0) + entropies
    assert vals.elbo() == pytest.approx(want, abs=1e-12)


def test_with_baseline_rejected_for_single_layer(rng):
    model, x, cs = make_components(rng, vis=4, widths=(3,))
    trace = forward_sample(model.encoder, x, rng)
    with pytest.raises(ConfigError, match="mediated"):
        fhnca_backward(model.encoder, trace, cs, FhncaMode.WITH_BASELINE)


def test_constant_mediated_component_cancels_with_converged_baseline(rng):
    # adding a constant to the mediated-only sum while shifting the baseline
    # by the same constant leaves every gradient unchanged
    model, x, cs = make_components(rng, vis=4, widths=(3, 3))
    trace = forward_sample(model.encoder, x, rng)
    delta = 0.731
    b0 = 0.2
    cs.baselines = [BaselineState(value=b0, initialized=True)]
    pieces = _backward_pieces(model.encoder, trace, cs)
    g1 = _assemble_mode(trace, cs, pieces, FhncaMode.WITH_BASELINE)
    pieces.G = pieces.G + delta
    cs.baselines = [BaselineState(value=b0 + delta, initialized=True)]
    g2 = _assemble_mode(trace, cs, pieces, FhncaMode.WITH_BASELINE)
    assert np.array_equal(g1.flat(), g2.flat())


def test_upstream_components_do_not_leak_without_full_reward(rng):
    model, x, cs = make_components(rng, vis=4, widths=(3, 3, 2))
    trace = forward_sample(model.encoder, x, rng)
    plain_before = fhnca_backward(model.encoder, trace, cs, FhncaMode.PLAIN)
    full_before = fhnca_backward(model.encoder, trace, cs, FhncaMode.FULL_REWARD)
    # recon level 0 is upstream of layers 1 and 2; shift it hard
    model.decoder[0].bias[...] -= 50.0
    cs2 = build_elbo_components(model, x)
    plain_after = fhnca_backward(model.encoder, trace, cs2, FhncaMode.PLAIN)
    full_after = fhnca_backward(model.encoder, trace, cs2, FhncaMode.FULL_REWARD)
    for l in (1, 2):
        assert np.allclose(plain_before.layers[l][0], plain_after.layers[l][0], atol=1e-12)
        assert np.allclose(plain_before.layers[l][1], plain_after.layers[l][1], atol=1e-12)
    # layer 0 sees it directly, so its gradient must move
    assert not np.allclose(plain_before.layers[0][1], plain_after.layers[0][1])
    # full-reward credits upstream components through the child ratio
    assert not np.allclose(full_before.layers[1][1], full_after.layers[1][1])


def test_rloo_zero_gradient_when_objective_insensitive(rng):
    model, x, _ = make_components(rng, vis=4, widths=(3, 3))
    for lvl in model.decoder:
        lvl.weights[...] = 0.0
        lvl.bias[...] = 0.0  # log-likelihoods constant in their observations
    model.prior_logits[...] = 0.0
    for layer in model.encoder.hidden:
        layer.weights[...] = 0.0  # constant entropies too
    for variant in RlooVariant:
        grad = reinforce_loo(model, x, variant, np.random.default_rng(3))
        assert np.allclose(grad.flat(), 0.0, atol=1e-12)


@pytest.mark.parametrize(
    "widths,partial,independent",
    [((3,), 2, 2), ((3, 3, 3), 9, 6)],
)
def test_rloo_layer_sample_counts(rng, widths, partial, independent):
    # partial resampling regenerates everything below each redraw: quadratic
    # in depth; the independent variant always runs exactly two passes
    model, x, _ = make_components(rng, vis=4, widths=widths)
    counter = {}
    reinforce_loo(model, x, RlooVariant.PARTIAL_RESAMPLE, rng, counter=counter)
    assert counter["layer_samples"] == partial
    counter = {}
    reinforce_loo(model, x, RlooVariant.INDEPENDENT_SAMPLE, rng, counter=counter)
    assert counter["layer_samples"] == independent


def test_vae_serialization_roundtrip(tmp_path, rng):
    model = rand_vae(rng, 5, [4, 3])
    path = tmp_path / "vae.bin"
    save_vae(model, path)
    loaded = load_vae(path)
    for a, b in zip(model.param_arrays(), loaded.param_arrays()):
        assert np.array_equal(a, b)


def test_decoder_direct_grads_are_exact_in_expectation(rng):
    from hnca.oracle import vae_exact, _all_configs, _layer_slices

    model, x, cs = make_components(rng, vis=4, widths=(2, 2))
    _, _, dec_exact = vae_exact(model, x)
    widths = model.encoder.widths
    bits = _all_configs(sum(widths))
    slices = _layer_slices(widths)
    acc = None
    total_p = 0.0
    for row in bits:
        samples, logits, weight = [], [], 1.0
        inputs = x
        for k, layer in enumerate(model.encoder.hidden):
            logit = layer.weights @ inputs + layer.bias
            p = sigmoid(logit)
            high = row[slices[k]]
            weight *= float(np.prod(np.where(high == 1.0, p, 1.0 - p)))
            samples.append(high.copy())
            logits.append(logit)
            inputs = high
        trace_layers = [
            LayerTrace(x if k == 0 else samples[k - 1], logits[k],
                       sigmoid(logits[k]), samples[k], samples[k],
                       model.encoder.input_encoding(k))
            for k in range(len(widths))
        ]
        from hnca.netcore import ForwardTrace

        grads = decoder_direct_grads(cs, ForwardTrace(trace_layers))
        grads.iscale(weight)
        total_p += weight
        acc = grads if acc is None else acc.iadd(grads)
    assert total_p == pytest.approx(1.0, abs=1e-12)
    for got, want in zip(acc.arrays(), dec_exact.arrays()):
        assert np.allclose(got, want, atol=1e-10)


def test_per_component_variance_ordering(rng):
    # the single-component estimators: conditioning the score on the Markov
    # blanket (or dropping children entirely when none reach the component)
    # cannot raise the variance of any parameter
    from conftest import rand_vae
    from hnca.fhnca import connectivity, Connectivity
    from hnca.estimators import _stabilized_child_ratios
    from hnca.netcore import pinned_log_prob_sums

    model = rand_vae(np.random.default_rng(91), 4, [3, 3])
    x = (np.random.default_rng(92).random(4) < 0.5).astype(np.float64)
    cs = build_elbo_components(model, x)
    comps = cs.components()
    targets = [c for c in comps if c.id in ("recon1[2]", "recon0[1]", "prior[0]")]
    layer = 0
    n = 20_000
    draws = {c.id: {"re": [], "fh": []} for c in targets}
    stream = np.random.default_rng(93)
    for _ in range(n):
        trace = forward_sample(model.encoder, x, stream)
        lt = trace.layers[layer]
        S1, S0 = pinned_log_prob_sums(model.encoder.hidden[layer + 1], trace.layers[layer + 1])
        ratio, r1, r0 = _stabilized_child_ratios(lt.probs, S1, S0)
        dsig = lt.probs * (1.0 - lt.probs)
        for comp in targets:
            f, f_hi, f_lo = component_counterfactuals(comp, trace)
            conn = connectivity(comp.input_layers, layer)
            w = len(lt.probs)
            f1 = np.full(w, f)
            f0 = np.full(w, f)
            for slot, (lay, unit) in enumerate(comp.direct_parents()):
                if lay == layer:
                    f1[unit] = f_hi[slot]
                    f0[unit] = f_lo[slot]
            if conn in (Connectivity.MEDIATED_ONLY, Connectivity.DIRECT_AND_MEDIATED):
                coef = dsig * (r1 * f1 - r0 * f0)
            else:
                coef = dsig * (f1 - f0)
            # compare on the bias gradients (inputs are a fixed datum here)
            draws[comp.id]["fh"].append(coef)
            draws[comp.id]["re"].append((lt.high - lt.probs) * f)
    for comp in targets:
        fh = np.array(draws[comp.id]["fh"])
        re = np.array(draws[comp.id]["re"])
        # means agree (both unbiased for the same component gradient)
        se = np.sqrt(fh.var(axis=0, ddof=1) / n + re.var(axis=0, ddof=1) / n)
        assert np.all(np.abs(fh.mean(axis=0) - re.mean(axis=0)) <= 5 * se + 1e-12), comp.id
        var_fh = fh.var(axis=0, ddof=1)
        var_re = re.var(axis=0, ddof=1)
        se_var = var_re * np.sqrt(2.0 / (n - 1))
        assert np.all(var_fh <= var_re + 3 * se_var), comp.id


def test_entropy_direct_grads_value(rng):
    model, x, _ = make_components(rng, vis=4, widths=(3,))
    trace = forward_sample(model.encoder, x, rng)
    grad = entropy_direct_grads(model.encoder, trace)
    lt = trace.layers[0]
    want = -lt.logits * lt.probs * (1.0 - lt.probs)
    assert np.allclose(grad.layers[0][1], want, atol=1e-15)
