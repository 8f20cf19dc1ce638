"""Ground truth at desk scale: exact expectations and gradients by exhaustive
enumeration, finite-difference cross-checks, and estimator moment statistics.

Everything here is deliberately independent of the message-passing backward
passes it certifies: objective values are recomputed from scratch per
configuration, and gradients come from per-unit score functions against the
enumerated joint, cross-checkable against central differences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, SizeCapError
from .estimators import (
    BaselineState,
    GradEstimate,
    hnca_backward,
    reinforce_grad,
)
from .fhnca import (
    DecoderGrads,
    FhncaMode,
    RlooVariant,
    VaeModel,
    build_elbo_components,
    entropy_direct_grads,
    fhnca_all_modes,
    init_vae,
    reinforce_downstream,
    reinforce_loo,
)
from .netcore import (
    Encoding,
    StochasticNet,
    bernoulli_entropy,
    forward_sample,
    init_net,
    log_sigmoid,
    sigmoid,
)

ENUM_CAP = 2**22  # configuration count above which enumeration is refused


def _all_configs(n_units: int) -> np.ndarray:
    """[2^n, n] matrix of high/low indicators, low bit = first unit."""
    if n_units > 22:
        raise SizeCapError(f"{n_units} stochastic units exceed the 2^22 enumeration cap")
    m = 1 << n_units
    return ((np.arange(m)[:, None] >> np.arange(n_units)) & 1).astype(np.float64)


def _layer_slices(widths):
    out, pos = [], 0
    for w in widths:
        out.append(slice(pos, pos + w))
        pos += w
    return out


def _bandit_tables(net: StochasticNet, context: np.ndarray):
    """Enumerated per-layer inputs, probabilities, indicators and joint log-probs."""
    widths = net.widths
    n = sum(widths)
    count = (1 << n) * (net.head.n_actions if net.head is not None else 1)
    if count > ENUM_CAP:
        raise SizeCapError(f"{count} joint configurations exceed the enumeration cap")
    bits = _all_configs(n)
    slices = _layer_slices(widths)
    x = np.broadcast_to(np.asarray(context, dtype=np.float64), (bits.shape[0], len(context)))
    layers = []
    logp = np.zeros(bits.shape[0])
    for k, layer in enumerate(net.hidden):
        high = bits[:, slices[k]]
        logits = x @ layer.weights.T + layer.bias
        probs = sigmoid(logits)
        logp += log_sigmoid((2.0 * high - 1.0) * logits).sum(axis=1)
        layers.append({"inputs": x, "logits": logits, "probs": probs, "high": high})
        x = np.where(high == 1.0, layer.encoding.high, layer.encoding.low)
    head = None
    if net.head is not None:
        logits = x @ net.head.weights.T + net.head.bias
        z = logits - logits.max(axis=1, keepdims=True)
        logpi = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        head = {"inputs": x, "logpi": logpi, "probs": np.exp(logpi)}
    return layers, head, logp


def bandit_exact(net: StochasticNet, context, rewards) -> tuple[float, GradEstimate]:
    """Exact E[R] and its gradient.

    With a softmax head the reward table is indexed by action:
    E[R] = sum_c P(c|x) sum_a pi(a|c) R(a). Without a head it is indexed by
    the integer reading of the last layer's high bits (low bit = unit 0).
    The gradient accumulates objective-weighted per-unit score functions
    over the enumerated joint.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    layers, head, logp = _bandit_tables(net, context)
    pc = np.exp(logp)
    if head is not None:
        if rewards.shape != (net.head.n_actions,):
            raise ConfigError("reward table must have one entry per action")
        wa = pc[:, None] * head["probs"] * rewards[None, :]  # weight of (config, action)
        value = float(wa.sum())
        wsum = wa.sum(axis=1)
    else:
        w_last = net.widths[-1]
        if rewards.shape != (2**w_last,):
            raise ConfigError(
                f"headless reward table must have 2^{w_last} entries, one per output pattern"
            )
        codes = (layers[-1]["high"] @ (1 << np.arange(w_last))).astype(np.int64)
        wsum = pc * rewards[codes]
        value = float(wsum.sum())

    grads = []
    for data in layers:
        score = data["high"] - data["probs"]
        gb = wsum @ score
        gw = np.einsum("c,cj,ci->ji", wsum, score, data["inputs"], optimize=True)
        grads.append((gw, gb))
    head_grads = None
    if head is not None:
        coef = wa - wsum[:, None] * head["probs"]  # (1[a=i] - pi_i) folded over actions
        gb_h = coef.sum(axis=0)
        gw_h = np.einsum("ci,cj->ij", coef, head["inputs"], optimize=True)
        head_grads = (gw_h, gb_h)
    return value, GradEstimate(grads, head_grads)


def enumeration_total_probability(net: StochasticNet, context) -> float:
    """Sum of all joint configuration probabilities; must be 1."""
    _, head, logp = _bandit_tables(net, context)
    pc = np.exp(logp)
    if head is not None:
        return float((pc[:, None] * head["probs"]).sum())
    return float(pc.sum())


def _vae_tables(model: VaeModel, x: np.ndarray):
    widths = model.encoder.widths
    n = sum(widths)
    if (1 << n) > ENUM_CAP:
        raise SizeCapError(f"2^{n} latent configurations exceed the enumeration cap")
    bits = _all_configs(n)
    slices = _layer_slices(widths)
    m = bits.shape[0]
    inp = np.broadcast_to(np.asarray(x, dtype=np.float64), (m, len(x)))
    layers = []
    logq = np.zeros(m)
    for k, layer in enumerate(model.encoder.hidden):
        high = bits[:, slices[k]]
        logits = inp @ layer.weights.T + layer.bias
        probs = sigmoid(logits)
        logq += log_sigmoid((2.0 * high - 1.0) * logits).sum(axis=1)
        layers.append({"inputs": inp, "logits": logits, "probs": probs, "high": high})
        inp = np.where(high == 1.0, layer.encoding.high, layer.encoding.low)
    return layers, logq


def _vae_objective_terms(model: VaeModel, x, layers):
    """Per-config ELBO integrand f (entropy form) and decoder residuals."""
    m = layers[0]["high"].shape[0]
    f = np.zeros(m)
    samples = []
    for k, layer in enumerate(model.encoder.hidden):
        enc = layer.encoding
        samples.append(np.where(layers[k]["high"] == 1.0, enc.high, enc.low))
    dec = []
    for r, lvl in enumerate(model.decoder):
        lam = samples[r] @ lvl.weights.T + lvl.bias
        obs = np.broadcast_to(np.asarray(x, dtype=np.float64), lam.shape) if r == 0 else samples[r - 1]
        f += log_sigmoid((2.0 * obs - 1.0) * lam).sum(axis=1)
        dec.append({"lam": lam, "obs": obs})
    f += log_sigmoid((2.0 * samples[-1] - 1.0) * model.prior_logits[None, :]).sum(axis=1)
    for k in range(len(samples)):
        f += bernoulli_entropy(layers[k]["logits"]).sum(axis=1)
    return f, samples, dec


def vae_exact(model: VaeModel, x) -> tuple[float, GradEstimate, DecoderGrads]:
    """Exact ELBO and gradients for encoder, decoder and prior."""
    layers, logq = _vae_tables(model, x)
    f, samples, dec = _vae_objective_terms(model, x, layers)
    w = np.exp(logq)
    value = float(w @ f)

    enc_grads = []
    for data in layers:
        score = data["high"] - data["probs"]
        # score-weighted objective plus the direct entropy-term gradient
        coef = score * f[:, None] - data["logits"] * data["probs"] * (1.0 - data["probs"])
        gb = w @ coef
        gw = np.einsum("c,cj,ci->ji", w, coef, data["inputs"], optimize=True)
        enc_grads.append((gw, gb))

    dec_levels = []
    for r, d in enumerate(dec):
        delta = d["obs"] - sigmoid(d["lam"])
        gb = w @ delta
        gw = np.einsum("c,cd,cj->dj", w, delta, samples[r], optimize=True)
        dec_levels.append((gw, gb))
    prior_delta = samples[-1] - sigmoid(model.prior_logits)[None, :]
    g_prior = w @ prior_delta
    return value, GradEstimate(enc_grads, None), DecoderGrads(dec_levels, g_prior)


def exact_expectation(model, datum, objective=None) -> float:
    """Exact objective expectation; dispatches on the model flavor."""
    if isinstance(model, StochasticNet):
        return bandit_exact(model, datum, objective)[0]
    if isinstance(model, VaeModel):
        return vae_exact(model, datum)[0]
    raise ConfigError(f"cannot enumerate a {type(model).__name__}")


def exact_gradient(model, datum, objective=None) -> GradEstimate:
    """Exact objective gradient for the stochastic-unit parameters."""
    if isinstance(model, StochasticNet):
        return bandit_exact(model, datum, objective)[1]
    if isinstance(model, VaeModel):
        return vae_exact(model, datum)[1]
    raise ConfigError(f"cannot enumerate a {type(model).__name__}")


def finite_difference_gradient(arrays, value_fn, step=1e-5):
    """Central differences of value_fn with respect to every entry of arrays.

    Mutates entries in place and restores them; returns gradients shaped
    like the inputs.
    """
    grads = [np.zeros_like(a) for a in arrays]
    for a, g in zip(arrays, grads):
        flat_a = a.ravel()
        flat_g = g.ravel()
        for i in range(flat_a.size):
            orig = flat_a[i]
            flat_a[i] = orig + step
            up = value_fn()
            flat_a[i] = orig - step
            down = value_fn()
            flat_a[i] = orig
            flat_g[i] = (up - down) / (2.0 * step)
    return grads


def blanket_conditional_enum(net: StochasticNet, context, trace, k: int) -> np.ndarray:
    """P(unit = high | its Markov blanket) for every unit of hidden layer k.

    Computed the hard way: full-joint enumeration, marginalizing everything
    outside the blanket (layers below k-1, layers above k+1, and the action
    unless the head is a child). This is what the message-passing ratio
    rho * pi must reproduce.
    """
    widths = net.widths
    layers, head, logp = _bandit_tables(net, context)
    slices = _layer_slices(widths)
    joint = np.exp(logp)
    if head is not None:
        if k == len(widths) - 1:
            # the head is a child: condition on the realized action
            joint = joint * head["probs"][:, trace.head.action]
        # otherwise the action is marginalized (sums to 1), nothing to do

    def match(layer_idx):
        want = trace.layers[layer_idx].high
        got = layers[layer_idx]["high"]
        return (got == want[None, :]).all(axis=1)

    mask = np.ones(joint.shape[0], dtype=bool)
    if k - 1 >= 0:
        mask &= match(k - 1)
    if k + 1 < len(widths):
        mask &= match(k + 1)

    out = np.empty(widths[k])
    own = layers[k]["high"]
    want = trace.layers[k].high
    for j in range(widths[k]):
        others = np.ones_like(mask)
        for i in range(widths[k]):
            if i != j:
                others &= own[:, i] == want[i]
        sel = mask & others
        w_hi = joint[sel & (own[:, j] == 1.0)].sum()
        w_lo = joint[sel & (own[:, j] == 0.0)].sum()
        out[j] = w_hi / (w_hi + w_lo)
    return out


# --- estimator moment statistics ---------------------------------------------


@dataclass
class OracleReport:
    """Exact gradient vs empirical estimator moments, flat parameter layout."""

    name: str
    n_samples: int
    exact: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    se_mean: np.ndarray
    se_var: np.ndarray
    max_abs_z: float  # max over parameters of |mean - exact| / SE

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "n_samples": self.n_samples,
            "max_abs_z": self.max_abs_z,
            "mean_var": float(self.var.mean()),
            "exact": self.exact.tolist(),
            "mean": self.mean.tolist(),
            "var": self.var.tolist(),
            "se_mean": self.se_mean.tolist(),
        }


def _report(name, n, s1, s2, s3, s4, exact):
    mean = s1 / n
    var = (s2 - n * mean**2) / (n - 1)
    var = np.maximum(var, 0.0)
    m4 = (s4 - 4 * mean * s3 + 6 * mean**2 * s2 - 4 * mean**3 * s1) / n + mean**4
    var_of_var = np.maximum(m4 - (n - 3) / (n - 1) * var**2, 0.0) / n
    se_mean = np.sqrt(var / n)
    se_var = np.sqrt(var_of_var)
    if exact is None:
        max_z = float("nan")
    else:
        diff = np.abs(mean - exact)
        z = np.where(se_mean > 0.0, diff / np.maximum(se_mean, 1e-300), 0.0)
        # a zero-variance estimate must match exactly
        z[(se_mean == 0.0) & (diff > 1e-12)] = np.inf
        max_z = float(z.max())
    return OracleReport(name, n, exact, mean, var, se_mean, se_var, max_z)


def estimator_moments(sample_fn, n_samples: int, rng, exact=None):
    """Empirical mean/variance/SE of one or several paired estimators.

    sample_fn(rng) returns either a flat gradient vector or a dict of them
    computed from one shared trace (paired sampling tightens variance
    comparisons). `exact` mirrors that structure. Sample variance uses the
    n-1 denominator; SE(variance) comes from the fourth central moment.
    """
    if n_samples < 2:
        raise ConfigError("need at least two samples for variance")
    first = sample_fn(rng)
    paired = isinstance(first, dict)
    names = list(first.keys()) if paired else [None]
    sums = {}
    for name in names:
        v = first[name] if paired else first
        sums[name] = [np.array(v, dtype=np.float64), v**2, v**3, v**4]
    for _ in range(n_samples - 1):
        got = sample_fn(rng)
        for name in names:
            v = got[name] if paired else got
            s = sums[name]
            s[0] += v
            s[1] += v**2
            s[2] += v**3
            s[3] += v**4
    out = {}
    for name in names:
        ex = (exact.get(name) if paired else exact) if exact is not None else None
        out[name] = _report(name or "estimator", n_samples, *sums[name], ex)
    return out if paired else out[names[0]]


# --- default toy suite ---------------------------------------------------------


@dataclass
class ToyBandit:
    name: str
    net: StochasticNet
    context: np.ndarray
    rewards: np.ndarray
    seed: int


@dataclass
class ToyVae:
    name: str
    model: VaeModel
    x: np.ndarray
    seed: int


def toy_bandits() -> list[ToyBandit]:
    """Three seeded bandit instances, <= 12 stochastic units each."""
    specs = [
        ("bandit-a", 3, [4], 3, Encoding.ZERO_ONE, 101),
        ("bandit-b", 2, [3, 3], 2, Encoding.PLUS_MINUS_ONE, 102),
        ("bandit-c", 4, [5, 4], 3, Encoding.PLUS_MINUS_ONE, 103),
    ]
    out = []
    for name, ctx, widths, actions, enc, seed in specs:
        rng = np.random.default_rng(seed)
        net = init_net(ctx, widths, actions, enc, rng)
        for layer in net.hidden:
            layer.weights[...] = rng.normal(scale=0.8, size=layer.weights.shape)
            layer.bias[...] = rng.normal(scale=0.3, size=layer.bias.shape)
        net.head.weights[...] = rng.normal(scale=0.8, size=net.head.weights.shape)
        net.head.bias[...] = rng.normal(scale=0.3, size=net.head.bias.shape)
        context = (rng.random(ctx) < 0.5).astype(np.float64)
        rewards = rng.uniform(0.0, 1.0, actions)
        out.append(ToyBandit(name, net, context, rewards, seed))
    return out


def toy_vaes() -> list[ToyVae]:
    """Three seeded VAE instances, <= 10 latent units each (one single-layer)."""
    specs = [
        ("vae-a", 4, [3], 201),
        ("vae-b", 4, [3, 3], 202),
        ("vae-c", 5, [4, 3], 203),
    ]
    out = []
    for name, vis, widths, seed in specs:
        rng = np.random.default_rng(seed)
        model = init_vae(vis, widths, rng)
        for layer in model.encoder.hidden + model.decoder:
            layer.weights[...] = rng.normal(scale=0.8, size=layer.weights.shape)
            layer.bias[...] = rng.normal(scale=0.3, size=layer.bias.shape)
        model.prior_logits[...] = rng.normal(scale=0.5, size=model.prior_logits.shape)
        x = (rng.random(vis) < 0.5).astype(np.float64)
        out.append(ToyVae(name, model, x, seed))
    return out


def bandit_sampler(toy: ToyBandit, baseline: BaselineState | None = None):
    """Paired REINFORCE / hindsight estimates from one shared trace."""

    def sample(rng):
        trace = forward_sample(toy.net, toy.context, rng)
        r = float(toy.rewards[trace.head.action])
        return {
            "reinforce": reinforce_grad(toy.net, trace, r, baseline).flat(),
            "hnca": hnca_backward(toy.net, trace, r, baseline).flat(),
        }

    return sample


def vae_estimator_names(model: VaeModel, with_rloo=True) -> list[str]:
    names = ["reinforce", "fhnca", "fhnca-noprune", "fhnca-fullreward"]
    if model.n_layers >= 2:
        names.insert(2, "fhnca-b")
    if with_rloo:
        names += ["rloo", "rloo-is"]
    return names


def vae_sampler(toy: ToyVae, with_rloo=True, baselines=None):
    """Paired estimates of every known-function estimator from shared traces.

    The leave-one-out estimators draw their own extra samples but reuse the
    shared trace for the direct entropy gradients, which keeps each returned
    vector a complete single-example gradient estimate.
    """
    model = toy.model
    components = build_elbo_components(model, toy.x, baselines)
    mode_names = [
        ("fhnca", FhncaMode.PLAIN),
        ("fhnca-b", FhncaMode.WITH_BASELINE),
        ("fhnca-noprune", FhncaMode.NO_CHILD_PRUNING),
        ("fhnca-fullreward", FhncaMode.FULL_REWARD),
    ]
    names = set(vae_estimator_names(model, with_rloo))
    modes = [(n, m) for n, m in mode_names if n in names]

    def sample(rng):
        trace = forward_sample(model.encoder, toy.x, rng)
        vals = components.evaluate(trace)
        out = {"reinforce": reinforce_downstream(model.encoder, trace, components, vals=vals).flat()}
        got = fhnca_all_modes(model.encoder, trace, components, [m for _, m in modes], vals=vals)
        for name, mode in modes:
            out[name] = got[mode].flat()
        if with_rloo:
            direct = entropy_direct_grads(model.encoder, trace).flat()
            for name, variant in (
                ("rloo", RlooVariant.PARTIAL_RESAMPLE),
                ("rloo-is", RlooVariant.INDEPENDENT_SAMPLE),
            ):
                g = reinforce_loo(model, toy.x, variant, rng, components=components)
                out[name] = g.flat() + direct
        return out

    return sample


def _power_sums_init(p):
    return [np.zeros(p) for _ in range(4)]


def _power_sums_add(sums, flat):
    f2 = flat * flat
    sums[0] += flat.sum(axis=0)
    sums[1] += f2.sum(axis=0)
    sums[2] += (f2 * flat).sum(axis=0)
    sums[3] += (f2 * f2).sum(axis=0)


def bandit_gate_moments(
    toy: ToyBandit, n_samples: int, rng, chunk: int = 8192, baseline=None
) -> dict[str, OracleReport]:
    """Paired batched moments of both bandit estimators against the oracle."""
    from . import batched

    net = toy.net
    _, exact = bandit_exact(net, toy.context, toy.rewards)
    flat_exact = exact.flat()
    names = ["reinforce", "hnca"]
    sums = {n: _power_sums_init(flat_exact.size) for n in names}
    done = 0
    while done < n_samples:
        m = min(chunk, n_samples - done)
        X = np.broadcast_to(toy.context, (m, toy.context.size))
        U = rng.random((m, batched.uniforms_needed(net)))
        bt = batched.forward_batch(net, X, U)
        rewards = toy.rewards[bt.actions]
        inputs = [lt.inputs for lt in bt.layers]
        for name in names:
            coefs, head_coef = batched.bandit_coefs(net, bt, rewards, name, baseline)
            flat = batched.flat_per_example(coefs, inputs, head_coef, bt.head_inputs)
            _power_sums_add(sums[name], flat)
        done += m
    return {n: _report(n, n_samples, *sums[n], flat_exact) for n in names}


def vae_gate_moments(
    toy: ToyVae,
    n_samples: int,
    rng,
    chunk: int = 4096,
    with_rloo: bool = True,
    baselines=None,
) -> dict[str, OracleReport]:
    """Paired batched moments of every known-function estimator against the oracle."""
    from . import batched

    model = toy.model
    _, enc_exact, _ = vae_exact(model, toy.x)
    flat_exact = enc_exact.flat()
    names = vae_estimator_names(model, with_rloo)
    mode_of = {
        "fhnca": FhncaMode.PLAIN,
        "fhnca-b": FhncaMode.WITH_BASELINE,
        "fhnca-noprune": FhncaMode.NO_CHILD_PRUNING,
        "fhnca-fullreward": FhncaMode.FULL_REWARD,
    }
    modes = [mode_of[n] for n in names if n in mode_of]
    sums = {n: _power_sums_init(flat_exact.size) for n in names}
    nu = sum(model.encoder.widths)
    done = 0
    while done < n_samples:
        m = min(chunk, n_samples - done)
        X = np.broadcast_to(toy.x, (m, toy.x.size))
        U = rng.random((m, nu))
        bt = batched.forward_batch(model.encoder, X, U)
        inputs = [lt.inputs for lt in bt.layers]
        samples = [lt.sample for lt in bt.layers]
        logits = [lt.logits for lt in bt.layers]
        vals = batched.evaluate_components_batch(model, X, samples, logits)

        got = batched.vae_mode_coefs(model, X, bt, modes, vals=vals, baselines=baselines)
        for name in names:
            if name in mode_of:
                flat = batched.flat_per_example(got[mode_of[name]], inputs)
                _power_sums_add(sums[name], flat)
        re_coefs = batched.vae_reinforce_coefs(model, bt, vals, baselines=None)
        _power_sums_add(sums["reinforce"], batched.flat_per_example(re_coefs, inputs))
        if with_rloo:
            direct = [
                -lt.logits * lt.probs * (1.0 - lt.probs) for lt in bt.layers
            ]
            for name, variant in (
                ("rloo", RlooVariant.PARTIAL_RESAMPLE),
                ("rloo-is", RlooVariant.INDEPENDENT_SAMPLE),
            ):
                coefs, extra = batched.vae_rloo_coefs(model, X, bt, vals, variant, rng)
                merged = [c + d for c, d in zip(coefs, direct)]
                flat = batched.flat_per_example(merged, inputs)
                if extra is not None:
                    flat = flat + batched.flat_per_example(
                        [e[0] for e in extra], [e[1] for e in extra]
                    )
                _power_sums_add(sums[name], flat)
        done += m
    return {n: _report(n, n_samples, *sums[n], flat_exact) for n in names}


def run_verification(n_samples: int = 200000, seed: int = 7, full_reports: bool = True) -> dict:
    """Unbiasedness gates for every estimator on the default toy suite.

    Each gate demands max |mean - exact| / SE <= 4 per parameter. Returns a
    JSON-ready report; with full_reports the complete per-estimator moment
    reports (exact, mean, variance, standard errors) ride along.
    """
    report = {"n_samples": n_samples, "seed": seed, "gates": [], "all_passed": True,
              "reports": {}}

    def add(instance, reports):
        for name, rep in reports.items():
            passed = bool(rep.max_abs_z <= 4.0)
            report["all_passed"] = bool(report["all_passed"] and passed)
            report["gates"].append(
                {"instance": instance, "estimator": name, "max_abs_z": rep.max_abs_z, "passed": passed}
            )
            if full_reports:
                report["reports"].setdefault(instance, {})[name] = rep.to_dict()

    for toy in toy_bandits():
        add(toy.name, bandit_gate_moments(toy, n_samples, np.random.default_rng(seed)))
    for toy in toy_vaes():
        add(toy.name, vae_gate_moments(toy, n_samples, np.random.default_rng(seed + 1)))
    return report
