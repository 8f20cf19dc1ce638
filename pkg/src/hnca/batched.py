"""Minibatch-vectorized forward passes and gradient estimators.

These are the production code paths for training loops and large
verification runs; the per-example operations in netcore / estimators /
fhnca define the semantics, and tests hold the two equal on shared uniform
draws. Every per-example gradient here is rank-one (a per-unit logit
coefficient times the layer input), so batch gradients and per-parameter
moment statistics are assembled from coefficient matrices without ever
materializing per-example parameter-sized arrays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericError
from .estimators import BaselineState, GradEstimate
from .fhnca import FhncaMode, RlooVariant, VaeModel
from .netcore import (
    LOG_CLAMP_HI,
    LOG_CLAMP_LO,
    PROB_CLAMP,
    StochasticNet,
    _PROD_CHUNK,
    bernoulli_entropy,
    clamp_probs,
    log_sigmoid,
    sigmoid,
)


@dataclass
class BatchLayerTrace:
    inputs: np.ndarray  # [n, n_in]
    logits: np.ndarray  # [n, n_out]
    probs: np.ndarray
    high: np.ndarray
    sample: np.ndarray


@dataclass
class BatchTrace:
    layers: list[BatchLayerTrace]
    head_inputs: np.ndarray | None = None
    head_logits: np.ndarray | None = None
    head_probs: np.ndarray | None = None
    actions: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.layers[0].inputs.shape[0]


def uniforms_needed(net: StochasticNet) -> int:
    """One uniform per unit, layer-major; one more for the head."""
    return sum(net.widths) + (1 if net.head is not None else 0)


def forward_batch(net: StochasticNet, X: np.ndarray, U: np.ndarray) -> BatchTrace:
    """Vectorized forward sampling; row i of U drives example i.

    Column layout of U matches the per-example draw order, so feeding each
    row from that example's stream reproduces forward_sample exactly.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != net.context_dim:
        raise ConfigError(f"context batch has shape {X.shape}, expected (n, {net.context_dim})")
    if U.shape != (X.shape[0], uniforms_needed(net)):
        raise ConfigError(f"uniform block has shape {U.shape}, expected ({X.shape[0]}, {uniforms_needed(net)})")
    x = X
    off = 0
    layers = []
    for layer in net.hidden:
        logits = x @ layer.weights.T + layer.bias
        if not np.isfinite(logits).all():
            raise NumericError("non-finite logit in batched forward pass")
        probs = sigmoid(logits)
        u = U[:, off : off + layer.n_out]
        off += layer.n_out
        high = (u < probs).astype(np.float64)
        enc = layer.encoding
        sample = np.where(high == 1.0, enc.high, enc.low)
        layers.append(BatchLayerTrace(x, logits, probs, high, sample))
        x = sample
    trace = BatchTrace(layers)
    if net.head is not None:
        logits = x @ net.head.weights.T + net.head.bias
        z = np.exp(logits - logits.max(axis=1, keepdims=True))
        probs = z / z.sum(axis=1, keepdims=True)
        cum = np.cumsum(probs, axis=1)
        u = U[:, -1]
        actions = np.minimum(
            (cum <= u[:, None]).sum(axis=1), net.head.n_actions - 1
        ).astype(np.int64)
        trace.head_inputs = x
        trace.head_logits = logits
        trace.head_probs = probs
        trace.actions = actions
    return trace


def _batch_neg_log_one_plus_exp(Z):
    """-sum over axis 1 of log(1 + e^Z) for float32 Z [n, c, j], destroying Z."""
    np.exp(Z, out=Z)
    np.minimum(Z, 1.0 / PROB_CLAMP, out=Z)
    Z += 1.0
    c = Z.shape[1]
    if c <= _PROD_CHUNK:
        return -np.log(Z.prod(axis=1, dtype=np.float64))
    pad = (-c) % _PROD_CHUNK
    if pad:
        Z = np.concatenate([Z, np.ones((Z.shape[0], pad, Z.shape[2]), dtype=Z.dtype)], axis=1)
    partial = Z.reshape(Z.shape[0], -1, _PROD_CHUNK, Z.shape[2]).prod(axis=2)
    return -np.log(partial).sum(axis=1, dtype=np.float64)


def _batch_pinned_log_prob_sums(layer, child_lt: BatchLayerTrace, enc):
    """Batched per-parent sums of log counterfactual realized-sample probs.

    Same flipped-parent shortcut as the per-example kernel: the pinned-at-
    realized-value side is each example's realized log probability.
    """
    s = 2.0 * child_lt.high - 1.0  # [n, c]
    base = (child_lt.logits * s).astype(np.float32)
    realized = _batch_neg_log_one_plus_exp(-base[:, :, None])[:, 0]  # [n]

    flip_delta = (child_lt.inputs - np.where(child_lt.inputs == enc.high, enc.low, enc.high))
    Z = np.broadcast_to(layer.weights[None, :, :], (s.shape[0],) + layer.weights.shape).astype(
        np.float32
    )
    Z *= flip_delta.astype(np.float32)[:, None, :]
    Z *= s.astype(np.float32)[:, :, None]
    Z -= base[:, :, None]
    flipped = _batch_neg_log_one_plus_exp(Z)  # [n, j]

    hi_is_flip = child_lt.inputs != enc.high
    S_hi = np.where(hi_is_flip, flipped, realized[:, None])
    S_lo = np.where(hi_is_flip, realized[:, None], flipped)
    return S_hi, S_lo


def _batch_child_ratios(probs, S_hi, S_lo):
    m = np.maximum(S_hi, S_lo)
    e1 = np.exp(S_hi - m)
    e0 = np.exp(S_lo - m)
    pc = clamp_probs(probs)
    qbar = pc * e1 + (1.0 - pc) * e0
    if not np.isfinite(qbar).all() or (qbar <= 0.0).any():
        raise NumericError("child probability normalizer underflowed")
    return (e1 - e0) / qbar, e1 / qbar, e0 / qbar


def _head_log_messages(net, trace: BatchTrace):
    """log realized-action probability per pinned parent, batched."""
    head = net.head
    enc = net.hidden[-1].encoding
    x = trace.head_inputs
    out = []
    for v in (enc.high, enc.low):
        L = trace.head_logits[:, :, None] + head.weights[None, :, :] * (v - x)[:, None, :]
        L -= L.max(axis=1, keepdims=True)
        e = np.exp(L)
        q = np.take_along_axis(e, trace.actions[:, None, None], axis=1)[:, 0, :] / e.sum(axis=1)
        out.append(np.clip(np.log(q), LOG_CLAMP_LO, LOG_CLAMP_HI))
    return out[0], out[1]


def bandit_coefs(
    net: StochasticNet,
    trace: BatchTrace,
    rewards: np.ndarray,
    estimator: str,
    baseline: BaselineState | None = None,
):
    """Per-unit logit-gradient coefficients for one bandit estimator.

    Returns (layer_coefs, head_coef); the per-example weight gradient of
    layer k is coef[k][i] outer inputs[k][i].
    """
    adv = np.asarray(rewards, dtype=np.float64)
    if baseline is not None and baseline.initialized:
        adv = adv - baseline.value
    onehot = (trace.actions[:, None] == np.arange(net.head.n_actions)[None, :]).astype(np.float64)
    head_coef = (onehot - trace.head_probs) * adv[:, None]
    layer_coefs = []
    if estimator == "reinforce":
        for lt in trace.layers:
            layer_coefs.append((lt.high - lt.probs) * adv[:, None])
    elif estimator == "hnca":
        S_hi, S_lo = _head_log_messages(net, trace)
        for k in range(len(net.hidden) - 1, -1, -1):
            lt = trace.layers[k]
            ratio, _, _ = _batch_child_ratios(lt.probs, S_hi, S_lo)
            layer_coefs.append(lt.probs * (1.0 - lt.probs) * ratio * adv[:, None])
            if k > 0:
                S_hi, S_lo = _batch_pinned_log_prob_sums(
                    net.hidden[k], lt, net.input_encoding(k)
                )
        layer_coefs.reverse()
    else:
        raise ConfigError(f"unknown bandit estimator '{estimator}'")
    return layer_coefs, head_coef


# --- assembly helpers ---------------------------------------------------------


def grad_from_coefs(layer_coefs, layer_inputs, head_coef=None, head_inputs=None) -> GradEstimate:
    """Sum of per-example rank-one gradients over the batch."""
    layers = [(c.T @ x, c.sum(axis=0)) for c, x in zip(layer_coefs, layer_inputs)]
    head = None
    if head_coef is not None:
        head = (head_coef.T @ head_inputs, head_coef.sum(axis=0))
    return GradEstimate(layers, head)


def mean_gradient_variance(layer_coefs, layer_inputs, head_coef=None, head_inputs=None) -> float:
    """Mean over parameters of the per-parameter empirical variance across the batch.

    Uses the rank-one structure: for g = coef outer x, the sums of g and g^2
    over examples are coef^T x and (coef^2)^T (x^2).
    """
    pairs = list(zip(layer_coefs, layer_inputs))
    if head_coef is not None:
        pairs.append((head_coef, head_inputs))
    n = pairs[0][0].shape[0]
    if n < 2:
        raise ConfigError("variance over a batch needs at least two examples")
    total = 0.0
    count = 0
    for c, x in pairs:
        s1w = c.T @ x
        s2w = (c**2).T @ x**2
        total += ((s2w - s1w**2 / n) / (n - 1)).sum()
        count += s1w.size
        s1b = c.sum(axis=0)
        s2b = (c**2).sum(axis=0)
        total += ((s2b - s1b**2 / n) / (n - 1)).sum()
        count += s1b.size
    return float(total / count)


def flat_per_example(layer_coefs, layer_inputs, head_coef=None, head_inputs=None) -> np.ndarray:
    """[n, n_params] per-example gradients, serialization order; toy scale only."""
    n = layer_coefs[0].shape[0]
    parts = []
    for c, x in zip(layer_coefs, layer_inputs):
        parts.append(np.einsum("nj,ni->nji", c, x).reshape(n, -1))
        parts.append(c)
    if head_coef is not None:
        parts.append(np.einsum("nj,ni->nji", head_coef, head_inputs).reshape(n, -1))
        parts.append(head_coef)
    return np.concatenate(parts, axis=1)


# --- batched VAE objective ------------------------------------------------------


@dataclass
class BatchComponentValues:
    dec_logits: list[np.ndarray]  # [n, n_obs] per level
    recon: list[np.ndarray]
    prior: np.ndarray
    ent: list[np.ndarray]

    def elbo(self) -> np.ndarray:
        total = self.prior.sum(axis=1)
        for v in self.recon:
            total = total + v.sum(axis=1)
        for v in self.ent:
            total = total + v.sum(axis=1)
        return total


def evaluate_components_batch(model: VaeModel, X: np.ndarray, samples, logits) -> BatchComponentValues:
    """Componentwise objective values for a batch of configurations."""
    dec_logits = [s @ lvl.weights.T + lvl.bias for s, lvl in zip(samples, model.decoder)]
    recon = []
    for r in range(model.n_layers):
        obs = X if r == 0 else samples[r - 1]
        recon.append(log_sigmoid((2.0 * obs - 1.0) * dec_logits[r]))
    prior = log_sigmoid((2.0 * samples[-1] - 1.0) * model.prior_logits[None, :])
    ent = [bernoulli_entropy(l) for l in logits]
    return BatchComponentValues(dec_logits, recon, prior, ent)


def _batch_pink_sums(vals: BatchComponentValues, L: int) -> np.ndarray:
    n = vals.prior.shape[0]
    G = np.zeros((n, L))
    if L >= 2:
        G[:, L - 2] = vals.prior.sum(axis=1)
        for l in range(L - 3, -1, -1):
            G[:, l] = G[:, l + 1] + vals.recon[l + 2].sum(axis=1) + vals.ent[l + 2].sum(axis=1)
    return G


def _batch_upstream_sums(vals: BatchComponentValues, L: int) -> np.ndarray:
    n = vals.prior.shape[0]
    U = np.zeros((n, L))
    acc = np.zeros(n)
    for l in range(L):
        acc = acc + vals.ent[l].sum(axis=1)
        if l >= 1:
            acc = acc + vals.recon[l - 1].sum(axis=1)
        U[:, l] = acc
    return U


def _batch_green_realized(vals: BatchComponentValues, L: int, l: int) -> np.ndarray:
    total = vals.recon[l].sum(axis=1)
    if l <= L - 2:
        total = total + vals.ent[l + 1].sum(axis=1)
    if l == L - 1:
        total = total + vals.prior.sum(axis=1)
    return total


def batch_downstream_sums(vals: BatchComponentValues, L: int) -> np.ndarray:
    G = _batch_pink_sums(vals, L)
    out = np.empty_like(G)
    for l in range(L):
        orange = vals.recon[l + 1].sum(axis=1) if l <= L - 2 else 0.0
        out[:, l] = _batch_green_realized(vals, L, l) + orange + G[:, l]
    return out


def batch_mediated_sums(vals: BatchComponentValues, L: int, mode: FhncaMode) -> np.ndarray:
    """Per-example, per-layer sums the mode's baseline tracks."""
    G = _batch_pink_sums(vals, L)
    U = _batch_upstream_sums(vals, L) if mode is FhncaMode.FULL_REWARD else None
    out = np.zeros((vals.prior.shape[0], max(L - 1, 0)))
    for l in range(L - 1):
        total = vals.recon[l + 1].sum(axis=1) + G[:, l]
        if mode in (FhncaMode.NO_CHILD_PRUNING, FhncaMode.FULL_REWARD):
            total = total + _batch_green_realized(vals, L, l)
        if mode is FhncaMode.FULL_REWARD:
            total = total + U[:, l]
        out[:, l] = total
    return out


def _batch_green_counterfactuals(model: VaeModel, X, trace: BatchTrace, vals, l: int):
    L = model.n_layers
    lt = trace.layers[l]
    enc = model.encoder.hidden[l].encoding
    lvl = model.decoder[l]
    lam = vals.dec_logits[l]
    obs = X if l == 0 else trace.layers[l - 1].sample
    s = (2.0 * obs - 1.0)[:, :, None]
    lam_hi = lam[:, :, None] + lvl.weights[None, :, :] * (enc.high - lt.sample)[:, None, :]
    lam_lo = lam[:, :, None] + lvl.weights[None, :, :] * (enc.low - lt.sample)[:, None, :]
    F1 = log_sigmoid(s * lam_hi).sum(axis=1)
    F0 = log_sigmoid(s * lam_lo).sum(axis=1)
    if l <= L - 2:
        nxt = trace.layers[l + 1]
        layer = model.encoder.hidden[l + 1]
        encp = model.encoder.input_encoding(l + 1)
        L_hi = nxt.logits[:, :, None] + layer.weights[None, :, :] * (encp.high - nxt.inputs)[:, None, :]
        L_lo = nxt.logits[:, :, None] + layer.weights[None, :, :] * (encp.low - nxt.inputs)[:, None, :]
        F1 = F1 + bernoulli_entropy(L_hi).sum(axis=1)
        F0 = F0 + bernoulli_entropy(L_lo).sum(axis=1)
    if l == L - 1:
        base = vals.prior.sum(axis=1)[:, None] - vals.prior
        F1 = F1 + base + log_sigmoid(model.prior_logits)[None, :]
        F0 = F0 + base + log_sigmoid(-model.prior_logits)[None, :]
    return F1, F0


def vae_mode_coefs(
    model: VaeModel,
    X: np.ndarray,
    trace: BatchTrace,
    modes: list[FhncaMode],
    vals: BatchComponentValues | None = None,
    baselines: list[BaselineState] | None = None,
) -> dict[FhncaMode, list[np.ndarray]]:
    """Per-layer logit coefficients of the hindsight estimator, all modes at once.

    Entropy direct gradients are folded in. Baseline values (when attached
    and initialized) center the ratio-weighted sums exactly as in the
    per-example path.
    """
    L = model.n_layers
    if vals is None:
        samples = [lt.sample for lt in trace.layers]
        logits = [lt.logits for lt in trace.layers]
        vals = evaluate_components_batch(model, X, samples, logits)
    G = _batch_pink_sums(vals, L)
    need_up = any(m is FhncaMode.FULL_REWARD for m in modes)
    Uc = _batch_upstream_sums(vals, L) if need_up else None

    shared = []
    for l in range(L):
        lt = trace.layers[l]
        F1d, F0d = _batch_green_counterfactuals(model, X, trace, vals, l)
        entry = {"F1d": F1d, "F0d": F0d}
        if l <= L - 2:
            S1, S0 = _batch_pinned_log_prob_sums(
                model.encoder.hidden[l + 1], trace.layers[l + 1], model.encoder.input_encoding(l + 1)
            )
            entry["ratio"], entry["r1"], entry["r0"] = _batch_child_ratios(lt.probs, S1, S0)
            rec = vals.recon[l + 1]
            lam = vals.dec_logits[l + 1]
            base = rec.sum(axis=1)[:, None] - rec
            entry["F1c"] = base + log_sigmoid(lam)
            entry["F0c"] = base + log_sigmoid(-lam)
        shared.append(entry)

    out = {}
    for mode in modes:
        if mode is FhncaMode.WITH_BASELINE and L < 2:
            raise ConfigError("baseline mode is undefined for a single-layer model")
        coefs = []
        for l in range(L):
            lt = trace.layers[l]
            dsig = lt.probs * (1.0 - lt.probs)
            coef = -lt.logits * dsig
            e = shared[l]
            if l == L - 1:
                coef = coef + dsig * (e["F1d"] - e["F0d"])
            else:
                g = G[:, l]
                if mode is not FhncaMode.PLAIN and baselines is not None and baselines[l].initialized:
                    g = g - baselines[l].value
                if mode is FhncaMode.FULL_REWARD:
                    g = g + Uc[:, l]
                if mode in (FhncaMode.PLAIN, FhncaMode.WITH_BASELINE):
                    bracket = (
                        e["r1"] * e["F1c"] - e["r0"] * e["F0c"]
                        + e["ratio"] * g[:, None]
                        + (e["F1d"] - e["F0d"])
                    )
                else:
                    bracket = (
                        e["r1"] * (e["F1c"] + e["F1d"])
                        - e["r0"] * (e["F0c"] + e["F0d"])
                        + e["ratio"] * g[:, None]
                    )
                coef = coef + dsig * bracket
            coefs.append(coef)
        out[mode] = coefs
    return out


def vae_reinforce_coefs(
    model: VaeModel,
    trace: BatchTrace,
    vals: BatchComponentValues,
    baselines: list[BaselineState] | None = None,
) -> list[np.ndarray]:
    """Downstream-sum REINFORCE coefficients, entropy direct gradients included."""
    D = batch_downstream_sums(vals, model.n_layers)
    coefs = []
    for l, lt in enumerate(trace.layers):
        d = D[:, l]
        if baselines is not None and baselines[l].initialized:
            d = d - baselines[l].value
        coefs.append((lt.high - lt.probs) * d[:, None] - lt.logits * lt.probs * (1.0 - lt.probs))
    return coefs


def vae_rloo_coefs(
    model: VaeModel,
    X: np.ndarray,
    trace: BatchTrace,
    vals: BatchComponentValues,
    variant: RlooVariant,
    rng: np.random.Generator,
):
    """Leave-one-out coefficients (score part only).

    Returns (coefs, extra) where extra is None for the partial-resample
    variant (both terms share the pass-1 inputs) and a per-layer list of
    (coef2, inputs2) for the independent variant.
    """
    encoder = model.encoder
    L = model.n_layers
    D1 = batch_downstream_sums(vals, L)
    n = trace.n
    if variant is RlooVariant.INDEPENDENT_SAMPLE:
        U2 = rng.random((n, sum(encoder.widths)))
        trace2 = forward_batch(encoder, X, U2)
        samples2 = [lt.sample for lt in trace2.layers]
        logits2 = [lt.logits for lt in trace2.layers]
        D2 = batch_downstream_sums(evaluate_components_batch(model, X, samples2, logits2), L)
        coefs, extra = [], []
        for l in range(L):
            lt1, lt2 = trace.layers[l], trace2.layers[l]
            diff = D1[:, l] - D2[:, l]
            coefs.append(0.5 * (lt1.high - lt1.probs) * diff[:, None])
            extra.append((0.5 * (lt2.high - lt2.probs) * -diff[:, None], lt2.inputs))
        return coefs, extra

    coefs = []
    for l in range(L):
        lt1 = trace.layers[l]
        w = encoder.hidden[l].n_out
        u = rng.random((n, w))
        high2 = (u < lt1.probs).astype(np.float64)
        enc = encoder.hidden[l].encoding
        samples = [t.sample for t in trace.layers]
        logits = [t.logits for t in trace.layers]
        samples[l] = np.where(high2 == 1.0, enc.high, enc.low)
        xk = samples[l]
        for k in range(l + 1, L):
            layer = encoder.hidden[k]
            lk = xk @ layer.weights.T + layer.bias
            pk = sigmoid(lk)
            hk = (rng.random((n, layer.n_out)) < pk).astype(np.float64)
            samples[k] = np.where(hk == 1.0, layer.encoding.high, layer.encoding.low)
            logits[k] = lk
            xk = samples[k]
        d2 = batch_downstream_sums(
            evaluate_components_batch(model, X, samples, logits), L
        )[:, l]
        diff = D1[:, l] - d2
        coefs.append(0.5 * diff[:, None] * ((lt1.high - lt1.probs) - (high2 - lt1.probs)))
    return coefs, None
