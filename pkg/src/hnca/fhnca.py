"""Gradient estimation for a known factored objective f = sum_i f_i.

The objective here is the discrete-VAE evidence lower bound, split into one
function component per output unit of each term: visible reconstruction
log-likelihoods, intermediate latent reconstruction log-likelihoods, prior
log-probabilities, and per-unit encoder entropies. Each component is
classified per encoder layer by how the layer reaches it: through the layer's
own output only (direct), through its children (mediated), both, or not at
all (upstream). Directly connected linear components admit the same
constant-time pinned-parent counterfactuals as unit policies, which is what
makes the estimator's backward sweep cheap.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import ConfigError
from .estimators import BaselineState, GradEstimate, _stabilized_child_ratios
from .netcore import (
    BernoulliLayer,
    Encoding,
    ForwardTrace,
    StochasticNet,
    bernoulli_entropy,
    counterfactual_logits,
    forward_sample,
    log_sigmoid,
    pinned_log_prob_sums,
    sigmoid,
)


class ComponentKind(Enum):
    LINEAR_LOGPROB = "linear_logprob"  # log-likelihood of a bit under a linear-sigmoid model
    BERNOULLI_ENTROPY = "bernoulli_entropy"
    PRIOR_LOGPROB = "prior_logprob"


class Connectivity(Enum):
    UPSTREAM = "upstream"
    DIRECT_ONLY = "direct_only"
    DIRECT_AND_MEDIATED = "direct_and_mediated"
    MEDIATED_ONLY = "mediated_only"


class FhncaMode(Enum):
    PLAIN = "plain"
    WITH_BASELINE = "with_baseline"
    NO_CHILD_PRUNING = "no_child_pruning"  # route direct-only components through children too
    FULL_REWARD = "full_reward"  # additionally credit upstream components


class RlooVariant(Enum):
    PARTIAL_RESAMPLE = "partial_resample"
    INDEPENDENT_SAMPLE = "independent_sample"


@dataclass
class VaeModel:
    """Hierarchical Bernoulli VAE: encoder chain, decoder chain, learned prior.

    decoder[r] maps latent layer r's sample to logits for level-r
    observations (level 0 is the visible vector, level r >= 1 is latent layer
    r-1). The prior over the deepest layer is a vector of learned logits.
    """

    encoder: StochasticNet
    decoder: list[BernoulliLayer]
    prior_logits: np.ndarray

    def __post_init__(self):
        if self.encoder.head is not None:
            raise ConfigError("VAE encoder must not have a softmax head")
        self.prior_logits = np.ascontiguousarray(self.prior_logits, dtype=np.float64)
        widths = self.encoder.widths
        if len(self.decoder) != len(widths):
            raise ConfigError(
                f"need one decoder level per latent layer: {len(self.decoder)} vs {len(widths)}"
            )
        expected_out = [self.encoder.context_dim] + widths[:-1]
        for r, lvl in enumerate(self.decoder):
            if lvl.n_in != widths[r] or lvl.n_out != expected_out[r]:
                raise ConfigError(
                    f"decoder level {r} is {lvl.n_out}x{lvl.n_in}, "
                    f"expected {expected_out[r]}x{widths[r]}"
                )
        if self.prior_logits.shape != (widths[-1],):
            raise ConfigError("prior logit vector must match the deepest layer width")
        if not np.isfinite(self.prior_logits).all():
            raise ConfigError("prior logits must be finite")

    @property
    def n_visible(self) -> int:
        return self.encoder.context_dim

    @property
    def n_layers(self) -> int:
        return len(self.encoder.hidden)

    def param_arrays(self) -> list[np.ndarray]:
        out = self.encoder.param_arrays()
        for lvl in self.decoder:
            out += [lvl.weights, lvl.bias]
        out.append(self.prior_logits)
        return out


def init_vae(n_visible: int, widths: list[int], rng: np.random.Generator) -> VaeModel:
    """Fan-in scaled init; encoder units emit zero/one samples."""
    from .netcore import init_net

    encoder = init_net(n_visible, widths, None, Encoding.ZERO_ONE, rng)
    decoder = []
    outs = [n_visible] + widths[:-1]
    for r, w in enumerate(widths):
        bound = 1.0 / np.sqrt(w)
        decoder.append(BernoulliLayer(rng.uniform(-bound, bound, size=(outs[r], w)), np.zeros(outs[r])))
    return VaeModel(encoder, decoder, np.zeros(widths[-1]))


def _bit_sign(obs):
    return 2.0 * np.asarray(obs, dtype=np.float64) - 1.0


@dataclass(frozen=True)
class FunctionComponent:
    """One additive term of the objective, with its direct-parent bookkeeping."""

    id: str
    kind: ComponentKind
    term: str  # "recon" | "prior" | "ent"
    level: int
    unit: int
    input_layers: frozenset  # encoder layer indices feeding this component
    owner: "FunctionComponentSet" = field(repr=False, compare=False, default=None)

    def direct_parents(self) -> list[tuple[int, int]]:
        """(layer, unit) pairs this component reads directly, observation slot first."""
        model = self.owner.model
        parents = []
        if self.term == "recon":
            if self.level >= 1:
                parents.append((self.level - 1, self.unit))
            parents += [(self.level, i) for i in range(model.encoder.widths[self.level])]
        elif self.term == "prior":
            parents.append((model.n_layers - 1, self.unit))
        elif self.term == "ent" and self.level >= 1:
            parents += [(self.level - 1, i) for i in range(model.encoder.widths[self.level - 1])]
        return parents


def connectivity(input_layers: frozenset, layer: int) -> Connectivity:
    """Classify a component against one encoder layer.

    In the feedforward chain the layer's children are exactly layer+1, and a
    component is reachable through them iff some input sits at depth >=
    layer+1. Components whose inputs all sit above the layer are upstream and
    can only contribute through direct parameter dependence.
    """
    mx = max(input_layers) if input_layers else -1
    direct = layer in input_layers
    mediated = mx >= layer + 1
    if direct and mediated:
        return Connectivity.DIRECT_AND_MEDIATED
    if direct:
        return Connectivity.DIRECT_ONLY
    if mediated:
        return Connectivity.MEDIATED_ONLY
    return Connectivity.UPSTREAM


@dataclass
class _ComponentValues:
    """Realized component values for one encoder configuration."""

    dec_logits: list[np.ndarray]
    recon: list[np.ndarray]
    prior: np.ndarray
    ent: list[np.ndarray]

    def elbo(self) -> float:
        total = float(self.prior.sum())
        for v in self.recon:
            total += float(v.sum())
        for v in self.ent:
            total += float(v.sum())
        return total


@dataclass
class FunctionComponentSet:
    """All objective components of one VAE bound to one datum.

    Per-layer baseline states (for the running average of the mediated sum)
    are attached by the trainer and shared across the per-example sets it
    builds; only layers that have children carry a baseline.
    """

    model: VaeModel
    x: np.ndarray
    baselines: list[BaselineState] | None = None

    def __post_init__(self):
        self.x = np.ascontiguousarray(self.x, dtype=np.float64)
        if self.x.shape != (self.model.n_visible,):
            raise ConfigError(
                f"datum has shape {self.x.shape}, decoder emits {self.model.n_visible} visibles"
            )
        if not np.isin(self.x, (0.0, 1.0)).all():
            raise ConfigError("datum must be binarized to {0, 1}")
        L = self.model.n_layers
        if self.baselines is not None and len(self.baselines) != max(L - 1, 0):
            raise ConfigError(f"need one baseline per layer with children ({L - 1})")

    # -- structure ------------------------------------------------------

    def components(self) -> list[FunctionComponent]:
        model = self.model
        widths = model.encoder.widths
        L = model.n_layers
        out = []
        for r in range(L):
            n_obs = model.n_visible if r == 0 else widths[r - 1]
            inputs = frozenset([r]) if r == 0 else frozenset([r - 1, r])
            for d in range(n_obs):
                out.append(
                    FunctionComponent(
                        f"recon{r}[{d}]", ComponentKind.LINEAR_LOGPROB, "recon", r, d, inputs, self
                    )
                )
        for d in range(widths[-1]):
            out.append(
                FunctionComponent(
                    f"prior[{d}]", ComponentKind.PRIOR_LOGPROB, "prior", L - 1, d,
                    frozenset([L - 1]), self,
                )
            )
        for e in range(L):
            inputs = frozenset() if e == 0 else frozenset([e - 1])
            for d in range(widths[e]):
                out.append(
                    FunctionComponent(
                        f"ent{e}[{d}]", ComponentKind.BERNOULLI_ENTROPY, "ent", e, d, inputs, self
                    )
                )
        return out

    @property
    def component_count(self) -> int:
        widths = self.model.encoder.widths
        n_obs = self.model.n_visible + sum(widths[:-1])
        return n_obs + widths[-1] + sum(widths)

    def classify(self, layer: int) -> dict[str, Connectivity]:
        return {c.id: connectivity(c.input_layers, layer) for c in self.components()}

    def has_mediated(self) -> bool:
        return self.model.n_layers >= 2

    # -- evaluation -----------------------------------------------------

    def evaluate(self, trace: ForwardTrace) -> _ComponentValues:
        samples = [lt.sample for lt in trace.layers]
        logits = [lt.logits for lt in trace.layers]
        return self.evaluate_config(samples, logits)

    def evaluate_config(self, samples, logits) -> _ComponentValues:
        """Component values for an explicit configuration (samples + encoder logits)."""
        model = self.model
        dec_logits = [
            lvl.weights @ samples[r] + lvl.bias for r, lvl in enumerate(model.decoder)
        ]
        recon = []
        for r in range(model.n_layers):
            obs = self.x if r == 0 else samples[r - 1]
            recon.append(log_sigmoid(_bit_sign(obs) * dec_logits[r]))
        prior = log_sigmoid(_bit_sign(samples[-1]) * model.prior_logits)
        ent = [bernoulli_entropy(l) for l in logits]
        return _ComponentValues(dec_logits, recon, prior, ent)


def build_elbo_components(
    model: VaeModel, x: np.ndarray, baselines: list[BaselineState] | None = None
) -> FunctionComponentSet:
    """Factor the evidence lower bound of `model` at datum `x` into components."""
    return FunctionComponentSet(model, x, baselines)


def component_counterfactuals(component: FunctionComponent, trace: ForwardTrace):
    """Realized value and pinned-parent counterfactual values of one component.

    Returns (f, f_hi, f_lo) with the vectors aligned to
    component.direct_parents(). Counterfactuals use the incremental logit
    update, so each entry costs O(1) instead of a fresh dot product.
    """
    cs = component.owner
    model = cs.model
    vals = cs.evaluate(trace)
    term, r, d = component.term, component.level, component.unit
    f_hi, f_lo = [], []
    if term == "recon":
        lam = vals.dec_logits[r][d]
        obs = cs.x[d] if r == 0 else trace.layers[r - 1].sample[d]
        f = float(log_sigmoid(_bit_sign(obs) * lam))
        if r >= 1:  # observation slot
            f_hi.append(float(log_sigmoid(lam)))
            f_lo.append(float(log_sigmoid(-lam)))
        lt = trace.layers[r]
        enc = model.encoder.hidden[r].encoding
        row = model.decoder[r].weights[d]
        lam_hi = lam + row * (enc.high - lt.sample)
        lam_lo = lam + row * (enc.low - lt.sample)
        s = _bit_sign(obs)
        f_hi.extend(log_sigmoid(s * lam_hi).tolist())
        f_lo.extend(log_sigmoid(s * lam_lo).tolist())
    elif term == "prior":
        pl = model.prior_logits[d]
        obs = trace.layers[-1].sample[d]
        f = float(log_sigmoid(_bit_sign(obs) * pl))
        f_hi.append(float(log_sigmoid(pl)))
        f_lo.append(float(log_sigmoid(-pl)))
    else:  # entropy of encoder layer `r`, unit d
        lt = trace.layers[r]
        f = float(bernoulli_entropy(lt.logits[d]))
        if r >= 1:
            layer = model.encoder.hidden[r]
            enc = lt.input_encoding
            l_hi = lt.logits[d] + layer.weights[d] * (enc.high - lt.inputs)
            l_lo = lt.logits[d] + layer.weights[d] * (enc.low - lt.inputs)
            f_hi.extend(bernoulli_entropy(l_hi).tolist())
            f_lo.extend(bernoulli_entropy(l_lo).tolist())
    return f, np.asarray(f_hi), np.asarray(f_lo)


# --- layer-sweep internals ---------------------------------------------------


def _pink_sums(vals: _ComponentValues, L: int) -> np.ndarray:
    """Mediated-only component sums per layer, accumulated bottom-up.

    G[l] collects components reachable from layer l only through its
    children: everything attached strictly below, plus the prior. Fixed
    accumulation order, like a running return.
    """
    G = np.zeros(L)
    if L >= 2:
        G[L - 2] = vals.prior.sum()
        for l in range(L - 3, -1, -1):
            G[l] = G[l + 1] + vals.recon[l + 2].sum() + vals.ent[l + 2].sum()
    return G


def _upstream_sums(vals: _ComponentValues, L: int) -> np.ndarray:
    U = np.zeros(L)
    acc = 0.0
    for l in range(L):
        acc += vals.ent[l].sum()
        if l >= 1:
            acc += vals.recon[l - 1].sum()
        U[l] = acc
    return U


def _green_realized(vals: _ComponentValues, L: int, l: int) -> float:
    total = vals.recon[l].sum()
    if l <= L - 2:
        total += vals.ent[l + 1].sum()
    if l == L - 1:
        total += vals.prior.sum()
    return float(total)


def downstream_sums(components: FunctionComponentSet, vals: _ComponentValues) -> np.ndarray:
    """Per-layer sum of all components at or below the layer's output."""
    L = components.model.n_layers
    G = _pink_sums(vals, L)
    out = np.empty(L)
    for l in range(L):
        orange = vals.recon[l + 1].sum() if l <= L - 2 else 0.0
        out[l] = _green_realized(vals, L, l) + orange + G[l]
    return out


def mediated_sums(
    components: FunctionComponentSet, vals: _ComponentValues, mode: FhncaMode
) -> np.ndarray:
    """Per-layer sums the running-average baseline should track under `mode`."""
    L = components.model.n_layers
    G = _pink_sums(vals, L)
    U = _upstream_sums(vals, L)
    out = np.zeros(max(L - 1, 0))
    for l in range(L - 1):
        total = vals.recon[l + 1].sum() + G[l]
        if mode in (FhncaMode.NO_CHILD_PRUNING, FhncaMode.FULL_REWARD):
            total += _green_realized(vals, L, l)
        if mode is FhncaMode.FULL_REWARD:
            total += U[l]
        out[l] = total
    return out


def _green_counterfactual_sums(components: FunctionComponentSet, trace: ForwardTrace,
                               vals: _ComponentValues, l: int):
    """Summed pinned-high / pinned-low values of layer l's direct-only components."""
    model = components.model
    L = model.n_layers
    lt = trace.layers[l]
    enc = model.encoder.hidden[l].encoding
    lvl = model.decoder[l]
    lam = vals.dec_logits[l]
    obs = components.x if l == 0 else trace.layers[l - 1].sample
    s = _bit_sign(obs)[:, None]
    lam_hi = lam[:, None] + lvl.weights * (enc.high - lt.sample)[None, :]
    lam_lo = lam[:, None] + lvl.weights * (enc.low - lt.sample)[None, :]
    F1 = log_sigmoid(s * lam_hi).sum(axis=0)
    F0 = log_sigmoid(s * lam_lo).sum(axis=0)
    if l <= L - 2:
        nxt = trace.layers[l + 1]
        L_hi, L_lo = counterfactual_logits(model.encoder.hidden[l + 1], nxt)
        F1 = F1 + bernoulli_entropy(L_hi).sum(axis=0)
        F0 = F0 + bernoulli_entropy(L_lo).sum(axis=0)
    if l == L - 1:
        F1 = F1 + vals.prior.sum() - vals.prior + log_sigmoid(model.prior_logits)
        F0 = F0 + vals.prior.sum() - vals.prior + log_sigmoid(-model.prior_logits)
    return F1, F0


def entropy_direct_grads(encoder: StochasticNet, trace: ForwardTrace) -> GradEstimate:
    """d f / d theta for the encoder's own entropy terms (always part of the gradient)."""
    layers = []
    for lt in trace.layers:
        coef = -lt.logits * lt.probs * (1.0 - lt.probs)
        layers.append((np.multiply.outer(coef, lt.inputs), coef))
    return GradEstimate(layers, None)


def _baseline_value(components: FunctionComponentSet, l: int) -> float:
    if components.baselines is None:
        return 0.0
    b = components.baselines[l]
    return b.value if b.initialized else 0.0


@dataclass
class _BackwardPieces:
    """Mode-independent per-layer quantities of one backward sweep."""

    vals: _ComponentValues
    G: np.ndarray  # mediated-only sums per layer
    U: np.ndarray  # upstream sums per layer
    ratio: list  # (q1 - q0)/qbar per layer with children
    r1: list
    r0: list
    F1c: list  # direct-and-mediated counterfactual sums
    F0c: list
    F1d: list  # direct-only counterfactual sums
    F0d: list


def _backward_pieces(
    encoder: StochasticNet,
    trace: ForwardTrace,
    components: FunctionComponentSet,
    vals: _ComponentValues | None = None,
) -> _BackwardPieces:
    L = components.model.n_layers
    if vals is None:
        vals = components.evaluate(trace)
    p = _BackwardPieces(
        vals, _pink_sums(vals, L), _upstream_sums(vals, L),
        [None] * L, [None] * L, [None] * L, [None] * L, [None] * L, [None] * L, [None] * L,
    )
    for l in range(L):
        lt = trace.layers[l]
        p.F1d[l], p.F0d[l] = _green_counterfactual_sums(components, trace, vals, l)
        if l <= L - 2:
            S1, S0 = pinned_log_prob_sums(encoder.hidden[l + 1], trace.layers[l + 1])
            p.ratio[l], p.r1[l], p.r0[l] = _stabilized_child_ratios(lt.probs, S1, S0)
            rec = vals.recon[l + 1]
            lam = vals.dec_logits[l + 1]
            base = rec.sum() - rec
            p.F1c[l] = base + log_sigmoid(lam)
            p.F0c[l] = base + log_sigmoid(-lam)
    return p


def _assemble_mode(
    trace: ForwardTrace,
    components: FunctionComponentSet,
    pieces: _BackwardPieces,
    mode: FhncaMode,
) -> GradEstimate:
    L = components.model.n_layers
    if mode is FhncaMode.WITH_BASELINE and not components.has_mediated():
        raise ConfigError(
            "baseline mode is undefined for a single-layer model: no mediated components"
        )
    grads = []
    for l, lt in enumerate(trace.layers):
        dsig = lt.probs * (1.0 - lt.probs)
        coef = -lt.logits * dsig  # own-entropy direct parameter gradient
        if l == L - 1:
            coef = coef + dsig * (pieces.F1d[l] - pieces.F0d[l])
        else:
            g = pieces.G[l]
            if mode is not FhncaMode.PLAIN:
                g = g - _baseline_value(components, l)
            if mode is FhncaMode.FULL_REWARD:
                g = g + pieces.U[l]
            if mode in (FhncaMode.PLAIN, FhncaMode.WITH_BASELINE):
                bracket = (
                    pieces.r1[l] * pieces.F1c[l]
                    - pieces.r0[l] * pieces.F0c[l]
                    + pieces.ratio[l] * g
                    + (pieces.F1d[l] - pieces.F0d[l])
                )
            else:
                bracket = (
                    pieces.r1[l] * (pieces.F1c[l] + pieces.F1d[l])
                    - pieces.r0[l] * (pieces.F0c[l] + pieces.F0d[l])
                    + pieces.ratio[l] * g
                )
            coef = coef + dsig * bracket
        grads.append((np.multiply.outer(coef, lt.inputs), coef))
    return GradEstimate(grads, None)


def fhnca_backward(
    encoder: StochasticNet,
    trace: ForwardTrace,
    components: FunctionComponentSet,
    mode: FhncaMode = FhncaMode.PLAIN,
    vals: _ComponentValues | None = None,
) -> GradEstimate:
    """Hindsight backward pass for a factored known objective.

    Per hidden unit the logit gradient is

        sigmoid'(l) * [ (q1*F1c - q0*F0c)/qbar + ((q1-q0)/qbar)*G + (F1d - F0d) ]

    where F*c sum counterfactuals of components that are both direct and
    mediated, F*d those of direct-only components, and G accumulates the
    mediated-only components. WITH_BASELINE centers the ratio-weighted sums
    with the per-layer running average; NO_CHILD_PRUNING routes direct-only
    components through the child ratio as well (baseline included);
    FULL_REWARD additionally credits upstream components. Direct parameter
    gradients of the entropy terms are always added. The top layer has no
    children and uses the plain counterfactual difference of its direct
    components.
    """
    model = components.model
    if encoder is not model.encoder:
        raise ConfigError("trace/components belong to a different encoder")
    pieces = _backward_pieces(encoder, trace, components, vals)
    return _assemble_mode(trace, components, pieces, mode)


def fhnca_all_modes(
    encoder: StochasticNet,
    trace: ForwardTrace,
    components: FunctionComponentSet,
    modes: list[FhncaMode],
    vals: _ComponentValues | None = None,
) -> dict[FhncaMode, GradEstimate]:
    """All requested modes from one shared set of backward pieces."""
    pieces = _backward_pieces(encoder, trace, components, vals)
    return {m: _assemble_mode(trace, components, pieces, m) for m in modes}


def reinforce_downstream(
    encoder: StochasticNet,
    trace: ForwardTrace,
    components: FunctionComponentSet,
    baselines: list[BaselineState] | None = None,
    vals: _ComponentValues | None = None,
) -> GradEstimate:
    """REINFORCE crediting each layer with its downstream component sum.

    Optional per-layer baselines hold running averages of that sum. Entropy
    direct gradients are included, as for the hindsight estimator.
    """
    if vals is None:
        vals = components.evaluate(trace)
    D = downstream_sums(components, vals)
    grads = []
    for l, lt in enumerate(trace.layers):
        b = 0.0
        if baselines is not None and baselines[l].initialized:
            b = baselines[l].value
        coef = (lt.high - lt.probs) * (D[l] - b) - lt.logits * lt.probs * (1.0 - lt.probs)
        grads.append((np.multiply.outer(coef, lt.inputs), coef))
    return GradEstimate(grads, None)


def reinforce_loo(
    model: VaeModel,
    x: np.ndarray,
    variant: RlooVariant,
    rng: np.random.Generator,
    counter: dict | None = None,
    components: FunctionComponentSet | None = None,
) -> GradEstimate:
    """Two-sample leave-one-out estimator (score part only).

    Each sample's downstream objective serves as the other's baseline:
    0.5 * [score(s1) (f1 - f2) + score(s2) (f2 - f1)] per layer.
    PARTIAL_RESAMPLE redraws each layer and regenerates everything below it
    from the redraw (layer-sample cost quadratic in depth);
    INDEPENDENT_SAMPLE uses one extra full pass. Direct parameter gradients
    are not included here; the caller adds them from the first sample.
    """
    encoder = model.encoder
    if components is None:
        components = build_elbo_components(model, x)
    L = model.n_layers

    def bump(n):
        if counter is not None:
            counter["layer_samples"] = counter.get("layer_samples", 0) + n

    trace1 = forward_sample(encoder, x, rng)
    bump(L)
    vals1 = components.evaluate(trace1)
    D1 = downstream_sums(components, vals1)

    trace2 = None
    D2_full = None
    if variant is RlooVariant.INDEPENDENT_SAMPLE:
        trace2 = forward_sample(encoder, x, rng)
        bump(L)
        D2_full = downstream_sums(components, components.evaluate(trace2))

    grads = []
    for l in range(L):
        lt1 = trace1.layers[l]
        if variant is RlooVariant.PARTIAL_RESAMPLE:
            # redraw layer l against its pass-1 parents, regenerate below
            u = rng.random(encoder.hidden[l].n_out)
            high2 = (u < lt1.probs).astype(np.float64)
            enc = encoder.hidden[l].encoding
            samples = [t.sample for t in trace1.layers]
            logits = [t.logits for t in trace1.layers]
            samples[l] = np.where(high2 == 1.0, enc.high, enc.low)
            bump(1)
            score2 = high2 - lt1.probs
            x2 = lt1.inputs
            xk = samples[l]
            for k in range(l + 1, L):
                layer = encoder.hidden[k]
                lk = layer.weights @ xk + layer.bias
                pk = sigmoid(lk)
                uk = rng.random(layer.n_out)
                hk = (uk < pk).astype(np.float64)
                samples[k] = np.where(hk == 1.0, layer.encoding.high, layer.encoding.low)
                logits[k] = lk
                xk = samples[k]
                bump(1)
            vals2 = components.evaluate_config(samples, logits)
            d2 = downstream_sums(components, vals2)[l]
        else:
            lt2 = trace2.layers[l]
            d2 = D2_full[l]
            score2 = lt2.high - lt2.probs
            x2 = lt2.inputs
        diff = D1[l] - d2
        coef1 = 0.5 * (lt1.high - lt1.probs) * diff
        coef2 = 0.5 * score2 * (-diff)
        gw = np.multiply.outer(coef1, lt1.inputs) + np.multiply.outer(coef2, x2)
        grads.append((gw, coef1 + coef2))
    return GradEstimate(grads, None)


# --- serialization -------------------------------------------------------------


def save_vae(model: VaeModel, path) -> None:
    """Flat <f8 parameter stream plus JSON sidecar, encoder then decoder then prior."""
    import json
    from pathlib import Path

    from .netcore import _sidecar_path, _STREAM_DTYPE

    path = Path(path)
    flat = np.concatenate([a.ravel() for a in model.param_arrays()]).astype(_STREAM_DTYPE)
    meta = {
        "kind": "vae_model",
        "n_visible": model.n_visible,
        "encoder": [
            {"n_out": l.n_out, "n_in": l.n_in, "encoding": l.encoding.value}
            for l in model.encoder.hidden
        ],
        "decoder": [{"n_out": l.n_out, "n_in": l.n_in} for l in model.decoder],
        "prior": int(model.prior_logits.size),
    }
    path.write_bytes(flat.tobytes())
    _sidecar_path(path).write_text(json.dumps(meta, indent=2))


def load_vae(path) -> VaeModel:
    import json
    from pathlib import Path

    from .errors import DataFormatError
    from .netcore import _sidecar_path, _STREAM_DTYPE

    path = Path(path)
    meta = json.loads(_sidecar_path(path).read_text())
    if meta.get("kind") != "vae_model":
        raise DataFormatError(f"{path} sidecar does not describe a vae_model")
    flat = np.frombuffer(path.read_bytes(), dtype=_STREAM_DTYPE)
    pos = 0

    def take(shape):
        nonlocal pos
        n = int(np.prod(shape))
        if pos + n > flat.size:
            raise DataFormatError("parameter stream too short for sidecar shapes")
        out = flat[pos : pos + n].reshape(shape).copy()
        pos += n
        return out

    hidden = [
        BernoulliLayer(take((s["n_out"], s["n_in"])), take((s["n_out"],)), Encoding(s["encoding"]))
        for s in meta["encoder"]
    ]
    decoder = [
        BernoulliLayer(take((s["n_out"], s["n_in"])), take((s["n_out"],)))
        for s in meta["decoder"]
    ]
    prior = take((meta["prior"],))
    if pos != flat.size:
        raise DataFormatError(f"parameter stream has {flat.size - pos} trailing floats")
    return VaeModel(StochasticNet(hidden, None), decoder, prior)


# --- decoder / prior training ------------------------------------------------


@dataclass
class DecoderGrads:
    levels: list[tuple[np.ndarray, np.ndarray]]
    prior: np.ndarray

    @classmethod
    def zeros_like(cls, model: VaeModel) -> "DecoderGrads":
        levels = [(np.zeros_like(l.weights), np.zeros_like(l.bias)) for l in model.decoder]
        return cls(levels, np.zeros_like(model.prior_logits))

    def arrays(self) -> list[np.ndarray]:
        out = []
        for gw, gb in self.levels:
            out += [gw, gb]
        out.append(self.prior)
        return out

    def iadd(self, other):
        for a, b in zip(self.arrays(), other.arrays()):
            a += b
        return self

    def iscale(self, c):
        for a in self.arrays():
            a *= c
        return self


def decoder_direct_grads(
    components: FunctionComponentSet, trace: ForwardTrace
) -> DecoderGrads:
    """Single-sample analytic gradients of the objective for decoder and prior.

    d log_bern(lambda; o) / d lambda = o - sigmoid(lambda) per observation.
    """
    model = components.model
    vals = components.evaluate(trace)
    levels = []
    for r, lvl in enumerate(model.decoder):
        obs = components.x if r == 0 else trace.layers[r - 1].sample
        delta = obs - sigmoid(vals.dec_logits[r])
        levels.append((np.multiply.outer(delta, trace.layers[r].sample), delta))
    prior_delta = trace.layers[-1].sample - sigmoid(model.prior_logits)
    return DecoderGrads(levels, prior_delta)
