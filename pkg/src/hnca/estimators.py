"""Reward-setting gradient estimators.

Local REINFORCE scores whatever sample a unit happened to emit. The hindsight
estimator instead credits each possible output by the relative counterfactual
probability of the unit's children having done what they did, which is an
expectation of the REINFORCE estimator conditioned on the unit's Markov
blanket; same mean, lower variance. Both run in one backward sweep whose cost
is on the order of the forward pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericError
from .netcore import (
    ForwardTrace,
    SoftmaxLayer,
    StochasticNet,
    clamp_probs,
    counterfactual_logits,
    counterfactual_sample_probs,
    pinned_log_prob_sums,
)


@dataclass
class GradEstimate:
    """Per-parameter gradients, shape-congruent with a StochasticNet.

    Supports in-place addition and scaling; minibatch reduction is a sum.
    """

    layers: list[tuple[np.ndarray, np.ndarray]]  # (d_weights, d_bias) per hidden layer
    head: tuple[np.ndarray, np.ndarray] | None = None

    @classmethod
    def zeros_like(cls, net: StochasticNet) -> "GradEstimate":
        layers = [
            (np.zeros_like(l.weights), np.zeros_like(l.bias)) for l in net.hidden
        ]
        head = None
        if net.head is not None:
            head = (np.zeros_like(net.head.weights), np.zeros_like(net.head.bias))
        return cls(layers, head)

    def arrays(self) -> list[np.ndarray]:
        out = []
        for gw, gb in self.layers:
            out += [gw, gb]
        if self.head is not None:
            out += [self.head[0], self.head[1]]
        return out

    def iadd(self, other: "GradEstimate") -> "GradEstimate":
        for a, b in zip(self.arrays(), other.arrays()):
            a += b
        return self

    def iscale(self, c: float) -> "GradEstimate":
        for a in self.arrays():
            a *= c
        return self

    def flat(self) -> np.ndarray:
        """Flatten in serialization order (layer-major, weights then bias)."""
        return np.concatenate([a.ravel() for a in self.arrays()])


@dataclass
class ChildMessages:
    """Counterfactual probabilities a child layer reports to its parents.

    q_hi[c, i] is child c's probability of its realized output had parent i
    been pinned high (q_lo symmetrically); the reward rides along unchanged.
    """

    q_hi: np.ndarray  # [n_children, n_parents]
    q_lo: np.ndarray
    reward: float


@dataclass(frozen=True)
class BaselineState:
    """Exponential moving average of the reward."""

    value: float = 0.0
    discount: float = 0.99
    initialized: bool = False


def baseline_update(state: BaselineState, r: float) -> BaselineState:
    """EMA step; the first observed value seeds the average directly."""
    if not np.isfinite(r):
        raise NumericError(f"baseline update with non-finite reward {r}")
    if not state.initialized:
        return BaselineState(float(r), state.discount, True)
    g = state.discount
    return BaselineState(g * state.value + (1.0 - g) * float(r), g, True)


def _advantage(reward: float, baseline: BaselineState | None) -> float:
    if baseline is not None and baseline.initialized:
        return reward - baseline.value
    return reward


def reinforce_grad(
    net: StochasticNet,
    trace: ForwardTrace,
    reward: float,
    baseline: BaselineState | None = None,
) -> GradEstimate:
    """Local REINFORCE: d log pi / d theta times the (centered) reward."""
    adv = _advantage(reward, baseline)
    layers = []
    for lt in trace.layers:
        coef = (lt.high - lt.probs) * adv  # score wrt the logit
        layers.append((np.multiply.outer(coef, lt.inputs), coef))
    head = None
    if net.head is not None:
        if trace.head is None:
            raise ConfigError("trace has no head slice but the net has a head")
        ht = trace.head
        delta = -ht.probs.copy()
        delta[ht.action] += 1.0
        coef = delta * adv
        head = (np.multiply.outer(coef, ht.inputs), coef)
    return GradEstimate(layers, head)


def softmax_output_backward(
    head: SoftmaxLayer,
    trace: ForwardTrace,
    reward: float,
    baseline: BaselineState | None = None,
):
    """Head update plus the messages the head owes its parents.

    The head has no children, so its own gradient slice is plain REINFORCE.
    The messages are the realized action's probability with each parent
    pinned, which needs a renormalization over all actions per parent:
    O(n_actions * n_in).
    """
    if trace.head is None:
        raise ConfigError("trace has no head slice")
    ht = trace.head
    adv = _advantage(reward, baseline)
    delta = -ht.probs.copy()
    delta[ht.action] += 1.0
    coef = delta * adv
    grad_slice = (np.multiply.outer(coef, ht.inputs), coef)

    enc = ht.input_encoding
    L_hi = ht.logits[:, None] + head.weights * (enc.high - ht.inputs)[None, :]
    L_lo = ht.logits[:, None] + head.weights * (enc.low - ht.inputs)[None, :]
    msgs = []
    for L in (L_hi, L_lo):
        e = np.exp(L - L.max(axis=0, keepdims=True))
        msgs.append(clamp_probs(e[ht.action] / e.sum(axis=0)))
    q_hi, q_lo = (m[None, :] for m in msgs)  # one child (the head) per parent
    return grad_slice, ChildMessages(q_hi, q_lo, reward)


def _head_log_messages(head: SoftmaxLayer, ht) -> tuple[np.ndarray, np.ndarray]:
    """log realized-action probability per pinned parent, flip side only.

    Pinning a parent at its realized value leaves the action distribution
    untouched, so that side is the realized log probability for every parent;
    only the flipped-value logits need renormalizing over actions.
    """
    from .netcore import LOG_CLAMP_HI, LOG_CLAMP_LO

    enc = ht.input_encoding
    z = ht.logits - ht.logits.max()
    log_realized = z[ht.action] - np.log(np.exp(z).sum())
    flip = np.where(ht.inputs == enc.high, enc.low, enc.high)
    L = ht.logits[:, None] + head.weights * (flip - ht.inputs)[None, :]
    L -= L.max(axis=0, keepdims=True)
    np.exp(L, out=L)
    with np.errstate(divide="ignore"):  # a fully dominated action may underflow
        log_flip = np.log(L[ht.action]) - np.log(L.sum(axis=0))
    hi_is_flip = ht.inputs != enc.high
    S_hi = np.where(hi_is_flip, log_flip, log_realized)
    S_lo = np.where(hi_is_flip, log_realized, log_flip)
    return (
        np.clip(S_hi, LOG_CLAMP_LO, LOG_CLAMP_HI),
        np.clip(S_lo, LOG_CLAMP_LO, LOG_CLAMP_HI),
    )


def _rank_one(coef, x):
    """coef outer x through the BLAS rank-1 update; beats ufunc outer clearly."""
    from scipy.linalg.blas import dger

    out = np.zeros((coef.size, x.size), order="F")
    return dger(1.0, coef, x, a=out, overwrite_a=1)


def _stabilized_child_ratios(probs, S_hi, S_lo):
    """(q1 - q0)/qbar and q1/qbar, q0/qbar from summed log child probabilities.

    A shared max is subtracted before exponentiation; qbar = p q1 + (1-p) q0
    uses the clamped firing probability since it sits in a denominator.
    """
    m = np.maximum(S_hi, S_lo)
    e1 = np.exp(S_hi - m)
    e0 = np.exp(S_lo - m)
    pc = clamp_probs(probs)
    qbar = pc * e1 + (1.0 - pc) * e0
    if not np.isfinite(qbar).all() or (qbar <= 0.0).any():
        raise NumericError("child probability normalizer underflowed")
    return (e1 - e0) / qbar, e1 / qbar, e0 / qbar


def hnca_backward(
    net: StochasticNet,
    trace: ForwardTrace,
    reward: float,
    baseline: BaselineState | None = None,
) -> GradEstimate:
    """Hindsight message-passing backward pass for the bandit setting.

    The head (which has no children) keeps the REINFORCE rule and sends its
    counterfactual action probabilities down. Each hidden layer folds its
    children's messages into per-unit products q1, q0, forms the ratio
    (q1 - q0)/qbar, and scales sigmoid'(logit) times its input by that ratio
    and the centered reward. Its own counterfactual sample probabilities are
    the messages for the layer below.
    """
    if net.head is None or trace.head is None:
        raise ConfigError("hindsight bandit backward requires a softmax head")
    adv = _advantage(reward, baseline)
    grads: list = [None] * len(net.hidden)

    ht = trace.head
    delta = -ht.probs.copy()
    delta[ht.action] += 1.0
    coef = delta * adv
    head_slice = (_rank_one(coef, ht.inputs), coef)
    S_hi, S_lo = _head_log_messages(net.head, ht)

    for k in range(len(net.hidden) - 1, -1, -1):
        lt = trace.layers[k]
        ratio, _, _ = _stabilized_child_ratios(lt.probs, S_hi, S_lo)
        coef = lt.probs * (1.0 - lt.probs) * ratio * adv
        grads[k] = (_rank_one(coef, lt.inputs), coef)
        if k > 0:
            S_hi, S_lo = pinned_log_prob_sums(net.hidden[k], lt)

    return GradEstimate(grads, head_slice)


def child_messages(layer, lt, reward: float) -> ChildMessages:
    """Full-precision messages of one Bernoulli layer to its parents."""
    L_hi, L_lo = counterfactual_logits(layer, lt)
    q_hi, q_lo = counterfactual_sample_probs(layer, lt, L_hi, L_lo)
    return ChildMessages(q_hi, q_lo, reward)
