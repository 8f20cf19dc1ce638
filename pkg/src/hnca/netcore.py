"""Networks of linear-sigmoid Bernoulli units with an optional softmax head.

Holds the forward sampling pass and the constant-time counterfactual
machinery (pin one parent high or low, get the new logit or realized-sample
probability by an incremental update instead of a fresh dot product) that
every gradient estimator in this package is built on.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataFormatError, NumericError

# Probabilities entering logarithms or ratio denominators are clamped to
# [PROB_CLAMP, 1 - PROB_CLAMP]; raw probabilities elsewhere are untouched.
PROB_CLAMP = 1e-7

LOG_CLAMP_LO = float(np.log(PROB_CLAMP))
LOG_CLAMP_HI = float(np.log1p(-PROB_CLAMP))


class Encoding(Enum):
    """Two-element sample alphabet emitted by a Bernoulli layer."""

    ZERO_ONE = "zero_one"
    PLUS_MINUS_ONE = "plus_minus_one"

    @property
    def high(self) -> float:
        return 1.0

    @property
    def low(self) -> float:
        return 0.0 if self is Encoding.ZERO_ONE else -1.0


def sigmoid(z):
    """Stable logistic: 1/(1+e^-z) for z >= 0, e^z/(1+e^z) otherwise."""
    z = np.asarray(z)
    e = np.exp(-np.abs(z))
    return np.where(z >= 0.0, 1.0 / (1.0 + e), e / (1.0 + e))


def log_sigmoid(z):
    """log(sigmoid(z)) = min(z, 0) - log1p(e^-|z|), overflow-free."""
    z = np.asarray(z)
    return np.minimum(z, 0.0) - np.log1p(np.exp(-np.abs(z)))


def softplus(z):
    """log(1 + e^z) = max(z, 0) + log1p(e^-|z|), overflow-free."""
    z = np.asarray(z)
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def bernoulli_entropy(logits):
    """Entropy in nats of Bernoulli(sigmoid(logit)): softplus(z) - z sigmoid(z)."""
    z = np.asarray(logits)
    return softplus(z) - z * sigmoid(z)


def clamp_probs(p):
    return np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)


# RNG stream purposes; a stream is keyed by (seed, epoch, example index,
# purpose) so batch composition and worker scheduling cannot change results.
STREAM_FORWARD = 0
STREAM_BINARIZE = 1
STREAM_SHUFFLE = 2
STREAM_TEST = 3
STREAM_INIT = 4


def example_stream(seed: int, epoch: int, index: int, purpose: int = STREAM_FORWARD):
    """Counter-based per-example random stream."""
    ss = np.random.SeedSequence(entropy=[int(seed), int(epoch), int(index), int(purpose)])
    return np.random.Generator(np.random.Philox(ss))


@dataclass
class BernoulliLayer:
    """Linear-sigmoid stochastic layer: P(high) = sigmoid(W x + b)."""

    weights: np.ndarray  # [n_out, n_in]
    bias: np.ndarray  # [n_out]
    encoding: Encoding = Encoding.ZERO_ONE

    def __post_init__(self):
        self.weights = np.ascontiguousarray(self.weights, dtype=np.float64)
        self.bias = np.ascontiguousarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2:
            raise ConfigError("layer weights must be a 2-d matrix")
        if self.bias.shape != (self.weights.shape[0],):
            raise ConfigError(
                f"bias shape {self.bias.shape} does not match {self.weights.shape[0]} output units"
            )
        if min(self.weights.shape) < 1:
            raise ConfigError("layer must have at least one input and one output")
        if not (np.isfinite(self.weights).all() and np.isfinite(self.bias).all()):
            raise ConfigError("layer parameters must be finite")

    @property
    def n_out(self) -> int:
        return self.weights.shape[0]

    @property
    def n_in(self) -> int:
        return self.weights.shape[1]


@dataclass
class SoftmaxLayer:
    """Linear-softmax action head."""

    weights: np.ndarray  # [n_actions, n_in]
    bias: np.ndarray  # [n_actions]

    def __post_init__(self):
        self.weights = np.ascontiguousarray(self.weights, dtype=np.float64)
        self.bias = np.ascontiguousarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise ConfigError("softmax head has inconsistent shapes")
        if self.weights.shape[0] < 2:
            raise ConfigError("softmax head needs at least two actions")
        if not (np.isfinite(self.weights).all() and np.isfinite(self.bias).all()):
            raise ConfigError("head parameters must be finite")

    @property
    def n_actions(self) -> int:
        return self.weights.shape[0]

    @property
    def n_in(self) -> int:
        return self.weights.shape[1]


@dataclass
class StochasticNet:
    """Feedforward stack of Bernoulli layers, optionally topped by a softmax head.

    Parents of layer k+1 are exactly the units of layer k (the context vector
    for layer 0), so the graph is acyclic by construction. The net is treated
    as immutable during an estimation step; parameter mutation happens only in
    the optimizer.
    """

    hidden: list[BernoulliLayer]
    head: SoftmaxLayer | None = None

    def __post_init__(self):
        if not self.hidden:
            raise ConfigError("network needs at least one Bernoulli layer")
        for k in range(1, len(self.hidden)):
            if self.hidden[k].n_in != self.hidden[k - 1].n_out:
                raise ConfigError(
                    f"layer {k} expects {self.hidden[k].n_in} inputs, "
                    f"layer {k - 1} emits {self.hidden[k - 1].n_out}"
                )
        if self.head is not None and self.head.n_in != self.hidden[-1].n_out:
            raise ConfigError("head input width does not match the last hidden layer")

    @property
    def context_dim(self) -> int:
        return self.hidden[0].n_in

    @property
    def widths(self) -> list[int]:
        return [layer.n_out for layer in self.hidden]

    @property
    def n_units(self) -> int:
        """Stochastic unit count; the head counts as one unit."""
        return sum(self.widths) + (1 if self.head is not None else 0)

    def input_encoding(self, k: int) -> Encoding:
        """Alphabet of layer k's inputs (binary context feeds layer 0)."""
        return Encoding.ZERO_ONE if k == 0 else self.hidden[k - 1].encoding

    def param_arrays(self) -> list[np.ndarray]:
        """All trainable arrays in serialization order."""
        out = []
        for layer in self.hidden:
            out += [layer.weights, layer.bias]
        if self.head is not None:
            out += [self.head.weights, self.head.bias]
        return out


def init_net(
    context_dim: int,
    widths: list[int],
    n_actions: int | None,
    encoding: Encoding,
    rng: np.random.Generator,
) -> StochasticNet:
    """Fan-in scaled uniform weights on [-1/sqrt(n_in), 1/sqrt(n_in)], zero biases."""
    hidden = []
    n_in = context_dim
    for w in widths:
        bound = 1.0 / np.sqrt(n_in)
        hidden.append(
            BernoulliLayer(rng.uniform(-bound, bound, size=(w, n_in)), np.zeros(w), encoding)
        )
        n_in = w
    head = None
    if n_actions is not None:
        bound = 1.0 / np.sqrt(n_in)
        head = SoftmaxLayer(rng.uniform(-bound, bound, size=(n_actions, n_in)), np.zeros(n_actions))
    return StochasticNet(hidden, head)


@dataclass
class LayerTrace:
    """One layer's slice of a forward pass."""

    inputs: np.ndarray  # parent values, in the parent alphabet
    logits: np.ndarray
    probs: np.ndarray  # probability of the high symbol
    sample: np.ndarray  # emitted values, in this layer's alphabet
    high: np.ndarray  # 1.0 where sample == high symbol
    input_encoding: Encoding


@dataclass
class HeadTrace:
    inputs: np.ndarray
    logits: np.ndarray
    probs: np.ndarray
    action: int
    input_encoding: Encoding


@dataclass
class ForwardTrace:
    layers: list[LayerTrace]
    head: HeadTrace | None = None


def _softmax(logits):
    e = np.exp(logits - logits.max())
    return e / e.sum()


def forward_sample(
    net: StochasticNet,
    context: np.ndarray,
    rng: np.random.Generator,
    prob_override: dict[int, np.ndarray] | None = None,
) -> ForwardTrace:
    """Sample one configuration of the whole network.

    Each unit consumes exactly one uniform draw through its inverse CDF
    (high iff u < p), in layer-major unit-minor order; this is the
    reproducibility contract. `prob_override` is a test hook mapping layer
    index to a firing probability that replaces sigmoid(logits), so tests
    can clamp units to degenerate distributions.
    """
    context = np.asarray(context, dtype=np.float64)
    if context.shape != (net.context_dim,):
        raise ConfigError(
            f"context has shape {context.shape}, layer 0 expects ({net.context_dim},)"
        )
    x = context
    layers = []
    for k, layer in enumerate(net.hidden):
        logits = layer.weights @ x + layer.bias
        if not np.isfinite(logits).all():
            bad = int(np.flatnonzero(~np.isfinite(logits))[0])
            raise NumericError(f"non-finite logit at layer {k}, unit {bad}")
        probs = sigmoid(logits)
        if prob_override is not None and k in prob_override:
            probs = np.broadcast_to(np.asarray(prob_override[k], dtype=np.float64), logits.shape)
        u = rng.random(layer.n_out)
        high = (u < probs).astype(np.float64)
        enc = layer.encoding
        sample = np.where(high == 1.0, enc.high, enc.low)
        layers.append(LayerTrace(x, logits, probs, sample, high, net.input_encoding(k)))
        x = sample
    head = None
    if net.head is not None:
        logits = net.head.weights @ x + net.head.bias
        if not np.isfinite(logits).all():
            bad = int(np.flatnonzero(~np.isfinite(logits))[0])
            raise NumericError(f"non-finite logit at head, action {bad}")
        probs = _softmax(logits)
        u = rng.random()
        action = int(min(np.searchsorted(np.cumsum(probs), u, side="right"), net.head.n_actions - 1))
        head = HeadTrace(x, logits, probs, action, net.hidden[-1].encoding)
    return ForwardTrace(layers, head)


def counterfactual_logits(layer: BernoulliLayer, lt: LayerTrace):
    """Logit of every unit with each single parent pinned high / low.

    L_hi[j, i] = l[j] + W[j, i] * (v_hi - x[i]) and symmetrically for lo,
    where (v_hi, v_lo) is the parent alphabet. Equals a from-scratch dot
    product with x[i] replaced, up to one rounding of the incremental update.
    """
    enc = lt.input_encoding
    L_hi = lt.logits[:, None] + layer.weights * (enc.high - lt.inputs)[None, :]
    L_lo = lt.logits[:, None] + layer.weights * (enc.low - lt.inputs)[None, :]
    return L_hi, L_lo


def counterfactual_sample_probs(layer: BernoulliLayer, lt: LayerTrace, L_hi, L_lo):
    """Probability of each unit's realized sample with one parent pinned.

    Entries are clamped into (0, 1); downstream consumers form products and
    ratios of these.
    """
    s = 2.0 * lt.high - 1.0  # +1 if the realized sample was the high symbol
    P_hi = sigmoid(L_hi * s[:, None])
    P_lo = sigmoid(L_lo * s[:, None])
    return clamp_probs(P_hi), clamp_probs(P_lo)


# Chunk length for float32 partial products of the (1 + e) terms: entries are
# capped at 1 + 1/PROB_CLAMP, so chunks of 4 stay far inside float32 range.
_PROD_CHUNK = 4


def _chunked_log_product(P):
    """log of the column-wise product of P, via partial products.

    Equivalent to summing log-probabilities but needs one log per chunk
    instead of one per entry; the shared-max stabilization downstream is
    unaffected.
    """
    n = P.shape[0]
    if n <= _PROD_CHUNK:
        return np.log(P.prod(axis=0)).astype(np.float64)
    pad = (-n) % _PROD_CHUNK
    if pad:
        P = np.concatenate([P, np.ones((pad, P.shape[1]), dtype=P.dtype)])
    partial = P.reshape(-1, _PROD_CHUNK, P.shape[1]).prod(axis=1)
    return np.log(partial).sum(axis=0, dtype=np.float64)


def _neg_log_one_plus_exp_colsums(Z):
    """-sum_rows log(1 + e^Z) for float32 Z, destroying Z.

    The per-entry probability clamp is applied as e <- min(e, 1/PROB_CLAMP),
    which pins 1/(1 + e) at PROB_CLAMP; values this deep in the tail only
    arise from saturated units. Partial products of (1 + e) over short chunks
    need one log per chunk instead of one per entry.
    """
    np.exp(Z, out=Z)
    np.minimum(Z, 1.0 / PROB_CLAMP, out=Z)
    Z += 1.0
    n = Z.shape[0]
    if n <= _PROD_CHUNK:
        return -np.log(Z.prod(axis=0, dtype=np.float64))
    pad = (-n) % _PROD_CHUNK
    if pad:
        Z = np.concatenate([Z, np.ones((pad, Z.shape[1]), dtype=Z.dtype)])
    partial = Z.reshape(-1, _PROD_CHUNK, Z.shape[1]).prod(axis=1)
    return -np.log(partial).sum(axis=0, dtype=np.float64)


def pinned_log_prob_sums(layer: BernoulliLayer, lt: LayerTrace):
    """Per-parent sums of log counterfactual realized-sample probabilities.

    Returns (S_hi, S_lo) with S_hi[i] = sum_j log P(unit j emits its realized
    sample | parent i pinned high). This is the backward-pass hot spot:
    pinning a parent at its realized value cannot change any child logit, so
    that side's sum is the realized-sample log probability shared by all
    parents; only the flipped-value matrix is computed, as
    -sum log(1 + e^z) with z = -s * counterfactual logit, in float32 whose
    rounding sits far below sampling noise.
    """
    enc = lt.input_encoding
    s = 2.0 * lt.high - 1.0
    base32 = (lt.logits * s).astype(np.float32)
    # realized-sample log probability, identical for every pinned-in-place
    # parent; computed through the very same kernel as the flipped matrix so
    # that an insensitive child gives S_hi == S_lo bit for bit
    realized_total = _neg_log_one_plus_exp_colsums(-base32[:, None])[0]

    flip = np.where(lt.inputs == enc.high, enc.low, enc.high)
    Z = layer.weights.astype(np.float32)
    Z *= (lt.inputs - flip).astype(np.float32)[None, :]
    Z *= s.astype(np.float32)[:, None]
    Z -= base32[:, None]
    flipped = _neg_log_one_plus_exp_colsums(Z)

    hi_is_flip = lt.inputs != enc.high
    S_hi = np.where(hi_is_flip, flipped, realized_total)
    S_lo = np.where(hi_is_flip, realized_total, flipped)
    return S_hi, S_lo


# --- parameter serialization ------------------------------------------------

_STREAM_DTYPE = "<f8"  # flat little-endian 64-bit floats


def _sidecar_path(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def save_net(net: StochasticNet, path) -> None:
    """Write parameters as a flat <f8 stream plus a JSON shape sidecar."""
    path = Path(path)
    flat = np.concatenate([a.ravel() for a in net.param_arrays()]).astype(_STREAM_DTYPE)
    meta = {
        "kind": "bandit_net",
        "context_dim": net.context_dim,
        "layers": [
            {"n_out": l.n_out, "n_in": l.n_in, "encoding": l.encoding.value} for l in net.hidden
        ],
        "head": None
        if net.head is None
        else {"n_actions": net.head.n_actions, "n_in": net.head.n_in},
    }
    path.write_bytes(flat.tobytes())
    _sidecar_path(path).write_text(json.dumps(meta, indent=2))


def load_net(path) -> StochasticNet:
    path = Path(path)
    try:
        meta = json.loads(_sidecar_path(path).read_text())
    except json.JSONDecodeError as e:
        raise DataFormatError(f"corrupt sidecar for {path}: {e}") from e
    flat = np.frombuffer(path.read_bytes(), dtype=_STREAM_DTYPE)
    pos = 0

    def take(shape):
        nonlocal pos
        n = int(np.prod(shape))
        if pos + n > flat.size:
            raise DataFormatError(
                f"parameter stream too short: need {pos + n} floats, have {flat.size}"
            )
        out = flat[pos : pos + n].reshape(shape).copy()
        pos += n
        return out

    hidden = []
    for entry in meta["layers"]:
        w = take((entry["n_out"], entry["n_in"]))
        b = take((entry["n_out"],))
        hidden.append(BernoulliLayer(w, b, Encoding(entry["encoding"])))
    head = None
    if meta.get("head"):
        hs = meta["head"]
        head = SoftmaxLayer(take((hs["n_actions"], hs["n_in"])), take((hs["n_actions"],)))
    if pos != flat.size:
        raise DataFormatError(f"parameter stream has {flat.size - pos} trailing floats")
    return StochasticNet(hidden, head)
