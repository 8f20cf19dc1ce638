"""Experiment drivers: IDX data ingestion, dynamic binarization, Adam,
the contextual-bandit and discrete-VAE training loops, and multi-sample
evaluation bounds.

Every run is a pure function of (config, seed): per-example random streams
are keyed by (seed, epoch, example index, purpose), so batch composition,
logging cadence, and evaluation order cannot perturb results.
"""

from __future__ import annotations

import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from . import batched
from .errors import ConfigError, DataFormatError
from .estimators import BaselineState, baseline_update
from .fhnca import FhncaMode, RlooVariant, VaeModel, build_elbo_components, init_vae
from .netcore import (
    STREAM_BINARIZE,
    STREAM_FORWARD,
    STREAM_INIT,
    STREAM_SHUFFLE,
    STREAM_TEST,
    StochasticNet,
    example_stream,
    forward_sample,
    init_net,
    sigmoid,
)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    images: np.ndarray  # [n, 28, 28] uint8 intensities
    labels: np.ndarray  # [n] uint8
    split: str

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise DataFormatError(
                f"{self.images.shape[0]} images vs {self.labels.shape[0]} labels"
            )
        if self.labels.size and self.labels.max() >= 10:
            raise DataFormatError("labels must be < 10")


def read_idx(path) -> np.ndarray:
    """Parse one big-endian IDX file (images or labels) to a uint8 array."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 8:
        raise DataFormatError(f"{path}: truncated header, {len(raw)} bytes at offset 0")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic == IDX_IMAGES_MAGIC:
        ndim = 3
    elif magic == IDX_LABELS_MAGIC:
        ndim = 1
    else:
        raise DataFormatError(f"{path}: bad magic 0x{magic:08x} at offset 0")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataFormatError(f"{path}: truncated dimensions at offset {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = int(np.prod(dims))
    payload = raw[header:]
    if len(payload) != expected:
        raise DataFormatError(
            f"{path}: payload of {len(payload)} bytes at offset {header}, expected {expected}"
        )
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims).copy()


def write_idx(path, array: np.ndarray) -> None:
    """Serialize a uint8 array back to IDX; read_idx round-trips bit-exactly."""
    array = np.ascontiguousarray(array, dtype=np.uint8)
    if array.ndim == 3:
        magic = IDX_IMAGES_MAGIC
    elif array.ndim == 1:
        magic = IDX_LABELS_MAGIC
    else:
        raise ConfigError(f"IDX writer handles 1-d labels or 3-d images, not {array.ndim}-d")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.tobytes())


def load_idx(images_path, labels_path, split: str) -> Dataset:
    """Load an images/labels IDX pair into a Dataset."""
    return Dataset(read_idx(images_path), read_idx(labels_path), split)


def dynamic_binarize(images: np.ndarray, epoch: int, seed: int, indices=None) -> np.ndarray:
    """Pixel -> 1 with probability intensity/255, resampled per epoch.

    `indices` are the examples' absolute dataset positions, which key their
    streams; defaults to 0..n-1.
    """
    flat = np.asarray(images, dtype=np.float64).reshape(len(images), -1) / 255.0
    if indices is None:
        indices = np.arange(len(images))
    out = np.empty_like(flat)
    for row, idx in enumerate(indices):
        u = example_stream(seed, epoch, int(idx), STREAM_BINARIZE).random(flat.shape[1])
        out[row] = (u < flat[row]).astype(np.float64)
    return out


def synthetic_dataset(n: int, seed: int, n_classes: int = 10, side: int = 28):
    """Class-structured stand-in for MNIST-sized data.

    Each class is a smooth random intensity prototype; examples jitter the
    prototype multiplicatively and add pixel noise. Returns uint8 images
    [n, side, side] and uint8 labels.
    """
    from scipy.ndimage import gaussian_filter

    rng = np.random.default_rng(seed)
    protos = []
    for _ in range(n_classes):
        base = gaussian_filter(rng.random((side, side)), sigma=3.0)
        base = (base - base.min()) / (base.max() - base.min() + 1e-12)
        protos.append(base)
    labels = rng.integers(0, n_classes, size=n).astype(np.uint8)
    images = np.empty((n, side, side), dtype=np.uint8)
    for i in range(n):
        img = protos[labels[i]] * rng.uniform(0.7, 1.0)
        img = img + rng.normal(scale=0.10, size=img.shape)
        images[i] = np.clip(img * 255.0, 0, 255).astype(np.uint8)
    return images, labels


# --- Adam ---------------------------------------------------------------------


@dataclass
class AdamState:
    """Bias-corrected first/second moment accumulators, ascent direction."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params, beta1=0.9, beta2=0.999, eps=1e-8) -> "AdamState":
        return cls(
            [np.zeros_like(p) for p in params],
            [np.zeros_like(p) for p in params],
            0,
            beta1,
            beta2,
            eps,
        )


def adam_step(params, grads, state: AdamState, lr: float) -> AdamState:
    """One ascent step, updating parameters in place."""
    if len(params) != len(state.m) or len(params) != len(grads):
        raise ConfigError("parameter/gradient/state length mismatch")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ConfigError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p += lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


# --- metrics ------------------------------------------------------------------

METRIC_COLUMNS = ("step", "epoch", "train_metric", "test_metric", "ln_grad_var", "wall_ms")


@dataclass
class RunMetrics:
    rows: list = field(default_factory=list)

    def log(self, step, epoch, train_metric, test_metric, ln_grad_var, wall_ms):
        self.rows.append(
            (int(step), int(epoch), float(train_metric), float(test_metric),
             float(ln_grad_var), float(wall_ms))
        )

    def to_csv(self) -> str:
        lines = [",".join(METRIC_COLUMNS)]
        for r in self.rows:
            lines.append(",".join([str(r[0]), str(r[1])] + [repr(v) for v in r[2:]]))
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_csv())

    def column(self, name: str) -> np.ndarray:
        i = METRIC_COLUMNS.index(name)
        return np.array([r[i] for r in self.rows])


BANDIT_ESTIMATORS = ("reinforce", "reinforce-b", "hnca", "hnca-b")
VAE_ESTIMATORS = (
    "reinforce",
    "reinforce-b",
    "fhnca",
    "fhnca-b",
    "fhnca-noprune",
    "fhnca-fullreward",
    "rloo",
    "rloo-is",
)

_VAE_MODES = {
    "fhnca": FhncaMode.PLAIN,
    "fhnca-b": FhncaMode.WITH_BASELINE,
    "fhnca-noprune": FhncaMode.NO_CHILD_PRUNING,
    "fhnca-fullreward": FhncaMode.FULL_REWARD,
}


def _forward_uniform_block(net, seed, epoch, indices):
    nu = batched.uniforms_needed(net)
    U = np.empty((len(indices), nu))
    for row, idx in enumerate(indices):
        U[row] = example_stream(seed, epoch, int(idx), STREAM_FORWARD).random(nu)
    return U


# --- bandit loop ----------------------------------------------------------------


def bandit_test_accuracy(net, images, epoch, seed, labels, n_passes: int = 1) -> float:
    """Accuracy indicator averaged over examples and sampled passes."""
    total = 0.0
    nu = batched.uniforms_needed(net)
    n = len(images)
    X = np.empty((n, net.context_dim))
    U = np.empty((n, nu))
    flat = np.asarray(images, dtype=np.float64).reshape(n, -1) / 255.0
    for p in range(n_passes):
        for i in range(n):
            stream = example_stream(seed, epoch, i, STREAM_TEST + p)
            X[i] = (stream.random(flat.shape[1]) < flat[i]).astype(np.float64)
            U[i] = stream.random(nu)
        bt = batched.forward_batch(net, X, U)
        total += float((bt.actions == labels).mean())
    return total / n_passes


def bandit_train_arrays(
    net: StochasticNet,
    train_images,
    train_labels,
    test_images,
    test_labels,
    estimator: str,
    learning_rate: float,
    batch_size: int,
    epochs: int,
    seed: int,
    baseline_discount: float = 0.99,
    test_samples: int = 1,
    log_every: int = 100,
) -> RunMetrics:
    """Contextual-bandit training on intensity images; reward 1 iff correct.

    Mutates `net` in place and returns the metric rows. One Adam step per
    batch on the batch-mean gradient; the shared moving-average baseline is
    updated once per batch with the batch-mean reward.
    """
    if estimator not in BANDIT_ESTIMATORS:
        raise ConfigError(f"estimator '{estimator}' not in {BANDIT_ESTIMATORS}")
    if net.head is None:
        raise ConfigError(f"estimator '{estimator}' requires a softmax head")
    base_kind = estimator[:-2] if estimator.endswith("-b") else estimator
    baseline = BaselineState(discount=baseline_discount) if estimator.endswith("-b") else None

    params = net.param_arrays()
    adam = AdamState.for_params(params)
    metrics = RunMetrics()
    n = len(train_images)
    step = 0
    t0 = time.perf_counter()
    reward_acc, lnvar_acc, acc_count = 0.0, 0.0, 0

    def flush(epoch):
        test_acc = bandit_test_accuracy(net, test_images, epoch, seed, test_labels, test_samples)
        wall_ms = (time.perf_counter() - t0) * 1e3
        metrics.log(step, epoch, reward_acc / acc_count, test_acc, lnvar_acc / acc_count, wall_ms)

    for epoch in range(epochs):
        order = example_stream(seed, epoch, 0, STREAM_SHUFFLE).permutation(n)
        for lo in range(0, n - batch_size + 1, batch_size):
            idx = order[lo : lo + batch_size]
            X = dynamic_binarize(train_images[idx], epoch, seed, indices=idx)
            U = _forward_uniform_block(net, seed, epoch, idx)
            bt = batched.forward_batch(net, X, U)
            rewards = (bt.actions == train_labels[idx]).astype(np.float64)
            coefs, head_coef = batched.bandit_coefs(net, bt, rewards, base_kind, baseline)
            inputs = [lt.inputs for lt in bt.layers]
            grad = batched.grad_from_coefs(coefs, inputs, head_coef, bt.head_inputs)
            grad.iscale(1.0 / batch_size)
            var = batched.mean_gradient_variance(coefs, inputs, head_coef, bt.head_inputs)
            adam_step(params, grad.arrays(), adam, learning_rate)
            if baseline is not None:
                baseline = baseline_update(baseline, float(rewards.mean()))
            step += 1
            reward_acc += float(rewards.mean())
            lnvar_acc += float(np.log(max(var, 1e-300)))
            acc_count += 1
            if step % log_every == 0:
                flush(epoch)
                reward_acc, lnvar_acc, acc_count = 0.0, 0.0, 0
    if acc_count:
        flush(epochs - 1)
    return metrics


# --- VAE loop -------------------------------------------------------------------


def _vae_term_lists(model, X, bt, vals, estimator, enc_baselines, rng):
    """Per-layer [(coef, inputs), ...] gradient terms for the chosen estimator."""
    inputs = [lt.inputs for lt in bt.layers]
    if estimator in _VAE_MODES:
        mode = _VAE_MODES[estimator]
        bl = enc_baselines if estimator != "fhnca" else None
        coefs = batched.vae_mode_coefs(model, X, bt, [mode], vals=vals, baselines=bl)[mode]
        return [[(c, x)] for c, x in zip(coefs, inputs)]
    if estimator in ("reinforce", "reinforce-b"):
        bl = enc_baselines if estimator == "reinforce-b" else None
        coefs = batched.vae_reinforce_coefs(model, bt, vals, baselines=bl)
        return [[(c, x)] for c, x in zip(coefs, inputs)]
    if estimator in ("rloo", "rloo-is"):
        variant = RlooVariant.PARTIAL_RESAMPLE if estimator == "rloo" else RlooVariant.INDEPENDENT_SAMPLE
        coefs, extra = batched.vae_rloo_coefs(model, X, bt, vals, variant, rng)
        direct = [-lt.logits * lt.probs * (1.0 - lt.probs) for lt in bt.layers]
        terms = [[(c + d, x)] for c, d, x in zip(coefs, direct, inputs)]
        if extra is not None:
            for l, (c2, x2) in enumerate(extra):
                terms[l].append((c2, x2))
        return terms
    raise ConfigError(f"estimator '{estimator}' not in {VAE_ESTIMATORS}")


def _mean_variance_terms(layer_terms) -> float:
    """Mean per-parameter variance when per-example grads are sums of rank-1 terms."""
    total, count, n = 0.0, 0, None
    for terms in layer_terms:
        n = terms[0][0].shape[0]
        s1w = 0.0
        s2w = 0.0
        s1b = 0.0
        s2b = 0.0
        for i, (c, x) in enumerate(terms):
            s1w = s1w + c.T @ x
            s2w = s2w + (c * c).T @ (x * x)
            s1b = s1b + c.sum(axis=0)
            s2b = s2b + (c * c).sum(axis=0)
            for c2, x2 in terms[i + 1 :]:
                s2w = s2w + 2.0 * (c * c2).T @ (x * x2)
                s2b = s2b + 2.0 * (c * c2).sum(axis=0)
        total += ((s2w - s1w**2 / n) / (n - 1)).sum() + ((s2b - s1b**2 / n) / (n - 1)).sum()
        count += s1w.size + s1b.size
    return float(total / count)


def _grad_from_terms(layer_terms) -> list[tuple[np.ndarray, np.ndarray]]:
    out = []
    for terms in layer_terms:
        gw = sum(c.T @ x for c, x in terms)
        gb = sum(c.sum(axis=0) for c, x in terms)
        out.append((gw, gb))
    return out


def vae_train_arrays(
    model: VaeModel,
    train_images,
    test_images,
    estimator: str,
    learning_rate: float,
    batch_size: int,
    epochs: int,
    seed: int,
    baseline_discount: float = 0.99,
    log_every: int = 100,
) -> RunMetrics:
    """ELBO ascent on dynamically binarized images.

    The chosen estimator drives the encoder; decoder, prior, and entropy
    terms always train on single-sample analytic gradients. Per-layer
    baselines (where the estimator uses them) are updated once per batch
    with batch means. The logged gradient variance covers encoder
    parameters only.
    """
    if estimator not in VAE_ESTIMATORS:
        raise ConfigError(f"estimator '{estimator}' not in {VAE_ESTIMATORS}")
    L = model.n_layers
    if estimator == "fhnca-b" and L < 2:
        raise ConfigError("fhnca-b needs at least two latent layers: no mediated components")

    uses_mediated_baseline = estimator in ("fhnca-b", "fhnca-noprune", "fhnca-fullreward")
    enc_baselines = None
    if uses_mediated_baseline:
        enc_baselines = [BaselineState(discount=baseline_discount) for _ in range(max(L - 1, 0))]
    elif estimator == "reinforce-b":
        enc_baselines = [BaselineState(discount=baseline_discount) for _ in range(L)]

    params = model.param_arrays()
    adam = AdamState.for_params(params)
    metrics = RunMetrics()
    n = len(train_images)
    nu = sum(model.encoder.widths)
    step = 0
    t0 = time.perf_counter()
    elbo_acc, lnvar_acc, acc_count = 0.0, 0.0, 0

    def test_elbo(epoch) -> float:
        total = 0.0
        m = len(test_images)
        flat = np.asarray(test_images, dtype=np.float64).reshape(m, -1) / 255.0
        X = np.empty((m, model.n_visible))
        U = np.empty((m, nu))
        for i in range(m):
            stream = example_stream(seed, epoch, i, STREAM_TEST)
            X[i] = (stream.random(flat.shape[1]) < flat[i]).astype(np.float64)
            U[i] = stream.random(nu)
        bt = batched.forward_batch(model.encoder, X, U)
        samples = [lt.sample for lt in bt.layers]
        logits = [lt.logits for lt in bt.layers]
        vals = batched.evaluate_components_batch(model, X, samples, logits)
        return float(vals.elbo().mean())

    def flush(epoch):
        wall_ms = (time.perf_counter() - t0) * 1e3
        metrics.log(step, epoch, elbo_acc / acc_count, test_elbo(epoch), lnvar_acc / acc_count, wall_ms)

    rloo_rng = np.random.default_rng(np.random.SeedSequence([seed, 0xB10C]))
    for epoch in range(epochs):
        order = example_stream(seed, epoch, 0, STREAM_SHUFFLE).permutation(n)
        for lo in range(0, n - batch_size + 1, batch_size):
            idx = order[lo : lo + batch_size]
            X = dynamic_binarize(train_images[idx], epoch, seed, indices=idx)
            U = _forward_uniform_block(model.encoder, seed, epoch, idx)
            bt = batched.forward_batch(model.encoder, X, U)
            samples = [lt.sample for lt in bt.layers]
            logits = [lt.logits for lt in bt.layers]
            vals = batched.evaluate_components_batch(model, X, samples, logits)

            terms = _vae_term_lists(model, X, bt, vals, estimator, enc_baselines, rloo_rng)
            enc_grads = _grad_from_terms(terms)
            var = _mean_variance_terms(terms)

            # decoder / prior single-sample analytic gradients
            dec_grads = []
            for r, lvl in enumerate(model.decoder):
                obs = X if r == 0 else samples[r - 1]
                delta = obs - sigmoid(vals.dec_logits[r])
                dec_grads.append((delta.T @ samples[r], delta.sum(axis=0)))
            prior_delta = samples[-1] - sigmoid(model.prior_logits)[None, :]

            grads = []
            for gw, gb in enc_grads + dec_grads:
                grads += [gw / batch_size, gb / batch_size]
            grads.append(prior_delta.sum(axis=0) / batch_size)
            adam_step(params, grads, adam, learning_rate)

            if enc_baselines is not None:
                if uses_mediated_baseline:
                    tracked = batched.batch_mediated_sums(vals, L, _VAE_MODES[estimator]).mean(axis=0)
                else:
                    tracked = batched.batch_downstream_sums(vals, L).mean(axis=0)
                enc_baselines = [
                    baseline_update(b, float(v)) for b, v in zip(enc_baselines, tracked)
                ]

            step += 1
            elbo_acc += float(vals.elbo().mean())
            lnvar_acc += float(np.log(max(var, 1e-300)))
            acc_count += 1
            if step % log_every == 0:
                flush(epoch)
                elbo_acc, lnvar_acc, acc_count = 0.0, 0.0, 0
    if acc_count:
        flush(epochs - 1)
    return metrics


# --- config-level drivers -----------------------------------------------------


def _load_split(cfg, split: str, labels: bool):
    imgs = read_idx(getattr(cfg, f"{split}_images"))
    if labels:
        ds = Dataset(imgs, read_idx(getattr(cfg, f"{split}_labels")), split)
        return ds.images, ds.labels
    return imgs, None


def bandit_train(cfg) -> tuple[RunMetrics, StochasticNet]:
    """Run the contextual-bandit experiment described by a RunConfig."""
    train_x, train_y = _load_split(cfg, "train", labels=True)
    test_x, test_y = _load_split(cfg, "test", labels=True)
    if cfg.train_limit is not None:
        train_x, train_y = train_x[: cfg.train_limit], train_y[: cfg.train_limit]
    context_dim = int(np.prod(train_x.shape[1:]))
    rng = example_stream(cfg.seed, 0, 0, STREAM_INIT)
    net = init_net(context_dim, [cfg.hidden_width] * cfg.depth, 10, cfg.resolved_encoding(), rng)
    metrics = bandit_train_arrays(
        net, train_x, train_y, test_x, test_y,
        estimator=cfg.estimator,
        learning_rate=cfg.learning_rate,
        batch_size=cfg.batch_size,
        epochs=cfg.epochs,
        seed=cfg.seed,
        baseline_discount=cfg.baseline_discount,
        test_samples=cfg.test_samples,
        log_every=cfg.log_every,
    )
    return metrics, net


def vae_train(cfg) -> tuple[RunMetrics, VaeModel]:
    """Run the discrete-VAE experiment described by a RunConfig."""
    train_x, _ = _load_split(cfg, "train", labels=False)
    test_x, _ = _load_split(cfg, "test", labels=False)
    if cfg.train_limit is not None:
        train_x = train_x[: cfg.train_limit]
    n_visible = int(np.prod(train_x.shape[1:]))
    rng = example_stream(cfg.seed, 0, 0, STREAM_INIT)
    model = init_vae(n_visible, [cfg.hidden_width] * cfg.depth, rng)
    metrics = vae_train_arrays(
        model, train_x, test_x,
        estimator=cfg.estimator,
        learning_rate=cfg.learning_rate,
        batch_size=cfg.batch_size,
        epochs=cfg.epochs,
        seed=cfg.seed,
        baseline_discount=cfg.baseline_discount,
        log_every=cfg.log_every,
    )
    return metrics, model


# --- backward/forward cost benchmark --------------------------------------------


def run_bench(depth: int = 2, widths=(100, 200, 400), reps: int = 400, seed: int = 0) -> dict:
    """Median per-example wall times of the forward pass and the hindsight backward pass.

    Also fits backward time linearly in the total edge count and reports the
    largest relative residual; the backward pass is supposed to stay within a
    small constant of the forward pass and scale with the number of edges.
    """
    from .estimators import hnca_backward
    from .netcore import Encoding

    rows = []
    for w in widths:
        rng = example_stream(seed, 0, w, STREAM_INIT)
        net = init_net(784, [w] * depth, 10, Encoding.PLUS_MINUS_ONE, rng)
        context = (rng.random(784) < 0.5).astype(np.float64)
        trace = forward_sample(net, context, rng)

        for _ in range(10):  # warm caches and allocator
            forward_sample(net, context, rng)
            hnca_backward(net, trace, 1.0)
        # interleave the two measurements so scheduler noise and frequency
        # drift hit both sides alike
        fwd_t = np.empty(reps)
        bwd_t = np.empty(reps)
        for i in range(reps):
            t0 = time.perf_counter()
            forward_sample(net, context, rng)
            t1 = time.perf_counter()
            hnca_backward(net, trace, 1.0)
            t2 = time.perf_counter()
            fwd_t[i] = t1 - t0
            bwd_t[i] = t2 - t1
        fwd_us = float(np.median(fwd_t) * 1e6)
        bwd_us = float(np.median(bwd_t) * 1e6)
        edges = 784 * w + (depth - 1) * w * w + 10 * w
        rows.append(
            {"width": w, "edges": edges, "forward_us": fwd_us, "backward_us": bwd_us,
             "ratio": bwd_us / fwd_us}
        )
    x = np.array([r["edges"] for r in rows], dtype=np.float64)
    y = np.array([r["backward_us"] for r in rows])
    slope, intercept = np.polyfit(x, y, 1)
    fit = slope * x + intercept
    resid = np.abs(y - fit) / np.abs(fit)
    return {
        "depth": depth,
        "rows": rows,
        "fit_us_per_edge": float(slope),
        "fit_intercept_us": float(intercept),
        "max_fit_residual": float(resid.max()),
        "max_ratio": float(max(r["ratio"] for r in rows)),
    }


# --- multi-sample evaluation bound ------------------------------------------------


def multisample_bound(
    model: VaeModel, x, k: int, rng, prob_override=None
) -> float:
    """Importance-weighted likelihood bound log(1/K sum_k p(x, z_k)/q(z_k|x)).

    K = 1 is the single-sample bound integrand. Proposal log-probabilities
    use the realized firing probabilities exactly (no clamping), so a
    test-clamped deterministic encoder contributes log q = 0.
    """
    if k < 1:
        raise ConfigError("need at least one importance sample")
    x = np.asarray(x, dtype=np.float64)
    components = build_elbo_components(model, x)
    ws = np.empty(k)
    for i in range(k):
        trace = forward_sample(model.encoder, x, rng, prob_override=prob_override)
        vals = components.evaluate(trace)
        log_p = float(vals.prior.sum() + sum(v.sum() for v in vals.recon))
        log_q = 0.0
        for lt in trace.layers:
            realized = np.where(lt.high == 1.0, lt.probs, 1.0 - lt.probs)
            log_q += float(np.log(realized).sum())
        ws[i] = log_p - log_q
    return float(logsumexp(ws) - np.log(k))
