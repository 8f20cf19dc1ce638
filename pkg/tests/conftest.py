import numpy as np
import pytest

from hnca.netcore import BernoulliLayer, Encoding, SoftmaxLayer, StochasticNet
from hnca.fhnca import VaeModel, init_vae


def rand_layer(rng, n_out, n_in, encoding=Encoding.ZERO_ONE, scale=0.8):
    return BernoulliLayer(
        rng.normal(scale=scale, size=(n_out, n_in)),
        rng.normal(scale=0.3, size=n_out),
        encoding,
    )


def rand_net(rng, context_dim, widths, n_actions=None, encoding=Encoding.ZERO_ONE):
    hidden = []
    n_in = context_dim
    for w in widths:
        hidden.append(rand_layer(rng, w, n_in, encoding))
        n_in = w
    head = None
    if n_actions is not None:
        head = SoftmaxLayer(
            rng.normal(scale=0.8, size=(n_actions, n_in)), rng.normal(scale=0.3, size=n_actions)
        )
    return StochasticNet(hidden, head)


def rand_vae(rng, n_visible, widths) -> VaeModel:
    model = init_vae(n_visible, widths, rng)
    for layer in model.encoder.hidden + model.decoder:
        layer.weights[...] = rng.normal(scale=0.8, size=layer.weights.shape)
        layer.bias[...] = rng.normal(scale=0.3, size=layer.bias.shape)
    model.prior_logits[...] = rng.normal(scale=0.5, size=model.prior_logits.shape)
    return model


def binary_context(rng, d):
    return (rng.random(d) < 0.5).astype(np.float64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
