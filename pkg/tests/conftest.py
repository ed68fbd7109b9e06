"""Shared test helpers: finite-difference oracles and tiny model builders."""

import numpy as np
import pytest

from zsih import model, pipeline
from zsih.data import synth_dataset

FD_STEP = 1e-5
FD_RTOL = 1e-4
FD_ATOL = 1e-8


def fd_grad(f, node, h=FD_STEP):
    """Central finite differences of scalar f() w.r.t. one node's data."""
    grad = np.zeros_like(node.data)
    flat = node.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def assert_grad_close(ad_grad, fd, rtol=FD_RTOL, atol=FD_ATOL):
    np.testing.assert_allclose(ad_grad, fd, rtol=rtol, atol=atol)


def check_node_grads(make_loss, nodes, rtol=FD_RTOL, atol=FD_ATOL):
    """Compare autodiff and finite-difference gradients for each node.

    ``make_loss`` rebuilds the loss graph from the nodes' current data and
    returns the scalar loss node.
    """
    loss = make_loss()
    for n in nodes:
        n.zero_grad()
    loss.backward()
    ad_grads = [n.grad.copy() for n in nodes]
    for n, ag in zip(nodes, ad_grads):
        fd = fd_grad(lambda: make_loss().item(), n)
        assert_grad_close(ag, fd, rtol=rtol, atol=atol)


def tiny_config(**overrides):
    base = dict(M=4, d_f=3, gcn_hidden=5, N_B=4, max_iters=0, seed=0, t=0.5)
    base.update(overrides)
    return pipeline.ZsihConfig(**base).validate()


def tiny_setup(seed=0, n_classes=4, per_class=3, length=2, channels=6, d_s=3,
               noise=0.1, **config_overrides):
    """Small synthetic dataset plus matching params and a sampled batch."""
    config = tiny_config(**config_overrides)
    store, table = synth_dataset(n_classes, per_class, length, channels, d_s,
                                 noise, seed)
    dataset = pipeline.PairedDataset.from_stores(store, store, table)
    rng = np.random.default_rng(seed)
    params = model.init_params(config, channels, d_s, rng)
    batch = pipeline.sample_batch(dataset, config.N_B, rng)
    adj = pipeline.build_adjacency(batch.semantics, config.t)
    eps = rng.random((config.N_B, config.M))
    return config, dataset, params, batch, adj, eps, rng


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
