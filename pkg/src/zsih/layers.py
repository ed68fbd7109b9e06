"""Network building blocks: attention pooling, Kronecker fusion, graph
convolution, sigmoid hash encoders, stochastic binary neurons and the
Gaussian semantic decoder.

All layer functions are pure: output = f(params, inputs, noise).  Batch
variants accept a matrix where the contract names a vector; reductions
then run over all rows.
"""

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Node

# probability clamp applied before logs; straight-through gradients are
# zeroed in the clamped region
PROB_EPS = 1e-7

LOG_2PI = math.log(2.0 * math.pi)


def _param(arr):
    # always copy: parameters are mutated in place by the optimizer and
    # must never alias caller-owned storage
    return Node(np.array(arr, dtype=np.float64), requires_grad=True)


class AttentionPool:
    """Score-per-location softmax pooling followed by a ReLU projection."""

    def __init__(self, score_weights, score_bias, proj_weights, proj_bias):
        self.score_weights = _param(score_weights)  # [C, 1]
        self.score_bias = _param(score_bias)        # scalar
        self.proj_weights = _param(proj_weights)    # [C, d_f]
        self.proj_bias = _param(proj_bias)          # [d_f]


class KroneckerFusion:
    def __init__(self, w_sk, w_im):
        self.w_sk = _param(w_sk)  # [d_f, d_f]
        self.w_im = _param(w_im)  # [d_f, d_f]


class GraphConvLayer:
    def __init__(self, w_theta, activation):
        if activation not in ("relu", "sigmoid"):
            raise ValueError(f"unknown activation {activation!r}")
        self.w_theta = _param(w_theta)  # [d_in, d_out]
        self.activation = activation


class HashEncoder:
    def __init__(self, w, b):
        self.w = _param(w)  # [d_f, M]
        self.b = _param(b)  # [M]


class GaussianDecoder:
    """Linear mean and log-variance heads over the sampled code bits."""

    def __init__(self, w_mu, b_mu, w_logvar, b_logvar):
        self.w_mu = _param(w_mu)            # [M, d_s]
        self.b_mu = _param(b_mu)            # [d_s]
        self.w_logvar = _param(w_logvar)    # [M, d_s]
        self.b_logvar = _param(b_logvar)    # [d_s]


vecmat = ad.vecmat


def attention_pool(feat_map, params):
    """Pool an [L, C] feature map into a d_f vector.

    Softmax scores over the L locations mix the rows; the pooled vector
    is then projected and ReLU-activated.
    """
    feat_map = np.asarray(feat_map, dtype=np.float64)
    if feat_map.ndim != 2 or feat_map.shape[0] == 0:
        raise ValueError(f"feature map must be [L, C] with L >= 1, got {feat_map.shape}")
    if feat_map.shape[1] != params.score_weights.shape[0]:
        raise ValueError(
            f"feature channels {feat_map.shape[1]} do not match attention "
            f"parameters {params.score_weights.shape[0]}"
        )
    feat = ad.constant(feat_map)
    logits = ad.add(ad.matmul(feat, params.score_weights), params.score_bias)
    weights = ad.softmax(ad.reshape(logits, (feat_map.shape[0],)))
    pooled = vecmat(weights, feat)
    projected = ad.add(vecmat(pooled, params.proj_weights), params.proj_bias)
    return ad.relu(projected)


def attention_weights(feat_map, params):
    """The softmax mixing weights alone (diagnostics and tests)."""
    feat_map = np.asarray(feat_map, dtype=np.float64)
    feat = ad.constant(feat_map)
    logits = ad.add(ad.matmul(feat, params.score_weights), params.score_bias)
    return ad.softmax(ad.reshape(logits, (feat_map.shape[0],)))


def fuse(h_sk, h_im, params):
    """ReLU-activated Kronecker product of the transformed modality features."""
    d_f = params.w_sk.shape[0]
    if h_sk.shape != (d_f,) or h_im.shape != (d_f,):
        raise ValueError(
            f"fusion inputs must both have length {d_f}, "
            f"got {h_sk.shape} and {h_im.shape}"
        )
    return ad.relu(ad.kron_vec(vecmat(h_sk, params.w_sk), vecmat(h_im, params.w_im)))


def normalized_adjacency(adj):
    """Symmetrically normalize a self-connected adjacency matrix.

    Returns D^{-1/2} A D^{-1/2} with D = diag(A 1).  The input must be
    square, symmetric, unit-diagonal, with entries in [0, 1] and strictly
    positive row sums.
    """
    adj = np.asarray(adj, dtype=np.float64)
    if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
        raise ValueError(f"adjacency must be square, got {adj.shape}")
    if not np.array_equal(adj, adj.T):
        raise ValueError("adjacency must be symmetric")
    if np.any(adj < 0.0) or np.any(adj > 1.0):
        raise ValueError("adjacency entries must lie in [0, 1]")
    if not np.all(np.diag(adj) == 1.0):
        raise ValueError("adjacency diagonal must be exactly 1 (self-connected)")
    deg = adj.sum(axis=1)
    if np.any(deg <= 0.0):
        raise ValueError("adjacency has a zero row sum")
    d_isqrt = 1.0 / np.sqrt(deg)
    return adj * d_isqrt[:, None] * d_isqrt[None, :]


def graph_conv(h, adj, layer):
    """One propagation step: act(D^{-1/2} A D^{-1/2} H W).

    ``adj`` is a plain array treated as a constant; no gradient flows
    through it.
    """
    if h.ndim != 2:
        raise ValueError(f"graph_conv input must be [N, d_in], got {h.shape}")
    a_norm = normalized_adjacency(adj)
    if a_norm.shape[0] != h.shape[0]:
        raise ValueError(
            f"adjacency size {a_norm.shape[0]} does not match batch {h.shape[0]}"
        )
    pre = ad.matmul(ad.matmul(ad.constant(a_norm), h), layer.w_theta)
    return ad.relu(pre) if layer.activation == "relu" else ad.sigmoid(pre)


def dense(h, layer):
    """The same transform as graph_conv without any graph coupling."""
    pre = ad.matmul(h, layer.w_theta)
    return ad.relu(pre) if layer.activation == "relu" else ad.sigmoid(pre)


def encode_soft(h, enc):
    """Sigmoid code probabilities from an attended feature (vector or batch)."""
    if h.ndim == 1:
        pre = ad.add(vecmat(h, enc.w), enc.b)
    else:
        pre = ad.add(ad.matmul(h, enc.w), enc.b)
    return ad.sigmoid(pre)


def stochastic_neurons(b, eps):
    """Threshold code probabilities against uniform noise: bit = [b >= eps].

    Backward applies the straight-through rule (identity), zeroed where
    the probability sits in the clamp region outside [PROB_EPS, 1-PROB_EPS].
    Probabilities rounded to exactly 0 or 1 by a saturated sigmoid are
    treated as clamped boundary values; anything beyond [0, 1] is a
    domain error.
    """
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != b.shape:
        raise ValueError(f"eps shape {eps.shape} does not match code shape {b.shape}")
    if np.any(b.data < 0.0) or np.any(b.data > 1.0):
        raise ValueError("code probabilities must lie in (0, 1)")
    hard = (b.data >= eps).astype(np.float64)
    mask = (b.data > PROB_EPS) & (b.data < 1.0 - PROB_EPS)

    def bwd(g):
        return (g * mask,)

    return Node(hard, requires_grad=b.requires_grad, _parents=(b,), _bwd=bwd)


def log_q(b, b_tilde):
    """Log-probability of sampled bits under the factorized Bernoulli code.

    sum_m [ b~ log b + (1 - b~) log(1 - b) ], with b clamped away from
    {0, 1} before the logs.
    """
    b_tilde = np.asarray(b_tilde, dtype=np.float64)
    if b_tilde.shape != b.shape:
        raise ValueError(f"bit shape {b_tilde.shape} does not match code shape {b.shape}")
    if not np.all((b_tilde == 0.0) | (b_tilde == 1.0)):
        raise ValueError("sampled bits must be binary")
    bc = ad.clip(b, PROB_EPS, 1.0 - PROB_EPS)
    on = ad.mul(ad.constant(b_tilde), ad.log(bc))
    off = ad.mul(ad.constant(1.0 - b_tilde), ad.log(ad.sub(1.0, bc)))
    return ad.reduce_sum(ad.add(on, off))


def log_p_gaussian(s, b_tilde, dec):
    """Diagonal-Gaussian log-likelihood of semantics given sampled bits.

    -1/2 sum_j [ log(2 pi) + logvar_j + (s_j - mu_j)^2 / exp(logvar_j) ],
    summed over rows when given a batch.
    """
    s = np.asarray(s, dtype=np.float64)
    if b_tilde.ndim == 1:
        mu = ad.add(vecmat(b_tilde, dec.w_mu), dec.b_mu)
        logvar = ad.add(vecmat(b_tilde, dec.w_logvar), dec.b_logvar)
    else:
        mu = ad.add(ad.matmul(b_tilde, dec.w_mu), dec.b_mu)
        logvar = ad.add(ad.matmul(b_tilde, dec.w_logvar), dec.b_logvar)
    if s.shape != mu.shape:
        raise ValueError(f"semantic shape {s.shape} does not match decoder output {mu.shape}")
    resid = ad.square(ad.sub(ad.constant(s), mu))
    scaled = ad.mul(resid, ad.exp(ad.mul(logvar, -1.0)))
    total = ad.reduce_sum(ad.add(ad.add(scaled, logvar), LOG_2PI))
    return ad.mul(total, -0.5)
