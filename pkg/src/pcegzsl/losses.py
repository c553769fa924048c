"""Objective terms with analytic gradients.

Similarities are dot products of unit vectors. Every function returns the
loss value together with gradients on its array inputs; gradients on network
parameters are accumulated into the corresponding ``Param.grad`` buffers.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .models import Mlp, relation_backward, relation_forward
from .ndcore import Rng, as_matrix, logsumexp_stable, matmul, softmax_rows


class ContrastiveVariant(str, enum.Enum):
    PLAIN = "plain"
    MARGIN = "margin"
    ADAPTIVE = "adaptive"


@dataclass(frozen=True)
class MarginPair:
    delta_n: float
    delta_m: float

    @classmethod
    def from_margin(cls, m: float) -> "MarginPair":
        return cls(delta_n=m, delta_m=1.0 - m)


@dataclass(frozen=True)
class LossWeights:
    lambda_proto: float = 0.01
    beta_sem: float = 0.01
    phi_center: float = 0.01
    gp_coeff: float = 10.0

    def __post_init__(self):
        for name in ("lambda_proto", "beta_sem", "phi_center", "gp_coeff"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


def alpha_pos(s, m: float):
    """Re-scaling for a positive pair: distance below the optimum 1 + m."""
    return np.maximum(1.0 + m - np.asarray(s, dtype=float), 0.0)


def alpha_neg(s, m: float):
    """Re-scaling for a negative pair: distance above the optimum -m."""
    return np.maximum(np.asarray(s, dtype=float) + m, 0.0)


def proto_contrastive_loss(
    protos,
    z,
    labels,
    gamma_ins: float,
    variant: ContrastiveVariant | str = ContrastiveVariant.ADAPTIVE,
    margins: MarginPair | None = None,
    force_alpha=None,
):
    """Prototype-anchored contrastive loss.

    ``protos`` (C x Dz) and ``z`` (B x Dz) must already have unit rows and
    ``labels`` index rows of ``protos``. For each prototype the batch splits
    into positives (own class) and negatives, and the term is
    ``log(1 + sum_n exp(g_n) * sum_p exp(-g_p))``; prototypes lacking either
    set are skipped and the rest averaged. Adaptive re-scaling factors are
    held constant in the backward pass. ``force_alpha`` overrides them,
    either with one scalar or with a ``(alpha_pos, alpha_neg)`` pair of
    batch x C arrays.

    Returns ``(loss, grad_protos, grad_z)``.
    """
    variant = ContrastiveVariant(variant)
    protos, z = as_matrix(protos), as_matrix(z)
    labels = np.asarray(labels, dtype=np.int64)
    n_cls = protos.shape[0]
    if z.shape[0] == 0:
        raise ValueError("empty batch")
    if labels.shape != (z.shape[0],):
        raise ValueError(f"{len(labels)} labels for {z.shape[0]} rows")
    if labels.min() < 0 or labels.max() >= n_cls:
        bad = labels[(labels < 0) | (labels >= n_cls)][0]
        raise ValueError(f"label {bad} has no prototype row")
    if gamma_ins <= 0:
        raise ValueError("gamma_ins must be positive")

    if variant is ContrastiveVariant.PLAIN:
        d_n = d_m = 0.0
    else:
        if margins is None:
            raise ValueError(f"{variant.value} variant needs a MarginPair")
        d_n, d_m = margins.delta_n, margins.delta_m

    sim = matmul(z, protos.T)
    pos = labels[:, None] == np.arange(n_cls)[None, :]
    neg = ~pos
    if isinstance(force_alpha, tuple):
        a_p, a_n = force_alpha
    elif force_alpha is not None:
        a_p = a_n = np.full_like(sim, float(force_alpha))
    elif variant is ContrastiveVariant.ADAPTIVE:
        a_p, a_n = alpha_pos(sim, d_n), alpha_neg(sim, d_n)
    else:
        a_p = a_n = np.ones_like(sim)

    coef_n = gamma_ins * a_n
    coef_p = gamma_ins * a_p
    exp_n = np.where(neg, coef_n * (sim - d_n), -np.inf)
    exp_p = np.where(pos, -coef_p * (sim - d_m), -np.inf)
    lse_n = logsumexp_stable(exp_n, axis=0)
    lse_p = logsumexp_stable(exp_p, axis=0)
    valid = (pos.any(axis=0) & neg.any(axis=0))[None, :]
    n_valid = int(valid.sum())
    if n_valid == 0:
        return 0.0, np.zeros_like(protos), np.zeros_like(z)

    t = np.where(valid, lse_n + lse_p, 0.0)
    # log(1 + e^t) as a two-term logsumexp
    per_proto = logsumexp_stable(np.vstack([np.zeros_like(t), t]), axis=0)
    loss = float(np.sum(np.where(valid, per_proto, 0.0)) / n_valid)

    gate = np.where(valid, np.exp(t - per_proto), 0.0) / n_valid
    w_n = np.exp(exp_n - np.where(valid, lse_n, 0.0))
    w_p = np.exp(exp_p - np.where(valid, lse_p, 0.0))
    d_sim = gate * (w_n * coef_n - w_p * coef_p)
    d_sim = np.where(valid, d_sim, 0.0)
    return loss, matmul(d_sim.T, z), matmul(d_sim, protos)


def semantic_loss(scores, labels, gamma_sem: float):
    """Mean cross-entropy of softmax(gamma_sem * scores) at the true column.

    Returns ``(loss, grad_scores)``.
    """
    scores = as_matrix(scores)
    labels = np.asarray(labels, dtype=np.int64)
    n, k = scores.shape
    if n == 0:
        raise ValueError("empty batch")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"label out of range for {k} score columns")
    logits = gamma_sem * scores
    lse = logsumexp_stable(logits, axis=1)[:, 0]
    loss = float(np.mean(lse - logits[np.arange(n), labels]))
    grad = softmax_rows(logits)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad * (gamma_sem / n)


def class_means(h, labels):
    """Mean embedding per present class, plus the classes in ascending order."""
    h = as_matrix(h)
    labels = np.asarray(labels, dtype=np.int64)
    present = np.unique(labels)
    means = np.vstack([np.mean(h[labels == c], axis=0) for c in present])
    return means, present


def center_semantic_loss(h, labels, rn: Mlp, attrs, gamma_sem: float, accumulate: bool = True, scale: float = 1.0):
    """Semantic loss on the per-class mean embeddings of the batch.

    ``labels`` index rows of ``attrs``. Gradients of ``scale * loss`` are
    accumulated into RN; returns ``(loss, grad_h)`` with grad_h also scaled.
    """
    h = as_matrix(h)
    labels = np.asarray(labels, dtype=np.int64)
    if h.shape[0] == 0:
        raise ValueError("empty batch")
    means, present = class_means(h, labels)
    scores, cache = relation_forward(rn, means, attrs)
    loss, g_scores = semantic_loss(scores, present, gamma_sem)
    g_means = relation_backward(rn, cache, scale * g_scores, accumulate)
    grad_h = np.zeros_like(h)
    for row, c in enumerate(present):
        sel = labels == c
        grad_h[sel] = g_means[row] / np.count_nonzero(sel)
    return loss, grad_h


def sample_semantic_loss(h, labels, rn: Mlp, attrs, gamma_sem: float, accumulate: bool = True, scale: float = 1.0):
    """Semantic loss of every batch embedding against all seen attributes.

    Same gradient conventions as :func:`center_semantic_loss`.
    """
    scores, cache = relation_forward(rn, h, attrs)
    loss, g_scores = semantic_loss(scores, labels, gamma_sem)
    return loss, relation_backward(rn, cache, scale * g_scores, accumulate)


def critic_input_gradient(d: Mlp, u):
    """Forward D on ``u`` and return (output, d out / d u, backward chain state).

    With piecewise-linear activations the input gradient is a product of
    weight matrices and activation masks; the chain values are kept so the
    penalty can be differentiated again with respect to the weights.
    """
    out, cache = d.forward(u)
    n_layers = d.spec.n_layers
    masks = [d._act_mask(cache.pres[k], d._activation(k)) for k in range(n_layers)]
    chain = [None] * n_layers
    v = np.ones_like(out)
    if masks[-1] is not None:
        v = v * masks[-1]
    chain[-1] = v
    for k in range(n_layers - 1, 0, -1):
        v = matmul(v, d.weights[k].value.T)
        if masks[k - 1] is not None:
            v = v * masks[k - 1]
        chain[k - 1] = v
    g_u = matmul(v, d.weights[0].value.T)
    in_mask = d._act_mask(cache.x, d.spec.input_activation)
    if in_mask is not None:
        g_u = g_u * in_mask
    return out, g_u, (chain, masks, in_mask)


def gradient_penalty(
    d: Mlp, x_real, x_fake, attrs, rng: Rng, scale: float = 1.0, accumulate: bool = True, tau=None
):
    """Mean of (||grad_x D(x_hat, a)|| - 1)^2 on random real/fake interpolates.

    ``attrs`` holds one attribute row per sample. The weight gradient of
    ``scale * penalty`` is accumulated into D by differentiating the input
    gradient chain a second time.
    """
    x_real, x_fake, attrs = as_matrix(x_real), as_matrix(x_fake), as_matrix(attrs)
    if x_real.shape != x_fake.shape:
        raise ValueError(f"real {x_real.shape} and fake {x_fake.shape} batches differ in shape")
    if attrs.shape[0] != x_real.shape[0]:
        raise ValueError("need one attribute row per sample")
    n, fd = x_real.shape
    if tau is None:
        tau = rng.uniform((n, 1))
    x_hat = tau * x_real + (1.0 - tau) * x_fake
    _, g_u, (chain, masks, in_mask) = critic_input_gradient(d, np.hstack([x_hat, attrs]))
    g_x = g_u[:, :fd]
    norms = np.sqrt(np.sum(g_x * g_x, axis=1, keepdims=True))
    penalty = float(np.mean((norms - 1.0) ** 2))
    if not accumulate:
        return penalty

    safe = np.where(norms > 0, norms, 1.0)
    r_gx = np.where(norms > 0, 2.0 * (norms - 1.0) / safe, 0.0) * g_x * (scale / n)
    r = np.zeros_like(g_u)
    r[:, :fd] = r_gx
    if in_mask is not None:
        r = r * in_mask
    # reverse through g_u = chain[0] W0^T, chain[k-1] = (chain[k] Wk^T) * mask[k-1]
    for k in range(d.spec.n_layers):
        d.weights[k].grad += matmul(r.T, chain[k])
        if k == d.spec.n_layers - 1:
            break
        r = matmul(r, d.weights[k].value)
        if masks[k] is not None:
            r = r * masks[k]
    return penalty


def critic_loss(d: Mlp, x_real, x_fake, attrs, rng: Rng, gp_coeff: float, accumulate: bool = True):
    """E[D(fake)] - E[D(real)] + gp_coeff * penalty; accumulates D grads. Returns (loss, penalty)."""
    n = x_real.shape[0]
    real_out, real_cache = d.forward(np.hstack([x_real, attrs]))
    fake_out, fake_cache = d.forward(np.hstack([x_fake, attrs]))
    penalty = gradient_penalty(d, x_real, x_fake, attrs, rng, scale=gp_coeff, accumulate=accumulate)
    loss = float(np.mean(fake_out) - np.mean(real_out) + gp_coeff * penalty)
    if accumulate:
        d.backward(real_cache, np.full_like(real_out, -1.0 / n))
        d.backward(fake_cache, np.full_like(fake_out, 1.0 / n))
    return loss, penalty


def generator_adversarial_loss(d: Mlp, x_fake, attrs):
    """-E[D(fake)] and its gradient on the fake features. D grads are left untouched."""
    n, fd = x_fake.shape
    out, cache = d.forward(np.hstack([x_fake, attrs]))
    g_u = d.backward(cache, np.full_like(out, -1.0 / n), accumulate=False)
    return float(-np.mean(out)), g_u[:, :fd]


@dataclass
class WganResult:
    d_loss: float
    g_loss: float
    penalty: float
    fake: np.ndarray


def wgan_losses(d: Mlp, g: Mlp, batch_real, attrs, rng: Rng, gp_coeff: float, accumulate: bool = True):
    """Critic and generator objectives on one batch.

    Fakes are drawn as G([a ; z]) with fresh noise. D grads come from
    ``d_loss`` (fakes treated as constants), G grads from ``g_loss``.
    """
    batch_real, attrs = as_matrix(batch_real), as_matrix(attrs)
    if batch_real.shape[0] != attrs.shape[0]:
        raise ValueError("need one attribute row per real sample")
    if batch_real.shape[1] + attrs.shape[1] != d.spec.in_dim:
        raise ValueError("D input width does not match features + attributes")
    noise_dim = g.spec.in_dim - attrs.shape[1]
    noise = rng.normal((batch_real.shape[0], noise_dim))
    fake, g_cache = g.forward(np.hstack([attrs, noise]))
    d_loss, penalty = critic_loss(d, batch_real, fake, attrs, rng, gp_coeff, accumulate)
    g_loss, g_fake = generator_adversarial_loss(d, fake, attrs)
    if accumulate:
        g.backward(g_cache, g_fake)
    return WganResult(d_loss, g_loss, penalty, fake)


@dataclass
class LossComponents:
    wgan: float
    proto: float = 0.0
    sem: float = 0.0
    center: float = 0.0


def total_loss(components: LossComponents, weights: LossWeights) -> float:
    return (
        components.wgan
        + weights.lambda_proto * components.proto
        + weights.beta_sem * components.sem
        + weights.phi_center * components.center
    )
