"""Central finite-difference checks for every loss term.

Each check builds a toy problem (dims <= 16, batch <= 8) from a seed,
computes the analytic gradient and compares it against central differences
with step 1e-5. The error reported is ``||analytic - numeric|| / max(||analytic||, ||numeric||)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import losses
from .losses import ContrastiveVariant, MarginPair
from .models import Mlp, MlpSpec, init_network, relation_spec
from .ndcore import Param, Rng, l2_normalize_rows, l2_normalize_rows_backward

FD_STEP = 1e-5
TOLERANCE = 1e-5
LOSS_TERMS = (
    "wgan",
    "gradient_penalty",
    "proto_plain",
    "proto_margin",
    "proto_adaptive",
    "semantic",
    "center_semantic",
)


def numeric_grad(f: Callable[[], float], x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Central differences of ``f`` w.r.t. every entry of ``x`` (mutated in place, then restored)."""
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)


def check_params(loss_and_grads: Callable[[], float], params: list[Param]) -> float:
    """Relative error of the full analytic gradient over ``params`` (concatenated).

    ``loss_and_grads`` must return the loss and accumulate into the grads.
    """
    for p in params:
        p.zero_grad()
    loss_and_grads()
    analytic = [p.grad.copy() for p in params]
    if _corrupt_active:
        analytic[0] = analytic[0] * 1.01 + 1e-3
    numeric = [numeric_grad(lambda: _quiet(loss_and_grads, params), p.value) for p in params]
    return rel_error(np.concatenate([a.ravel() for a in analytic]), np.concatenate([n.ravel() for n in numeric]))


_corrupt_active = False


def _quiet(fn, params):
    out = fn()
    for p in params:
        p.zero_grad()
    return out


def _toy_net(spec: MlpSpec, rng: Rng, std: float = 0.5, name: str = "net") -> Mlp:
    # larger than the training init so activations sit well away from the kinks
    net = init_network(spec, rng, name)
    for w in net.weights:
        w.value[...] = rng.normal(w.shape, std=std / np.sqrt(w.shape[0]) * 2.0)
    for b in net.biases:
        b.value[...] = rng.normal(b.shape, std=0.1)
    return net


def _kink_margin(net: Mlp, x) -> float:
    """Smallest |pre-activation| feeding a LeakyReLU; FD steps must not cross one."""
    _, cache = net.forward(x)
    vals = [np.inf]
    if net.spec.input_activation == "leaky_relu":
        vals.append(np.min(np.abs(cache.x)))
    for k, pre in enumerate(cache.pres):
        if net._activation(k) == "leaky_relu":
            vals.append(np.min(np.abs(pre)))
    return float(min(vals))


KINK_MARGIN = 1e-3
MAX_DRAWS = 50


def _dims(rng: Rng, lo: int, hi: int) -> int:
    return int(lo + np.floor(rng.uniform(1)[0] * (hi - lo + 1)))


def _labels_with_pairs(rng: Rng, batch: int, n_cls: int) -> np.ndarray:
    labels = np.floor(rng.uniform(batch) * n_cls).astype(np.int64)
    labels[0], labels[1] = 0, 1  # every prototype check has at least one valid anchor
    return labels


def check_wgan(seed: int) -> float:
    rng = Rng(seed)
    for _ in range(MAX_DRAWS):
        fd, ad, nd = _dims(rng, 2, 16), _dims(rng, 2, 8), _dims(rng, 2, 8)
        hid, b = _dims(rng, 2, 16), _dims(rng, 2, 8)
        d = _toy_net(MlpSpec((fd + ad, hid, 1)), rng, name="D")
        g = _toy_net(MlpSpec((ad + nd, hid, fd)), rng, name="G")
        x, a = rng.normal((b, fd)), rng.normal((b, ad))
        noise_seed = rng.child(99).seed
        # replay the draws wgan_losses will make: noise, then interpolation weights
        replay = Rng(noise_seed)
        ga = np.hstack([a, replay.normal((b, nd))])
        fake = g(ga)
        tau = replay.uniform((b, 1))
        x_hat = tau * x + (1.0 - tau) * fake
        margin = min(
            _kink_margin(g, ga),
            *(_kink_margin(d, np.hstack([v, a])) for v in (x, fake, x_hat)),
        )
        if margin > KINK_MARGIN:
            break

    def run_d():
        return losses.wgan_losses(d, g, x, a, Rng(noise_seed), gp_coeff=10.0).d_loss

    def run_g():
        return losses.wgan_losses(d, g, x, a, Rng(noise_seed), gp_coeff=10.0).g_loss

    return max(check_params(run_d, d.params), check_params(run_g, g.params))


def check_gradient_penalty(seed: int) -> float:
    rng = Rng(seed)
    for _ in range(MAX_DRAWS):
        fd, ad, b = _dims(rng, 2, 16), _dims(rng, 1, 8), _dims(rng, 1, 8)
        n_hidden = 1 + int(rng.uniform(1)[0] < 0.5)
        dims = (fd + ad,) + tuple(_dims(rng, 2, 16) for _ in range(n_hidden)) + (1,)
        d = _toy_net(MlpSpec(dims), rng, name="D")
        xr, xf, a = rng.normal((b, fd)), rng.normal((b, fd)), rng.normal((b, ad))
        tau = rng.uniform((b, 1))
        if _kink_margin(d, np.hstack([tau * xr + (1.0 - tau) * xf, a])) > KINK_MARGIN:
            break
    return check_params(lambda: losses.gradient_penalty(d, xr, xf, a, rng, tau=tau), d.weights)


def _check_proto(seed: int, variant: ContrastiveVariant) -> float:
    rng = Rng(seed)
    dz, n_cls, b = _dims(rng, 2, 16), _dims(rng, 2, 5), _dims(rng, 3, 8)
    gamma = float(1.0 + 15.0 * rng.uniform(1)[0])
    m = float(0.1 + 0.4 * rng.uniform(1)[0])
    margins = MarginPair.from_margin(m)
    raw_p = Param(rng.normal((n_cls, dz)))
    raw_z = Param(rng.normal((b, dz)))
    labels = _labels_with_pairs(rng, b, n_cls)

    frozen = None
    if variant is ContrastiveVariant.ADAPTIVE:
        # the re-scaling factors are stop-gradient constants, so the oracle
        # differentiates with them held at their values at the base point
        sim = l2_normalize_rows(raw_z.value)[0] @ l2_normalize_rows(raw_p.value)[0].T
        frozen = (losses.alpha_pos(sim, m), losses.alpha_neg(sim, m))

    def run():
        pu, pn = l2_normalize_rows(raw_p.value)
        zu, zn = l2_normalize_rows(raw_z.value)
        loss, gp, gz = losses.proto_contrastive_loss(pu, zu, labels, gamma, variant, margins, force_alpha=frozen)
        raw_p.grad += l2_normalize_rows_backward(pu, pn, gp)
        raw_z.grad += l2_normalize_rows_backward(zu, zn, gz)
        return loss

    return check_params(run, [raw_p, raw_z])


def check_semantic(seed: int) -> float:
    rng = Rng(seed)
    b, k = _dims(rng, 1, 8), _dims(rng, 1, 16)
    scores = Param(rng.normal((b, k)))
    labels = np.floor(rng.uniform(b) * k).astype(np.int64)
    gamma = float(0.5 + 10.0 * rng.uniform(1)[0])

    def run():
        loss, g = losses.semantic_loss(scores.value, labels, gamma)
        scores.grad += g
        return loss

    return check_params(run, [scores])


def check_center_semantic(seed: int) -> float:
    rng = Rng(seed)
    for _ in range(MAX_DRAWS):
        dh, ad, k, b = _dims(rng, 2, 12), _dims(rng, 1, 4), _dims(rng, 2, 5), _dims(rng, 2, 8)
        rn = _toy_net(relation_spec(dh, ad), rng, name="RN")
        h = Param(rng.normal((b, dh)))
        attrs = rng.normal((k, ad))
        labels = np.floor(rng.uniform(b) * k).astype(np.int64)
        means, _ = losses.class_means(h.value, labels)
        pairs = np.vstack([np.hstack([mu, a_j]) for mu in means for a_j in attrs])
        if _kink_margin(rn, pairs) > KINK_MARGIN:
            break
    gamma = float(0.5 + 4.0 * rng.uniform(1)[0])

    def run():
        loss, g = losses.center_semantic_loss(h.value, labels, rn, attrs, gamma)
        h.grad += g
        return loss

    return check_params(run, [h] + rn.params)


CHECKS: dict[str, Callable[[int], float]] = {
    "wgan": check_wgan,
    "gradient_penalty": check_gradient_penalty,
    "proto_plain": lambda s: _check_proto(s, ContrastiveVariant.PLAIN),
    "proto_margin": lambda s: _check_proto(s, ContrastiveVariant.MARGIN),
    "proto_adaptive": lambda s: _check_proto(s, ContrastiveVariant.ADAPTIVE),
    "semantic": check_semantic,
    "center_semantic": check_center_semantic,
}


@dataclass
class GradcheckRow:
    term: str
    max_rel_error: float
    n_configs: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def run_suite(seed: int = 0, n_configs: int = 100, corrupt: str | None = None) -> list[GradcheckRow]:
    """Run every check over ``n_configs`` seeded toy configurations.

    ``corrupt`` names a term whose analytic gradient is deliberately
    perturbed, to prove the harness can fail.
    """
    global _corrupt_active
    rows = []
    for term in LOSS_TERMS:
        worst = 0.0
        _corrupt_active = term == corrupt
        try:
            for i in range(n_configs):
                worst = max(worst, CHECKS[term](seed * 1_000_003 + i))
        finally:
            _corrupt_active = False
        rows.append(GradcheckRow(term, worst, n_configs))
    return rows
