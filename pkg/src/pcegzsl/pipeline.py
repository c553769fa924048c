"""Training loop: critic updates, then one joint step of G, E, H, RN and the prototypes."""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import losses
from .data import GzslDataset, iterate_batches
from .losses import ContrastiveVariant, LossWeights, MarginPair
from .models import (
    Mlp,
    Networks,
    PrototypeBank,
    embed_backward,
    embed_forward,
    discriminator_spec,
    embedding_spec,
    generate_features,
    generator_spec,
    init_network,
    projection_spec,
    read_tensors,
    relation_spec,
    write_tensors,
    CheckpointError,
)
from .ndcore import Rng, adam_step, l2_normalize_rows_backward

log = logging.getLogger(__name__)

# child-seed offsets; every random stream derives from the config seed
SEED_INIT = 1
SEED_BATCHES = 2
SEED_NOISE = 3
SEED_EVAL = 4


class NumericalAbort(RuntimeError):
    def __init__(self, term: str, epoch: int, value: float):
        super().__init__(f"non-finite {term} loss ({value}) at epoch {epoch}")
        self.term, self.epoch, self.value = term, epoch, value


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.5
    beta2: float = 0.99
    batch_size: int = 64
    epochs: int = 80
    n_critic: int = 5
    gamma_ins: float = 80.0
    margin_m: float = 0.4
    gamma_sem: float = 10.0
    weights: LossWeights = field(default_factory=LossWeights)
    variant: ContrastiveVariant = ContrastiveVariant.ADAPTIVE
    hidden_dim: int = 128
    d_h: int = 64
    d_z: int = 32
    noise_dim: int = 20
    n_synth_per_unseen: int = 200
    classifier_lr: float = 1e-3
    classifier_epochs: int = 100
    classifier_batch: int = 64
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "variant", ContrastiveVariant(self.variant))
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.n_critic < 1:
            raise ValueError("n_critic must be >= 1")
        if not -1.0 < self.margin_m < 1.0:
            raise ValueError("margin_m must lie in (-1, 1)")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        for name in ("lr", "gamma_ins", "gamma_sem", "classifier_lr"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("hidden_dim", "d_h", "d_z", "noise_dim", "classifier_batch"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    @property
    def margins(self) -> MarginPair:
        return MarginPair.from_margin(self.margin_m)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


# Full-scale hyperparameters for the four standard benchmarks.
BENCHMARK_PRESETS = {
    "AWA1": dict(lr=1e-4, batch_size=4096, d_z=1024, weight=0.001, n_synth=1800),
    "AWA2": dict(lr=1e-4, batch_size=4096, d_z=1024, weight=0.001, n_synth=2400),
    "CUB": dict(lr=1e-4, batch_size=1024, d_z=512, weight=0.01, n_synth=100),
    "SUN": dict(lr=5e-5, batch_size=512, d_z=512, weight=0.01, n_synth=100),
}


def benchmark_config(dataset: str, **overrides) -> TrainConfig:
    """Full-scale hyperparameters for one of AWA1, AWA2, CUB, SUN."""
    p = BENCHMARK_PRESETS[dataset.upper()]
    w = p["weight"]
    cfg = TrainConfig(
        lr=p["lr"],
        beta1=0.5,
        beta2=0.99,
        batch_size=p["batch_size"],
        gamma_ins=80.0,
        margin_m=0.4,
        gamma_sem=10.0,
        weights=LossWeights(lambda_proto=w, beta_sem=w, phi_center=w),
        hidden_dim=4096,
        d_h=2048,
        d_z=p["d_z"],
        n_synth_per_unseen=p["n_synth"],
    )
    return cfg.replace(**overrides)


def build_networks(ds: GzslDataset, cfg: TrainConfig, rng: Rng) -> Networks:
    fd, ad = ds.feature_dim, ds.attr_dim
    g = init_network(generator_spec(ad, cfg.noise_dim, cfg.hidden_dim, fd), rng, "G")
    d = init_network(discriminator_spec(fd, ad, cfg.hidden_dim), rng, "D")
    e = init_network(embedding_spec(fd, cfg.hidden_dim, cfg.d_h), rng, "E")
    h = init_network(projection_spec(cfg.d_h, cfg.d_z), rng, "H")
    rn = init_network(relation_spec(cfg.d_h, ad), rng, "RN")
    bank = PrototypeBank(ds.seen_classes, cfg.d_z, rng)
    return Networks(g, d, e, h, rn, bank)


@dataclass
class EpochRecord:
    epoch: int
    d_loss: float
    g_loss: float
    proto: float
    sem: float
    center: float
    seconds: float


@dataclass
class TrainReport:
    records: list[EpochRecord] = field(default_factory=list)
    metrics: object = None

    def to_csv(self) -> str:
        lines = ["epoch,d_loss,g_loss,proto,sem,center,seconds"]
        for r in self.records:
            vals = [r.d_loss, r.g_loss, r.proto, r.sem, r.center, r.seconds]
            lines.append(f"{r.epoch}," + ",".join(f"{v:.6f}" for v in vals))
        return "\n".join(lines) + "\n"


@dataclass
class TrainState:
    nets: Networks
    epoch: int
    batch_rng: Rng
    noise_rng: Rng


def init_state(ds: GzslDataset, cfg: TrainConfig) -> TrainState:
    root = Rng(cfg.seed)
    nets = build_networks(ds, cfg, root.child(SEED_INIT))
    return TrainState(nets, 0, root.child(SEED_BATCHES), root.child(SEED_NOISE))


def _step(params, cfg: TrainConfig):
    for p in params:
        adam_step(p, cfg.lr, cfg.beta1, cfg.beta2)


def critic_update(nets: Networks, x, a, cfg: TrainConfig, rng: Rng) -> float:
    d, g = nets.d, nets.g
    d.zero_grad()
    fake = g(np.hstack([a, rng.normal((x.shape[0], cfg.noise_dim))]))
    d_loss, _ = losses.critic_loss(d, x, fake, a, rng, cfg.weights.gp_coeff)
    _step(d.params, cfg)
    return d_loss


def generator_update(nets: Networks, x, rows, seen_attrs, cfg: TrainConfig, rng: Rng) -> dict:
    """One joint step on L_WGAN(G) + weighted embedding terms.

    Real and synthesized features (one fake per real, same classes) both go
    through E; gradients from the embedding terms reach G through the fakes.
    D is only read here and its gradient buffers stay untouched.
    """
    g, d, e, hp, rn, bank = nets.g, nets.d, nets.e, nets.h, nets.rn, nets.bank
    w = cfg.weights
    trainable = [g] + ([e, hp, rn] if (w.lambda_proto or w.beta_sem or w.phi_center) else [])
    for net in trainable:
        net.zero_grad()
    bank.protos.zero_grad()

    a = seen_attrs[rows]
    n = x.shape[0]
    fake, g_cache = g.forward(np.hstack([a, rng.normal((n, cfg.noise_dim))]))
    g_loss, g_fake = losses.generator_adversarial_loss(d, fake, a)
    out = {"g_loss": g_loss, "proto": 0.0, "sem": 0.0, "center": 0.0}

    if len(trainable) > 1:
        both = np.vstack([x, fake])
        rows2 = np.concatenate([rows, rows])
        h, z, ecache = embed_forward(e, hp, both)
        grad_h = np.zeros_like(h)
        grad_z = None
        if w.lambda_proto:
            pu, pn = bank.normalized()
            loss, gp, gz = losses.proto_contrastive_loss(pu, z, rows2, cfg.gamma_ins, cfg.variant, cfg.margins)
            out["proto"] = loss
            grad_z = w.lambda_proto * gz
            bank.protos.grad += l2_normalize_rows_backward(pu, pn, w.lambda_proto * gp)
        if w.beta_sem:
            loss, gh = losses.sample_semantic_loss(h, rows2, rn, seen_attrs, cfg.gamma_sem, scale=w.beta_sem)
            out["sem"] = loss
            grad_h += gh
        if w.phi_center:
            loss, gh = losses.center_semantic_loss(h, rows2, rn, seen_attrs, cfg.gamma_sem, scale=w.phi_center)
            out["center"] = loss
            grad_h += gh
        g_both = embed_backward(e, hp, ecache, grad_h, grad_z)
        g_fake = g_fake + g_both[n:]

    g.backward(g_cache, g_fake)
    _step(g.params, cfg)
    if len(trainable) > 1:
        for net in (e, hp, rn):
            _step(net.params, cfg)
        if w.lambda_proto:
            _step([bank.protos], cfg)
    return out


def train_epoch(state: TrainState, ds: GzslDataset, cfg: TrainConfig) -> EpochRecord:
    t0 = time.perf_counter()
    epoch = state.epoch + 1
    nets = state.nets
    seen_attrs = ds.seen_attributes()
    sums = {"d_loss": 0.0, "g_loss": 0.0, "proto": 0.0, "sem": 0.0, "center": 0.0}
    n_batches = 0
    for idx in iterate_batches(ds.train_idx, cfg.batch_size, state.batch_rng):
        x = ds.features[idx]
        rows = nets.bank.rows_for(ds.labels[idx])
        a = seen_attrs[rows]
        d_loss = 0.0
        for _ in range(cfg.n_critic):
            d_loss = critic_update(nets, x, a, cfg, state.noise_rng)
        parts = generator_update(nets, x, rows, seen_attrs, cfg, state.noise_rng)
        parts["d_loss"] = d_loss
        for k, v in parts.items():
            if not math.isfinite(v):
                raise NumericalAbort(k, epoch, v)
            sums[k] += v
        n_batches += 1
    state.epoch = epoch
    means = {k: v / max(n_batches, 1) for k, v in sums.items()}
    return EpochRecord(epoch=epoch, seconds=time.perf_counter() - t0, **means)


def train(ds: GzslDataset, cfg: TrainConfig, state: TrainState | None = None, epochs: int | None = None):
    """Train for ``epochs`` (default ``cfg.epochs``) more epochs.

    Returns ``(networks, prototype bank, report, state)``; pass ``state`` back
    in to resume exactly where a previous call stopped.
    """
    if state is None:
        state = init_state(ds, cfg)
    report = TrainReport()
    for _ in range(cfg.epochs if epochs is None else epochs):
        rec = train_epoch(state, ds, cfg)
        report.records.append(rec)
        log.info(
            "epoch %d d=%.4f g=%.4f proto=%.4f sem=%.4f center=%.4f (%.1fs)",
            rec.epoch, rec.d_loss, rec.g_loss, rec.proto, rec.sem, rec.center, rec.seconds,
        )
    return state.nets, state.nets.bank, report, state


def synthesize_unseen(g: Mlp, ds: GzslDataset, n_per_class: int, rng: Rng):
    feats, rows = generate_features(g, ds.unseen_attributes(), rng, n_per_class)
    return feats, np.asarray(ds.unseen_classes, dtype=np.int64)[rows]


def build_classifier_trainset(e: Mlp, h_proj: Mlp | None, ds: GzslDataset, synth, mode: str = "gzsl"):
    """Embeddings E(x) used to fit the final classifier.

    GZSL uses real seen training rows plus the synthetic unseen rows; ZSL
    only the synthetic ones. ``h_proj`` is accepted for symmetry with
    ``embed`` but unused: the classifier lives in E's output space.
    """
    feats, labels = synth
    if mode == "zsl":
        return e(feats), np.asarray(labels, dtype=np.int64)
    if mode != "gzsl":
        raise ValueError(f"unknown mode {mode!r}")
    x = np.vstack([ds.features[ds.train_idx], feats])
    y = np.concatenate([ds.labels[ds.train_idx], labels])
    return e(x), y


# checkpoint state ------------------------------------------------------------


def _int_tensor(v: int) -> np.ndarray:
    # split into 32-bit halves so 64-bit values survive the float64 container
    return np.array([[float(v >> 32), float(v & 0xFFFFFFFF)]])


def _tensor_int(t: np.ndarray) -> int:
    return (int(t[0, 0]) << 32) | int(t[0, 1])


def state_tensors(state: TrainState) -> dict[str, np.ndarray]:
    out = {}
    for name, p in state.nets.named_params():
        out[name] = p.value
        out[name + ".adam_m"] = p.adam_m
        out[name + ".adam_v"] = p.adam_v
        out[name + ".step"] = _int_tensor(p.step_count)
    out["meta.seen_classes"] = np.array([state.nets.bank.seen_classes], dtype=float)
    out["meta.epoch"] = _int_tensor(state.epoch)
    for tag, r in (("batch", state.batch_rng), ("noise", state.noise_rng)):
        out[f"meta.rng.{tag}.seed"] = _int_tensor(r.seed)
        out[f"meta.rng.{tag}.counter"] = _int_tensor(r.counter)
    return out


def save_checkpoint(path, state: TrainState):
    write_tensors(path, state_tensors(state))


def load_checkpoint(path, ds: GzslDataset, cfg: TrainConfig) -> TrainState:
    """Rebuild a TrainState, checking every tensor shape against ``cfg`` and ``ds``."""
    tensors = read_tensors(path)
    state = init_state(ds, cfg)
    expected = state_tensors(state)
    missing = sorted(set(expected) - set(tensors))
    if missing:
        raise CheckpointError(f"{path}: missing tensor {missing[0]!r}")
    extra = sorted(set(tensors) - set(expected))
    if extra:
        raise CheckpointError(f"{path}: unexpected tensor {extra[0]!r}")
    for name, arr in expected.items():
        if tensors[name].shape != arr.shape:
            raise CheckpointError(
                f"{path}: tensor {name!r} has shape {tensors[name].shape}, config implies {arr.shape}"
            )
    if tuple(int(c) for c in tensors["meta.seen_classes"][0]) != tuple(ds.seen_classes):
        raise CheckpointError(f"{path}: seen classes differ from the dataset's")
    for name, p in state.nets.named_params():
        p.value[...] = tensors[name]
        p.adam_m[...] = tensors[name + ".adam_m"]
        p.adam_v[...] = tensors[name + ".adam_v"]
        p.step_count = _tensor_int(tensors[name + ".step"])
    state.epoch = _tensor_int(tensors["meta.epoch"])
    state.batch_rng = Rng(_tensor_int(tensors["meta.rng.batch.seed"]), _tensor_int(tensors["meta.rng.batch.counter"]))
    state.noise_rng = Rng(_tensor_int(tensors["meta.rng.noise.seed"]), _tensor_int(tensors["meta.rng.noise.counter"]))
    return state
