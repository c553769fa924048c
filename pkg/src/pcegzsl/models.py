"""Feed-forward networks (G, D, E, H, RN), the prototype bank, checkpoints."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ndcore import (
    DTYPE,
    LEAKY_SLOPE,
    DimensionError,
    Param,
    Rng,
    as_matrix,
    l2_normalize_rows,
    l2_normalize_rows_backward,
    leaky_relu,
    leaky_relu_grad_mask,
    matmul,
)

INIT_STD = 0.02
ACTIVATIONS = ("linear", "leaky_relu")


@dataclass(frozen=True)
class MlpSpec:
    layer_dims: tuple[int, ...]
    hidden_activation: str = "leaky_relu"
    output_activation: str = "linear"
    # applied to the raw input before the first affine layer (used by H)
    input_activation: str = "linear"
    slope: float = LEAKY_SLOPE

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        object.__setattr__(self, "layer_dims", dims)
        if len(dims) < 2 or min(dims) < 1:
            raise ValueError(f"layer_dims needs >= 2 positive entries, got {dims}")
        for act in (self.hidden_activation, self.output_activation, self.input_activation):
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
        if not 0.0 < self.slope < 1.0:
            raise ValueError("LeakyReLU slope must lie in (0, 1)")

    @property
    def in_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def out_dim(self) -> int:
        return self.layer_dims[-1]

    @property
    def n_layers(self) -> int:
        return len(self.layer_dims) - 1


@dataclass
class MlpCache:
    x: np.ndarray
    inputs: list  # input to each affine layer
    pres: list  # pre-activation of each affine layer


class Mlp:
    """Stack of affine layers. Weights are (in, out); a layer computes x @ W + b."""

    def __init__(self, spec: MlpSpec, name: str, params: list[Param] | None = None):
        self.spec = spec
        self.name = name
        if params is None:
            params = []
            for d_in, d_out in zip(spec.layer_dims[:-1], spec.layer_dims[1:]):
                params += [Param(np.zeros((d_in, d_out))), Param(np.zeros((1, d_out)))]
        self.params = params

    @property
    def weights(self) -> list[Param]:
        return self.params[0::2]

    @property
    def biases(self) -> list[Param]:
        return self.params[1::2]

    def named_params(self) -> list[tuple[str, Param]]:
        out = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out += [(f"{self.name}.l{i}.W", w), (f"{self.name}.l{i}.b", b)]
        return out

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def _activation(self, layer: int) -> str:
        return self.spec.output_activation if layer == self.spec.n_layers - 1 else self.spec.hidden_activation

    def _act(self, x: np.ndarray, kind: str) -> np.ndarray:
        return leaky_relu(x, self.spec.slope) if kind == "leaky_relu" else x

    def _act_mask(self, x: np.ndarray, kind: str):
        return leaky_relu_grad_mask(x, self.spec.slope) if kind == "leaky_relu" else None

    def forward(self, x) -> tuple[np.ndarray, MlpCache]:
        x = as_matrix(x)
        if x.shape[1] != self.spec.in_dim:
            raise DimensionError(f"{self.name}: input has {x.shape[1]} cols, expected {self.spec.in_dim}")
        inp = self._act(x, self.spec.input_activation)
        pre0 = matmul(inp, self.weights[0].value) + self.biases[0].value
        out, cache = self._forward_tail(pre0)
        cache.x = x
        cache.inputs.insert(0, inp)
        return out, cache

    def _forward_tail(self, pre0: np.ndarray) -> tuple[np.ndarray, MlpCache]:
        """Run everything after the first affine map; the cache lacks layer 0's input."""
        pres, inputs = [pre0], []
        cur = self._act(pre0, self._activation(0))
        for i in range(1, self.spec.n_layers):
            inputs.append(cur)
            pre = matmul(cur, self.weights[i].value) + self.biases[i].value
            pres.append(pre)
            cur = self._act(pre, self._activation(i))
        return cur, MlpCache(x=None, inputs=inputs, pres=pres)

    def __call__(self, x) -> np.ndarray:
        return self.forward(x)[0]

    def _backward_tail(self, cache: MlpCache, grad_out: np.ndarray, accumulate: bool, offset: int) -> np.ndarray:
        """Backprop to the first pre-activation. ``offset`` shifts cache.inputs indexing."""
        g = grad_out
        for i in range(self.spec.n_layers - 1, -1, -1):
            mask = self._act_mask(cache.pres[i], self._activation(i))
            if mask is not None:
                g = g * mask
            if i == 0:
                break
            inp = cache.inputs[i - 1 + offset]
            if accumulate:
                self.weights[i].grad += matmul(inp.T, g)
                self.biases[i].grad += np.sum(g, axis=0, keepdims=True)
            g = matmul(g, self.weights[i].value.T)
        return g

    def backward(self, cache: MlpCache, grad_out, accumulate: bool = True) -> np.ndarray:
        """Accumulate parameter gradients (unless ``accumulate`` is False) and return d/d input."""
        g = self._backward_tail(cache, as_matrix(grad_out), accumulate, offset=1)
        if accumulate:
            self.weights[0].grad += matmul(cache.inputs[0].T, g)
            self.biases[0].grad += np.sum(g, axis=0, keepdims=True)
        g_in = matmul(g, self.weights[0].value.T)
        mask = self._act_mask(cache.x, self.spec.input_activation)
        return g_in if mask is None else g_in * mask


def init_network(spec: MlpSpec, rng: Rng, name: str = "net") -> Mlp:
    """Weights ~ N(0, 0.02^2), biases zero."""
    net = Mlp(spec, name)
    for w in net.weights:
        w.value[...] = rng.normal(w.shape, std=INIT_STD)
    return net


def generator_spec(attr_dim: int, noise_dim: int, hidden: int, feature_dim: int) -> MlpSpec:
    return MlpSpec((attr_dim + noise_dim, hidden, feature_dim))


def discriminator_spec(feature_dim: int, attr_dim: int, hidden: int) -> MlpSpec:
    return MlpSpec((feature_dim + attr_dim, hidden, 1))


def embedding_spec(feature_dim: int, hidden: int, d_h: int) -> MlpSpec:
    return MlpSpec((feature_dim, hidden, d_h))


def projection_spec(d_h: int, d_z: int) -> MlpSpec:
    return MlpSpec((d_h, d_z), input_activation="leaky_relu")


def relation_spec(d_h: int, attr_dim: int) -> MlpSpec:
    return MlpSpec((d_h + attr_dim, d_h, 1))


class PrototypeBank:
    """One learnable row per seen class; rows are normalized on use, not in storage."""

    def __init__(self, seen_classes, d_z: int, rng: Rng | None = None, value=None):
        self.seen_classes = [int(c) for c in seen_classes]
        self.class_index = {c: i for i, c in enumerate(self.seen_classes)}
        if value is None:
            value = rng.normal((len(self.seen_classes), d_z))
            value /= np.sqrt(np.sum(value * value, axis=1, keepdims=True))
        self.protos = Param(value)

    def rows_for(self, labels) -> np.ndarray:
        try:
            return np.array([self.class_index[int(c)] for c in labels], dtype=np.int64)
        except KeyError as exc:
            raise KeyError(f"label {exc.args[0]} has no prototype") from None

    def normalized(self) -> tuple[np.ndarray, np.ndarray]:
        return l2_normalize_rows(self.protos.value)

    def named_params(self):
        return [("P.protos", self.protos)]


def generate_features(g: Mlp, attrs, rng: Rng, n_per_class: int, noise_dim: int | None = None):
    """``n_per_class`` draws of G([a_c ; z]) per attribute row, labels 0..rows-1 in blocks."""
    attrs = as_matrix(attrs)
    if n_per_class < 0:
        raise ValueError("n_per_class must be non-negative")
    if noise_dim is None:
        noise_dim = g.spec.in_dim - attrs.shape[1]
    labels = np.repeat(np.arange(attrs.shape[0]), n_per_class)
    if n_per_class == 0:
        return np.zeros((0, g.spec.out_dim)), labels
    a = attrs[labels]
    z = rng.normal((len(labels), noise_dim))
    return g(np.hstack([a, z])), labels


@dataclass
class EmbedCache:
    e_cache: MlpCache
    h_cache: MlpCache
    z_unit: np.ndarray
    z_norms: np.ndarray


def embed_forward(e: Mlp, h_proj: Mlp, x) -> tuple[np.ndarray, np.ndarray, EmbedCache]:
    h, ec = e.forward(x)
    z_raw, hc = h_proj.forward(h)
    z_unit, norms = l2_normalize_rows(z_raw)
    return h, z_unit, EmbedCache(ec, hc, z_unit, norms)


def embed(e: Mlp, h_proj: Mlp, x) -> tuple[np.ndarray, np.ndarray]:
    h, z, _ = embed_forward(e, h_proj, x)
    return h, z


def embed_backward(e: Mlp, h_proj: Mlp, cache: EmbedCache, grad_h=None, grad_z=None, accumulate=True):
    """Backprop gradients on h and/or z_unit to the input features."""
    g_h = np.zeros((cache.e_cache.x.shape[0], e.spec.out_dim)) if grad_h is None else grad_h
    if grad_z is not None:
        g_raw = l2_normalize_rows_backward(cache.z_unit, cache.z_norms, grad_z)
        g_h = g_h + h_proj.backward(cache.h_cache, g_raw, accumulate)
    return e.backward(cache.e_cache, g_h, accumulate)


@dataclass
class RelationCache:
    tail: MlpCache
    h: np.ndarray
    attrs: np.ndarray
    shape: tuple[int, int]


def relation_forward(rn: Mlp, h, attrs) -> tuple[np.ndarray, RelationCache]:
    """Scores RN([h_i ; a_j]) for every (row, class) pair, batch x classes.

    The first layer is split into its h and a blocks so the B*S concatenations
    are never materialized.
    """
    h, attrs = as_matrix(h), as_matrix(attrs)
    d_h = h.shape[1]
    if d_h + attrs.shape[1] != rn.spec.in_dim:
        raise DimensionError(f"RN expects {rn.spec.in_dim} input cols, got {d_h}+{attrs.shape[1]}")
    w0 = rn.weights[0].value
    ph = matmul(h, w0[:d_h])
    pa = matmul(attrs, w0[d_h:])
    b, s = h.shape[0], attrs.shape[0]
    pre0 = (ph[:, None, :] + pa[None, :, :]).reshape(b * s, -1) + rn.biases[0].value
    out, tail = rn._forward_tail(pre0)
    return out.reshape(b, s), RelationCache(tail, h, attrs, (b, s))


def relation_scores(rn: Mlp, h, attrs) -> np.ndarray:
    return relation_forward(rn, h, attrs)[0]


def relation_backward(rn: Mlp, cache: RelationCache, grad_scores, accumulate: bool = True) -> np.ndarray:
    """Accumulate RN grads; return d/dh (the attribute side is data, not trained)."""
    b, s = cache.shape
    g = rn._backward_tail(cache.tail, as_matrix(grad_scores).reshape(b * s, 1), accumulate, offset=0)
    g3 = g.reshape(b, s, -1)
    d_h = cache.h.shape[1]
    g_h_pre = np.sum(g3, axis=1)
    if accumulate:
        w0 = rn.weights[0]
        w0.grad[:d_h] += matmul(cache.h.T, g_h_pre)
        w0.grad[d_h:] += matmul(cache.attrs.T, np.sum(g3, axis=0))
        rn.biases[0].grad += np.sum(g, axis=0, keepdims=True)
    return matmul(g_h_pre, rn.weights[0].value[:d_h].T)


@dataclass
class Networks:
    g: Mlp
    d: Mlp
    e: Mlp
    h: Mlp
    rn: Mlp
    bank: PrototypeBank
    extras: dict = field(default_factory=dict)

    def named_params(self) -> list[tuple[str, Param]]:
        out = []
        for net in (self.g, self.d, self.e, self.h, self.rn):
            out += net.named_params()
        return out + self.bank.named_params()


MAGIC = b"PCEM"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def write_tensors(path, tensors: dict[str, np.ndarray]):
    """Flat binary container: magic, u32 version, then (name, rows, cols, f64 data) records."""
    buf = bytearray(MAGIC)
    buf += struct.pack("<I", FORMAT_VERSION)
    for name, arr in tensors.items():
        arr = as_matrix(arr)
        raw = name.encode("utf-8")
        buf += struct.pack("<I", len(raw)) + raw
        buf += struct.pack("<II", *arr.shape)
        buf += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    Path(path).write_bytes(bytes(buf))


def read_tensors(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:4]!r}")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    pos, out = 8, {}
    try:
        while pos < len(data):
            (n,) = struct.unpack_from("<I", data, pos)
            name = data[pos + 4 : pos + 4 + n].decode("utf-8")
            pos += 4 + n
            rows, cols = struct.unpack_from("<II", data, pos)
            pos += 8
            nbytes = 8 * rows * cols
            if pos + nbytes > len(data):
                raise CheckpointError(f"{path}: tensor {name!r} truncated")
            out[name] = np.frombuffer(data, dtype="<f8", count=rows * cols, offset=pos).reshape(rows, cols).astype(DTYPE)
            pos += nbytes
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated record ({exc})") from None
    return out
