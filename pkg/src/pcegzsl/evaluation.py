"""Final softmax classifier and the GZSL / ZSL metrics (U, S, H, T)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import GzslDataset
from .ndcore import Param, Rng, adam_step, as_matrix, matmul, softmax_rows
from .pipeline import SEED_EVAL, TrainConfig, build_classifier_trainset, synthesize_unseen


@dataclass
class SoftmaxClassifier:
    """Linear layer over embeddings; column ``j`` scores class id ``classes[j]``."""

    weight: Param
    bias: Param
    classes: np.ndarray

    def logits(self, x) -> np.ndarray:
        return matmul(as_matrix(x), self.weight.value) + self.bias.value

    def predict(self, x) -> np.ndarray:
        # np.argmax keeps the first maximum, i.e. the lowest class index
        return self.classes[np.argmax(self.logits(x), axis=1)]


def cross_entropy(clf: SoftmaxClassifier, x, cols) -> float:
    """Mean cross-entropy; accumulates gradients into the classifier params."""
    x = as_matrix(x)
    n = x.shape[0]
    logits = clf.logits(x)
    p = softmax_rows(logits)
    loss = float(np.mean(-np.log(p[np.arange(n), cols])))
    p[np.arange(n), cols] -= 1.0
    p /= n
    clf.weight.grad += matmul(x.T, p)
    clf.bias.grad += np.sum(p, axis=0, keepdims=True)
    return loss


def train_softmax_classifier(
    embeddings,
    labels,
    n_classes: int,
    lr: float = 1e-3,
    epochs: int = 100,
    rng: Rng | None = None,
    batch_size: int = 64,
    classes=None,
) -> SoftmaxClassifier:
    """Fit a zero-initialized softmax layer with Adam on shuffled minibatches.

    ``labels`` are column indices in ``[0, n_classes)``; ``classes`` maps
    columns back to class ids (identity by default).
    """
    x = as_matrix(embeddings)
    y = np.asarray(labels, dtype=np.int64)
    if x.shape[0] == 0:
        raise ValueError("empty training set")
    if y.min() < 0 or y.max() >= n_classes:
        raise ValueError(f"labels must lie in [0, {n_classes})")
    rng = rng or Rng(0)
    clf = SoftmaxClassifier(
        Param(np.zeros((x.shape[1], n_classes))),
        Param(np.zeros((1, n_classes))),
        np.arange(n_classes) if classes is None else np.asarray(classes, dtype=np.int64),
    )
    for _ in range(epochs):
        order = rng.permutation(x.shape[0])
        for start in range(0, len(order), batch_size):
            sel = order[start : start + batch_size]
            clf.weight.zero_grad()
            clf.bias.zero_grad()
            cross_entropy(clf, x[sel], y[sel])
            adam_step(clf.weight, lr, 0.9, 0.999)
            adam_step(clf.bias, lr, 0.9, 0.999)
    return clf


def per_class_top1(classifier, embeddings, labels, class_set) -> float:
    """Accuracy averaged over the classes in ``class_set`` (not over samples), x100."""
    labels = np.asarray(labels, dtype=np.int64)
    class_set = [int(c) for c in class_set]
    if not class_set:
        raise ValueError("class_set is empty")
    pred = classifier.predict(embeddings)
    total = 0.0
    for c in class_set:
        sel = labels == c
        count = int(np.count_nonzero(sel))
        if not count:
            raise ValueError(f"class {c} has no samples")
        # plain float arithmetic in class order, so tallies reproduce it bit for bit
        total += int(np.count_nonzero(pred[sel] == c)) / count
    return 100.0 * total / len(class_set)


def harmonic_mean(u: float, s: float) -> float:
    if u < 0 or s < 0:
        raise ValueError("accuracies must be non-negative")
    if u + s == 0:
        return 0.0
    return 2.0 * u * s / (u + s)


@dataclass(frozen=True)
class MetricBlock:
    U: float
    S: float
    H: float
    T: float


def fit_on(emb, labels, classes, cfg: TrainConfig, rng: Rng) -> SoftmaxClassifier:
    classes = np.asarray(sorted(int(c) for c in classes), dtype=np.int64)
    col = {c: j for j, c in enumerate(classes.tolist())}
    cols = np.array([col[int(c)] for c in labels], dtype=np.int64)
    return train_softmax_classifier(
        emb, cols, len(classes), cfg.classifier_lr, cfg.classifier_epochs, rng, cfg.classifier_batch, classes
    )


def evaluate(nets, ds: GzslDataset, cfg: TrainConfig, fit=None, n_synth: int | None = None) -> MetricBlock:
    """GZSL classifier over S+U gives U and S (and H); a ZSL classifier over U gives T.

    ``fit(embeddings, labels, classes, rng)`` may replace the softmax
    trainer; it must return an object with ``predict``.
    """
    fit = fit or (lambda x, y, classes, rng: fit_on(x, y, classes, cfg, rng))
    rng = Rng(cfg.seed).child(SEED_EVAL)
    n = cfg.n_synth_per_unseen if n_synth is None else n_synth
    synth = synthesize_unseen(nets.g, ds, n, rng)

    x_g, y_g = build_classifier_trainset(nets.e, nets.h, ds, synth, "gzsl")
    gzsl = fit(x_g, y_g, ds.seen_classes + ds.unseen_classes, rng)
    emb_unseen = nets.e(ds.features[ds.test_unseen_idx])
    emb_seen = nets.e(ds.features[ds.test_seen_idx])
    u = per_class_top1(gzsl, emb_unseen, ds.labels[ds.test_unseen_idx], ds.unseen_classes)
    s = per_class_top1(gzsl, emb_seen, ds.labels[ds.test_seen_idx], ds.seen_classes)

    x_z, y_z = build_classifier_trainset(nets.e, nets.h, ds, synth, "zsl")
    zsl = fit(x_z, y_z, ds.unseen_classes, rng)
    t = per_class_top1(zsl, emb_unseen, ds.labels[ds.test_unseen_idx], ds.unseen_classes)
    return MetricBlock(U=u, S=s, H=harmonic_mean(u, s), T=t)


METRICS_HEADER = "setting,U,S,H,T"


def metrics_row(setting: str, m: MetricBlock, mode: str = "both") -> str:
    if mode == "zsl":
        return f"{setting},,,,{m.T:.2f}"
    if mode == "gzsl":
        return f"{setting},{m.U:.2f},{m.S:.2f},{m.H:.2f},"
    return f"{setting},{m.U:.2f},{m.S:.2f},{m.H:.2f},{m.T:.2f}"


def metrics_csv(rows: list[str]) -> str:
    return "\n".join([METRICS_HEADER, *rows]) + "\n"
