"""GZSL datasets: validation, the three-file directory format, a synthetic generator."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .ndcore import DTYPE, Rng, as_matrix, matmul

FEATURES_FILE = "features.csv"
ATTRIBUTES_FILE = "attributes.csv"
SPLITS_FILE = "splits.txt"
SPLIT_KEYS = ("train", "test_seen", "test_unseen", "seen", "unseen")


class DatasetError(ValueError):
    pass


class ParseError(DatasetError):
    pass


@dataclass(frozen=True)
class GzslDataset:
    features: np.ndarray
    labels: np.ndarray
    attributes: np.ndarray
    seen_classes: tuple[int, ...]
    unseen_classes: tuple[int, ...]
    train_idx: np.ndarray
    test_seen_idx: np.ndarray
    test_unseen_idx: np.ndarray

    def __post_init__(self):
        set_ = object.__setattr__
        set_(self, "features", as_matrix(self.features))
        set_(self, "labels", np.asarray(self.labels, dtype=np.int64).ravel())
        set_(self, "attributes", as_matrix(self.attributes))
        set_(self, "seen_classes", tuple(sorted(int(c) for c in self.seen_classes)))
        set_(self, "unseen_classes", tuple(sorted(int(c) for c in self.unseen_classes)))
        for name in ("train_idx", "test_seen_idx", "test_unseen_idx"):
            set_(self, name, np.asarray(getattr(self, name), dtype=np.int64).ravel())
        for arr in (self.features, self.labels, self.attributes, self.train_idx, self.test_seen_idx, self.test_unseen_idx):
            arr.setflags(write=False)
        self.validate()

    def validate(self):
        n = self.features.shape[0]
        if self.labels.shape[0] != n:
            raise DatasetError(f"{self.labels.shape[0]} labels for {n} feature rows")
        if not np.all(np.isfinite(self.features)) or not np.all(np.isfinite(self.attributes)):
            raise DatasetError("features and attributes must be finite")
        n_cls = self.attributes.shape[0]
        if n and (self.labels.min() < 0 or self.labels.max() >= n_cls):
            bad = self.labels[(self.labels < 0) | (self.labels >= n_cls)][0]
            raise DatasetError(f"label {bad} has no attribute row ({n_cls} classes)")
        seen, unseen = set(self.seen_classes), set(self.unseen_classes)
        if len(seen) != len(self.seen_classes) or len(unseen) != len(self.unseen_classes):
            raise DatasetError("duplicate class id in seen/unseen lists")
        both = sorted(seen & unseen)
        if both:
            raise DatasetError(f"class {both[0]} is listed as both seen and unseen")
        for c in self.seen_classes + self.unseen_classes:
            if not 0 <= c < n_cls:
                raise DatasetError(f"class {c} has no attribute row")
        owner = {}
        for name in ("train_idx", "test_seen_idx", "test_unseen_idx"):
            idx = getattr(self, name)
            if idx.size and (idx.min() < 0 or idx.max() >= n):
                raise DatasetError(f"{name} holds an index outside [0, {n})")
            for i in idx.tolist():
                if i in owner:
                    raise DatasetError(f"index {i} appears in both {owner[i]} and {name}")
                owner[i] = name
        for i in self.train_idx.tolist():
            if int(self.labels[i]) not in seen:
                kind = "unseen split" if int(self.labels[i]) in unseen else "no split"
                raise DatasetError(f"label {self.labels[i]} in {kind} appears in train")
        for i in self.test_seen_idx.tolist():
            if int(self.labels[i]) not in seen:
                raise DatasetError(f"label {self.labels[i]} in test_seen is not a seen class")
        for i in self.test_unseen_idx.tolist():
            if int(self.labels[i]) not in unseen:
                raise DatasetError(f"label {self.labels[i]} in test_unseen is not an unseen class")

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def attr_dim(self) -> int:
        return self.attributes.shape[1]

    def seen_attributes(self) -> np.ndarray:
        return self.attributes[list(self.seen_classes)]

    def unseen_attributes(self) -> np.ndarray:
        return self.attributes[list(self.unseen_classes)]

    def summary(self) -> str:
        return (
            f"classes={len(self.seen_classes)}+{len(self.unseen_classes)} "
            f"samples={self.features.shape[0]} dim={self.feature_dim}"
        )

    def equals(self, other: "GzslDataset") -> bool:
        return (
            np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.attributes, other.attributes)
            and self.seen_classes == other.seen_classes
            and self.unseen_classes == other.unseen_classes
            and all(
                np.array_equal(getattr(self, k), getattr(other, k))
                for k in ("train_idx", "test_seen_idx", "test_unseen_idx")
            )
        )


def iterate_batches(indices, batch_size: int, rng: Rng):
    """Shuffle ``indices`` once and yield consecutive chunks; the last may be short."""
    indices = np.asarray(indices)
    order = indices[rng.permutation(len(indices))]
    for start in range(0, len(order), batch_size):
        yield order[start : start + batch_size]


@dataclass(frozen=True)
class SyntheticSpec:
    n_seen: int = 10
    n_unseen: int = 3
    attr_dim: int = 20
    feature_dim: int = 64
    samples_per_class: int = 200
    noise_sigma: float = 1.0
    class_overlap: float = 0.3
    seed: int = 0

    def __post_init__(self):
        for name in ("n_seen", "n_unseen", "attr_dim", "feature_dim", "samples_per_class"):
            if int(getattr(self, name)) < 1:
                raise DatasetError(f"{name} must be positive")
        if not self.noise_sigma > 0:
            raise DatasetError("noise_sigma must be positive")
        if not 0.0 <= self.class_overlap <= 1.0:
            raise DatasetError("class_overlap must lie in [0, 1]")
        if self.samples_per_class < 2:
            raise DatasetError("samples_per_class must be >= 2 so seen classes have train and test rows")


def generate_synthetic(spec: SyntheticSpec) -> GzslDataset:
    """Linear-Gaussian GZSL problem.

    Class attributes are unit Gaussian rows pulled toward their mean by
    ``class_overlap``; a fixed random map W turns them into class means, and
    samples add isotropic noise. Class ids are shuffled before the seen/unseen
    split. Each seen class puts 80% of its samples in train.
    """
    rng = Rng(spec.seed)
    n_cls = spec.n_seen + spec.n_unseen
    attrs = rng.normal((n_cls, spec.attr_dim))
    attrs /= np.sqrt(np.sum(attrs * attrs, axis=1, keepdims=True))
    attrs = (1.0 - spec.class_overlap) * attrs + spec.class_overlap * np.mean(attrs, axis=0, keepdims=True)
    w = rng.normal((spec.feature_dim, spec.attr_dim))
    means = matmul(attrs, w.T)

    order = rng.permutation(n_cls)
    seen = np.sort(order[: spec.n_seen])
    unseen = np.sort(order[spec.n_seen :])

    n = spec.samples_per_class
    labels = np.repeat(np.arange(n_cls), n)
    features = means[labels] + spec.noise_sigma * rng.normal((n_cls * n, spec.feature_dim))

    n_train = min(n - 1, max(1, int(math.floor(0.8 * n + 0.5))))
    train, test_seen = [], []
    for c in seen:
        rows = c * n + rng.permutation(n)
        train.append(np.sort(rows[:n_train]))
        test_seen.append(np.sort(rows[n_train:]))
    test_unseen = np.concatenate([np.arange(c * n, (c + 1) * n) for c in unseen])
    return GzslDataset(
        features=features,
        labels=labels,
        attributes=attrs,
        seen_classes=tuple(seen.tolist()),
        unseen_classes=tuple(unseen.tolist()),
        train_idx=np.concatenate(train),
        test_seen_idx=np.concatenate(test_seen),
        test_unseen_idx=test_unseen,
    )


def _fmt(v: float) -> str:
    # shortest repr that round-trips; at most 17 significant digits
    return repr(float(v))


def save_dataset(ds: GzslDataset, dir_path) -> Path:
    out = Path(dir_path)
    out.mkdir(parents=True, exist_ok=True)
    lines = [",".join([*map(_fmt, row), str(int(lab))]) for row, lab in zip(ds.features, ds.labels)]
    (out / FEATURES_FILE).write_text("".join(line + "\n" for line in lines), newline="\n")
    attr_lines = [",".join(map(_fmt, row)) for row in ds.attributes]
    (out / ATTRIBUTES_FILE).write_text("".join(line + "\n" for line in attr_lines), newline="\n")
    splits = {
        "train": ds.train_idx,
        "test_seen": ds.test_seen_idx,
        "test_unseen": ds.test_unseen_idx,
        "seen": ds.seen_classes,
        "unseen": ds.unseen_classes,
    }
    text = "".join(f"{k}: {' '.join(str(int(i)) for i in splits[k])}".rstrip() + "\n" for k in SPLIT_KEYS)
    (out / SPLITS_FILE).write_text(text, newline="\n")
    return out


def _parse_csv(path: Path, with_label: bool):
    rows, labels = [], []
    width = None
    with open(path, newline="") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            tokens = line.split(",")
            if width is None:
                width = len(tokens)
            elif len(tokens) != width:
                raise ParseError(f"{path.name}: line {lineno} has {len(tokens)} columns, expected {width}")
            vals = tokens[:-1] if with_label else tokens
            try:
                row = [float(t) for t in vals]
            except ValueError:
                col = next(i for i, t in enumerate(vals) if not _is_float(t))
                raise ParseError(f"{path.name}: line {lineno}, column {col + 1}: not a number: {vals[col]!r}") from None
            if with_label:
                try:
                    labels.append(int(tokens[-1]))
                except ValueError:
                    raise ParseError(
                        f"{path.name}: line {lineno}, column {len(tokens)}: label is not an integer: {tokens[-1]!r}"
                    ) from None
            rows.append(row)
    if not rows:
        raise ParseError(f"{path.name}: no data rows")
    return np.array(rows, dtype=DTYPE), np.array(labels, dtype=np.int64)


def _is_float(tok: str) -> bool:
    try:
        float(tok)
    except ValueError:
        return False
    return True


def _parse_splits(path: Path) -> dict[str, list[int]]:
    found = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        key, sep, rest = line.partition(":")
        key = key.strip()
        if not sep or key not in SPLIT_KEYS:
            raise ParseError(f"{path.name}: line {lineno}: expected one of {', '.join(k + ':' for k in SPLIT_KEYS)}")
        if key in found:
            raise ParseError(f"{path.name}: line {lineno}: duplicate {key!r} line")
        try:
            found[key] = [int(t) for t in rest.split()]
        except ValueError:
            raise ParseError(f"{path.name}: line {lineno}: non-integer entry") from None
    missing = [k for k in SPLIT_KEYS if k not in found]
    if missing:
        raise ParseError(f"{path.name}: missing {missing[0]!r} line")
    return found


def load_dataset(features_path, attributes_path, splits_path) -> GzslDataset:
    features, labels = _parse_csv(Path(features_path), with_label=True)
    attributes, _ = _parse_csv(Path(attributes_path), with_label=False)
    sp = _parse_splits(Path(splits_path))
    return GzslDataset(
        features=features,
        labels=labels,
        attributes=attributes,
        seen_classes=sp["seen"],
        unseen_classes=sp["unseen"],
        train_idx=sp["train"],
        test_seen_idx=sp["test_seen"],
        test_unseen_idx=sp["test_unseen"],
    )


def load_dataset_dir(dir_path) -> GzslDataset:
    d = Path(dir_path)
    return load_dataset(d / FEATURES_FILE, d / ATTRIBUTES_FILE, d / SPLITS_FILE)
