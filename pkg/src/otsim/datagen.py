"""Synthetic client datasets and heterogeneity mechanisms.

Client A is drawn from a K-component Gaussian mixture ``M_A`` (one component
per class).  Client B draws each sample from ``M_A`` with probability
``overlap`` and from a second mixture ``M_B`` otherwise.  ``M_B`` reuses the
component geometry of ``M_A`` under a fixed derangement of the class labels, so
the two joint distributions p(x, y) share no component and a single model
cannot fit both.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.linalg import expm

__all__ = [
    "Dataset",
    "SyntheticConfig",
    "HeterogeneitySpec",
    "Partition",
    "gen_synthetic_pair",
    "apply_feature_skew",
    "apply_label_skew",
    "apply_concept_shift",
    "apply_heterogeneity",
    "train_test_split",
    "subsample_per_class",
    "save_csv",
    "load_csv",
    "save_binary",
    "load_binary",
]

_DATASET_MAGIC = b"OTSIMDS\x00"
_DATASET_VERSION = 1


@dataclass(frozen=True, eq=False)
class Dataset:
    """Feature matrix plus integer labels for one client."""

    features: np.ndarray
    labels: np.ndarray
    n_classes: int = 0

    def __post_init__(self) -> None:
        X = np.ascontiguousarray(self.features, dtype=np.float64)
        y = np.ascontiguousarray(self.labels)
        if X.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {X.shape}")
        if y.ndim != 1 or y.shape[0] != X.shape[0]:
            raise ValueError(
                f"labels must be a vector of length {X.shape[0]}, got shape {y.shape}"
            )
        if X.shape[0] < 1:
            raise ValueError("dataset must contain at least one sample")
        if not np.issubdtype(y.dtype, np.integer):
            if not np.all(np.equal(np.mod(y, 1), 0)):
                raise ValueError("labels must be integer class indices")
        y = y.astype(np.int64)
        if y.min() < 0:
            raise ValueError("labels must be non-negative")
        if not np.all(np.isfinite(X)):
            raise ValueError("features contain NaN or Inf")
        k = int(self.n_classes) if self.n_classes else int(y.max()) + 1
        if y.max() >= k:
            raise ValueError(f"label {int(y.max())} out of range for {k} classes")
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "n_classes", k)

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_classes)

    def take(self, idx: np.ndarray) -> "Dataset":
        return Dataset(self.features[idx], self.labels[idx], self.n_classes)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.n_classes == other.n_classes
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
        )

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True)
class SyntheticConfig:
    dim: int = 16
    n_classes: int = 4
    n_samples: int = 800
    overlap: float = 1.0
    mean_sep: float = 6.0
    cov_scale: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        problems = []
        if self.dim < 2:
            problems.append(f"dim must be >= 2 (got {self.dim})")
        if self.n_classes < 2:
            problems.append(f"n_classes must be >= 2 (got {self.n_classes})")
        if self.n_samples < self.n_classes:
            problems.append(
                f"n_samples must be >= n_classes (got {self.n_samples} < {self.n_classes})"
            )
        if not 0.0 <= self.overlap <= 1.0:
            problems.append(f"overlap must lie in [0, 1] (got {self.overlap})")
        if self.mean_sep < 0:
            problems.append(f"mean_sep must be >= 0 (got {self.mean_sep})")
        if self.cov_scale <= 0:
            problems.append(f"cov_scale must be > 0 (got {self.cov_scale})")
        if problems:
            raise ValueError("invalid SyntheticConfig: " + "; ".join(problems))


@dataclass(frozen=True)
class HeterogeneitySpec:
    kind: str
    severity: float
    seed: int = 0

    KINDS = ("feature_skew", "label_skew", "concept_shift")

    def validate(self) -> None:
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown heterogeneity kind {self.kind!r}; expected one of {self.KINDS}")
        if self.kind == "feature_skew" and self.severity < 0:
            raise ValueError(f"feature skew severity must be >= 0 (got {self.severity})")
        if self.kind == "label_skew" and self.severity <= 0:
            raise ValueError(f"Dirichlet concentration must be > 0 (got {self.severity})")
        if self.kind == "concept_shift" and not 0.0 <= self.severity <= 1.0:
            raise ValueError(f"permuted-label fraction must lie in [0, 1] (got {self.severity})")


class Partition(list):
    """List of client datasets; ``empty_slices`` names (client, class) pairs left empty."""

    def __init__(self, clients, empty_slices=()):
        super().__init__(clients)
        self.empty_slices: list[tuple[int, int]] = list(empty_slices)


def _balanced_labels(n: int, k: int, rng: np.random.Generator) -> np.ndarray:
    y = np.arange(n) % k
    rng.shuffle(y)
    return y


def _derangement(k: int, rng: np.random.Generator) -> np.ndarray:
    if k < 2:
        raise ValueError("a derangement needs at least 2 classes")
    while True:
        perm = rng.permutation(k)
        if np.all(perm != np.arange(k)):
            return perm


def _mixture_means(cfg: SyntheticConfig, rng: np.random.Generator) -> np.ndarray:
    # orthonormal directions when K <= p, so all class means are equidistant
    G = rng.standard_normal((cfg.dim, cfg.n_classes))
    if cfg.n_classes <= cfg.dim:
        Q, R = np.linalg.qr(G)
        dirs = (Q * np.sign(np.diag(R))).T
    else:
        dirs = G.T / np.linalg.norm(G.T, axis=1, keepdims=True)
    return cfg.mean_sep * dirs


def gen_synthetic_pair(cfg: SyntheticConfig) -> tuple[Dataset, Dataset]:
    """Draw two clients whose distributional overlap is set by ``cfg.overlap``.

    The mixture geometry depends on the seed only, so sweeping ``overlap`` with
    a fixed seed changes nothing but the mixing fraction of client B.
    """
    cfg.validate()
    ss = np.random.SeedSequence(cfg.seed)
    geo_ss, a_ss, b_ss = ss.spawn(3)
    geo = np.random.default_rng(geo_ss)
    means_a = _mixture_means(cfg, geo)
    sigma = np.sqrt(cfg.cov_scale)
    means_b = means_a[_derangement(cfg.n_classes, geo)]

    rng_a = np.random.default_rng(a_ss)
    ya = _balanced_labels(cfg.n_samples, cfg.n_classes, rng_a)
    Xa = means_a[ya] + sigma * rng_a.standard_normal((cfg.n_samples, cfg.dim))

    rng_b = np.random.default_rng(b_ss)
    yb = _balanced_labels(cfg.n_samples, cfg.n_classes, rng_b)
    from_a = rng_b.random(cfg.n_samples) < cfg.overlap
    centers = np.where(from_a[:, None], means_a[yb], means_b[yb])
    Xb = centers + sigma * rng_b.standard_normal((cfg.n_samples, cfg.dim))
    return Dataset(Xa, ya, cfg.n_classes), Dataset(Xb, yb, cfg.n_classes)


def _random_rotation_generator(p: int, rng: np.random.Generator) -> np.ndarray:
    G = rng.standard_normal((p, p))
    A = G - G.T
    return A / np.linalg.norm(A, 2)


def apply_feature_skew(d: Dataset, severity: float, seed: int) -> Dataset:
    """Site transform: rotate about the data centroid, then shift the mean.

    The rotation is ``expm(severity * pi/8 * A)`` for a seeded unit-norm
    skew-symmetric ``A``; the shift has Euclidean length ``severity``.
    """
    if severity < 0:
        raise ValueError(f"feature skew severity must be >= 0 (got {severity})")
    if severity == 0:
        return Dataset(d.features.copy(), d.labels.copy(), d.n_classes)
    rng = np.random.default_rng(seed)
    u = rng.standard_normal(d.dim)
    u /= np.linalg.norm(u)
    R = expm(severity * (np.pi / 8) * _random_rotation_generator(d.dim, rng))
    center = d.features.mean(axis=0)
    X = (d.features - center) @ R + center + severity * u
    return Dataset(X, d.labels.copy(), d.n_classes)


def apply_label_skew(d: Dataset, alpha: float, n_clients: int, seed: int) -> Partition:
    """Split ``d`` across clients with Dirichlet(alpha) class proportions."""
    if alpha <= 0:
        raise ValueError(f"Dirichlet concentration must be > 0 (got {alpha})")
    if n_clients < 2:
        raise ValueError(f"n_clients must be >= 2 (got {n_clients})")
    rng = np.random.default_rng(seed)
    parts: list[list[np.ndarray]] = [[] for _ in range(n_clients)]
    empty = []
    for c in range(d.n_classes):
        idx = np.flatnonzero(d.labels == c)
        rng.shuffle(idx)
        props = rng.dirichlet(np.full(n_clients, alpha))
        cuts = np.round(np.cumsum(props)[:-1] * len(idx)).astype(int)
        for i, chunk in enumerate(np.split(idx, cuts)):
            parts[i].append(chunk)
            if len(chunk) == 0 and len(idx) > 0:
                empty.append((i, c))
    clients = []
    for i, chunks in enumerate(parts):
        sel = np.sort(np.concatenate(chunks))
        if sel.size == 0:
            raise ValueError(
                f"client {i} received no samples (alpha={alpha}, seed={seed}); "
                "use more data or a larger concentration"
            )
        clients.append(d.take(sel))
    return Partition(clients, empty)


def apply_concept_shift(d: Dataset, fraction: float, seed: int) -> Dataset:
    """Relabel a random ``fraction`` of samples through a seeded derangement."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction must lie in [0, 1] (got {fraction})")
    if d.n_classes < 2:
        raise ValueError("concept shift needs at least 2 classes (no derangement of 1)")
    rng = np.random.default_rng(seed)
    sigma = _derangement(d.n_classes, rng)
    hit = rng.random(len(d)) < fraction
    y = np.where(hit, sigma[d.labels], d.labels)
    return Dataset(d.features.copy(), y, d.n_classes)


def apply_heterogeneity(d: Dataset, spec: HeterogeneitySpec, n_clients: int = 2):
    """Dispatch on ``spec.kind``; label skew returns a Partition, the others a Dataset."""
    spec.validate()
    if spec.kind == "feature_skew":
        return apply_feature_skew(d, spec.severity, spec.seed)
    if spec.kind == "label_skew":
        return apply_label_skew(d, spec.severity, n_clients, spec.seed)
    return apply_concept_shift(d, spec.severity, spec.seed)


def train_test_split(d: Dataset, test_fraction: float = 0.2, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Seeded per-class (stratified) split."""
    rng = np.random.default_rng(seed)
    test_idx = []
    for c in range(d.n_classes):
        idx = np.flatnonzero(d.labels == c)
        if idx.size < 2:
            continue
        rng.shuffle(idx)
        test_idx.append(idx[: int(round(test_fraction * idx.size))])
    test = np.sort(np.concatenate(test_idx)) if test_idx else np.array([], dtype=int)
    mask = np.ones(len(d), dtype=bool)
    mask[test] = False
    if test.size == 0 or mask.sum() == 0:
        raise ValueError("split leaves an empty train or test set")
    return d.take(np.flatnonzero(mask)), d.take(test)


def subsample_per_class(d: Dataset, per_class: int | None, seed: int) -> Dataset:
    """Keep at most ``per_class`` samples of every class (``None`` keeps everything)."""
    if per_class is None:
        return d
    rng = np.random.default_rng(seed)
    keep = []
    for c in range(d.n_classes):
        idx = np.flatnonzero(d.labels == c)
        if idx.size > per_class:
            idx = rng.choice(idx, size=per_class, replace=False)
        keep.append(idx)
    return d.take(np.sort(np.concatenate(keep)))


# -- serialization -----------------------------------------------------------

def save_csv(d: Dataset, path: str | Path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"f{i}" for i in range(d.dim)] + ["label"])
        for row, label in zip(d.features, d.labels):
            w.writerow([repr(float(v)) for v in row] + [int(label)])


def load_csv(path: str | Path, n_classes: int = 0) -> Dataset:
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if not header or header[-1] != "label":
            raise ValueError(f"{path}: last column must be 'label', got header {header}")
        expected = [f"f{i}" for i in range(len(header) - 1)]
        if header[:-1] != expected:
            raise ValueError(f"{path}: feature columns must be named f0..f{len(header) - 2}")
        rows = [r for r in reader if r]
    X = np.array([[float(v) for v in r[:-1]] for r in rows], dtype=np.float64)
    y = np.array([int(r[-1]) for r in rows], dtype=np.int64)
    return Dataset(X.reshape(len(rows), len(header) - 1), y, n_classes)


def save_binary(d: Dataset, path: str | Path) -> None:
    n, p = d.features.shape
    with Path(path).open("wb") as fh:
        fh.write(_DATASET_MAGIC)
        fh.write(struct.pack("<IQQI", _DATASET_VERSION, n, p, d.n_classes))
        fh.write(d.features.astype("<f8").tobytes())
        fh.write(d.labels.astype("<i8").tobytes())


def load_binary(path: str | Path) -> Dataset:
    raw = Path(path).read_bytes()
    if raw[: len(_DATASET_MAGIC)] != _DATASET_MAGIC:
        raise ValueError(f"{path}: not a dataset cache file (bad magic)")
    off = len(_DATASET_MAGIC)
    version, n, p, k = struct.unpack_from("<IQQI", raw, off)
    if version != _DATASET_VERSION:
        raise ValueError(f"{path}: unsupported dataset cache version {version}")
    off += struct.calcsize("<IQQI")
    X = np.frombuffer(raw, dtype="<f8", count=n * p, offset=off).reshape(n, p)
    off += 8 * n * p
    y = np.frombuffer(raw, dtype="<i8", count=n, offset=off)
    return Dataset(X.copy(), y.copy(), k)
