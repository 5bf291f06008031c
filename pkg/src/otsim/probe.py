"""Small feed-forward classifiers trained locally and federally.

Everything is plain numpy so a probe round is bit-for-bit reproducible on a
single thread.  The penultimate layer (last hidden layer, after the
nonlinearity) is the representation the similarity metric consumes.
"""

from __future__ import annotations

import csv
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .datagen import Dataset

__all__ = [
    "ModelSpec",
    "ModelParams",
    "WeightDelta",
    "TrainOpts",
    "ActivationSet",
    "TrainingTrace",
    "RoundRecord",
    "TrainingDivergedError",
    "init_model",
    "forward",
    "local_update",
    "fedavg",
    "run_probe_round",
    "extract_activations",
    "weight_divergence",
    "train_federated",
    "train_local",
    "evaluate",
    "check_gradient_bound",
    "save_model",
    "load_model",
]

_MODEL_MAGIC = b"OTSIMMP\x00"
_MODEL_VERSION = 1


class TrainingDivergedError(RuntimeError):
    """Raised when the loss turns non-finite; ``diagnostics`` says where."""

    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass(frozen=True)
class ModelSpec:
    input_dim: int
    hidden: tuple[int, ...] = (32, 8)
    n_classes: int = 4
    activation: str = "tanh"
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.input_dim < 1:
            raise ValueError(f"input_dim must be >= 1 (got {self.input_dim})")
        if not self.hidden:
            raise ValueError("at least one hidden layer is required")
        if any(h < 1 for h in self.hidden):
            raise ValueError(f"hidden widths must be positive (got {self.hidden})")
        if self.hidden[-1] < 2:
            raise ValueError(f"penultimate width must be >= 2 (got {self.hidden[-1]})")
        if self.n_classes < 2:
            raise ValueError(f"n_classes must be >= 2 (got {self.n_classes})")
        if self.activation not in ("tanh", "relu"):
            raise ValueError(f"activation must be 'tanh' or 'relu' (got {self.activation!r})")

    @property
    def penultimate_dim(self) -> int:
        return self.hidden[-1]

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden, self.n_classes)


@dataclass(eq=False)
class ModelParams:
    """Ordered (weight, bias) pairs; weights are (fan_in, fan_out)."""

    layers: list[tuple[np.ndarray, np.ndarray]]
    activation: str = "tanh"

    def copy(self) -> "ModelParams":
        return ModelParams([(W.copy(), b.copy()) for W, b in self.layers], self.activation)

    def flatten(self) -> np.ndarray:
        return np.concatenate([np.concatenate([W.ravel(), b.ravel()]) for W, b in self.layers])

    @property
    def shapes(self) -> list[tuple[tuple[int, ...], tuple[int, ...]]]:
        return [(W.shape, b.shape) for W, b in self.layers]

    def __sub__(self, other: "ModelParams") -> "WeightDelta":
        _check_same_shapes([self, other])
        return WeightDelta([(Wa - Wb, ba - bb) for (Wa, ba), (Wb, bb) in zip(self.layers, other.layers)])

    def __add__(self, delta: "WeightDelta") -> "ModelParams":
        return ModelParams(
            [(W + dW, b + db) for (W, b), (dW, db) in zip(self.layers, delta.layers)], self.activation
        )

    def digest(self) -> str:
        return hashlib.sha256(self.flatten().tobytes()).hexdigest()[:16]

    def allclose(self, other: "ModelParams", atol: float = 0.0) -> bool:
        if self.shapes != other.shapes:
            return False
        return bool(np.max(np.abs(self.flatten() - other.flatten()), initial=0.0) <= atol)


@dataclass(eq=False)
class WeightDelta:
    layers: list[tuple[np.ndarray, np.ndarray]]

    def flatten(self) -> np.ndarray:
        return np.concatenate([np.concatenate([W.ravel(), b.ravel()]) for W, b in self.layers])

    def norm(self) -> float:
        return float(np.linalg.norm(self.flatten()))

    def __mul__(self, c: float) -> "WeightDelta":
        return WeightDelta([(c * W, c * b) for W, b in self.layers])

    __rmul__ = __mul__


@dataclass(frozen=True)
class TrainOpts:
    lr: float = 0.05
    batch_size: int = 64
    epochs: int = 1
    mu: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.lr > 0:
            raise ValueError(f"learning rate must be > 0 (got {self.lr})")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1 (got {self.epochs})")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1 (got {self.batch_size})")
        if self.mu < 0:
            raise ValueError(f"FedProx mu must be >= 0 (got {self.mu})")


@dataclass(eq=False)
class ActivationSet:
    H: np.ndarray
    labels: np.ndarray
    client: str = ""
    model_hash: str = ""

    def __post_init__(self) -> None:
        self.H = np.asarray(self.H, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.H.ndim != 2 or self.H.shape[0] != self.labels.shape[0]:
            raise ValueError(f"activation rows {self.H.shape} do not match {self.labels.shape[0]} labels")
        if not np.all(np.isfinite(self.H)):
            raise ValueError(f"non-finite activations for client {self.client!r}")

    def scaled(self, c: float) -> "ActivationSet":
        return ActivationSet(c * self.H, self.labels.copy(), self.client, self.model_hash)


@dataclass
class RoundRecord:
    round: int
    global_params: ModelParams
    deltas: list[WeightDelta]
    divergence: list[float]
    metrics: list[dict]


@dataclass
class TrainingTrace:
    rounds: list[RoundRecord] = field(default_factory=list)
    local_params: list[ModelParams] = field(default_factory=list)

    @property
    def final_global(self) -> ModelParams:
        return self.rounds[-1].global_params

    def terminal_divergence(self) -> float:
        return float(np.mean(self.rounds[-1].divergence))

    def to_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["round", "client", "divergence", "accuracy", "loss"])
            for rec in self.rounds:
                for c, (div, m) in enumerate(zip(rec.divergence, rec.metrics)):
                    w.writerow([rec.round, c, repr(div), repr(m.get("accuracy", float("nan"))),
                                repr(m.get("loss", float("nan")))])


# -- model ---------------------------------------------------------------------

def init_model(spec: ModelSpec) -> ModelParams:
    """He-style uniform init (Glorot-scaled for tanh), zero biases."""
    rng = np.random.default_rng(spec.seed)
    layers = []
    widths = spec.widths
    for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        if spec.activation == "relu" and i < len(widths) - 2:
            limit = np.sqrt(6.0 / fan_in)
        else:
            limit = np.sqrt(6.0 / (fan_in + fan_out))
        W = rng.uniform(-limit, limit, size=(fan_in, fan_out))
        layers.append((W, np.zeros(fan_out)))
    return ModelParams(layers, spec.activation)


def _act(z: np.ndarray, kind: str) -> np.ndarray:
    return np.tanh(z) if kind == "tanh" else np.maximum(z, 0.0)


def _act_grad(a: np.ndarray, kind: str) -> np.ndarray:
    # derivative expressed through the activation output
    return 1.0 - a * a if kind == "tanh" else (a > 0).astype(a.dtype)


def forward(m: ModelParams, X: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
    """Return (hidden activations per layer, logits)."""
    acts = []
    h = X
    for W, b in m.layers[:-1]:
        h = _act(h @ W + b, m.activation)
        acts.append(h)
    W, b = m.layers[-1]
    return acts, h @ W + b


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _check_shapes(m: ModelParams, d: Dataset) -> None:
    fan_in = m.layers[0][0].shape[0]
    n_out = m.layers[-1][0].shape[1]
    if d.dim != fan_in:
        raise ValueError(f"dataset has {d.dim} features but model expects {fan_in}")
    if d.n_classes > n_out:
        raise ValueError(f"dataset has {d.n_classes} classes but model outputs {n_out}")


def _grads(m: ModelParams, X: np.ndarray, y: np.ndarray) -> tuple[float, list[tuple[np.ndarray, np.ndarray]]]:
    acts, logits = forward(m, X)
    logp = _log_softmax(logits)
    n = X.shape[0]
    loss = -float(logp[np.arange(n), y].mean())
    g = np.exp(logp)
    g[np.arange(n), y] -= 1.0
    g /= n
    grads = []
    inputs = [X, *acts]
    for i in range(len(m.layers) - 1, -1, -1):
        W, _ = m.layers[i]
        grads.append((inputs[i].T @ g, g.sum(axis=0)))
        if i > 0:
            g = (g @ W.T) * _act_grad(acts[i - 1], m.activation)
    grads.reverse()
    return loss, grads


def local_update(m: ModelParams, d: Dataset, opts: TrainOpts) -> ModelParams:
    """Minibatch SGD on softmax cross-entropy, optionally with a FedProx term.

    With ``opts.mu > 0`` every step adds ``mu * (w - w_anchor)`` to the gradient,
    where the anchor is the incoming ``m``.
    """
    _check_shapes(m, d)
    rng = np.random.default_rng(opts.seed)
    anchor = m
    cur = m.copy()
    n = len(d)
    step = 0
    for epoch in range(opts.epochs):
        order = rng.permutation(n)
        for start in range(0, n, opts.batch_size):
            idx = order[start:start + opts.batch_size]
            loss, grads = _grads(cur, d.features[idx], d.labels[idx])
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, step {step}; learning rate {opts.lr} is likely too high",
                    {"epoch": epoch, "step": step, "lr": opts.lr, "loss": loss,
                     "param_norm": float(np.linalg.norm(cur.flatten()))},
                )
            new_layers = []
            for (W, b), (gW, gb), (W0, b0) in zip(cur.layers, grads, anchor.layers):
                if opts.mu > 0:
                    gW = gW + opts.mu * (W - W0)
                    gb = gb + opts.mu * (b - b0)
                new_layers.append((W - opts.lr * gW, b - opts.lr * gb))
            cur = ModelParams(new_layers, cur.activation)
            step += 1
    return cur


def _check_same_shapes(models: Sequence[ModelParams]) -> None:
    ref = models[0].shapes
    for i, m in enumerate(models[1:], 1):
        if m.shapes != ref:
            raise ValueError(f"model {i} has shapes {m.shapes}, expected {ref}")


def fedavg(models: Sequence[ModelParams], weights: Sequence[float]) -> ModelParams:
    if len(models) == 0:
        raise ValueError("fedavg needs at least one model")
    if len(weights) != len(models):
        raise ValueError(f"{len(weights)} weights for {len(models)} models")
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("aggregation weights must be finite and nonnegative")
    if w.sum() <= 0:
        raise ValueError("aggregation weights sum to zero")
    _check_same_shapes(models)
    w = w / w.sum()
    layers = []
    for li in range(len(models[0].layers)):
        W = sum(wi * m.layers[li][0] for wi, m in zip(w, models))
        b = sum(wi * m.layers[li][1] for wi, m in zip(w, models))
        layers.append((W, b))
    return ModelParams(layers, models[0].activation)


def _round_opts(opts: TrainOpts, rnd: int, mu: float | None = None) -> TrainOpts:
    # every client in a round shares the batch-order seed
    return TrainOpts(opts.lr, opts.batch_size, opts.epochs, opts.mu if mu is None else mu,
                     seed=int(np.random.SeedSequence([opts.seed, rnd]).generate_state(1)[0]))


def _fl_round(global_params: ModelParams, clients: Sequence[Dataset], opts: TrainOpts, rnd: int,
              mu: float) -> tuple[ModelParams, list[ModelParams]]:
    ropts = _round_opts(opts, rnd, mu)
    local = [local_update(global_params, d, ropts) for d in clients]
    return fedavg(local, [len(d) for d in clients]), local


def run_probe_round(clients: Sequence[Dataset], spec: ModelSpec,
                    opts: TrainOpts) -> tuple[ModelParams, list[WeightDelta]]:
    """One FedAvg round from a fresh init: returns the probe model and client deltas."""
    if len(clients) < 2:
        raise ValueError(f"a probe round needs >= 2 clients (got {len(clients)})")
    theta0 = init_model(spec)
    theta1, local = _fl_round(theta0, clients, opts, 0, 0.0)
    return theta1, [lm - theta0 for lm in local]


def extract_activations(d: Dataset, m: ModelParams, client: str = "") -> ActivationSet:
    _check_shapes(m, d)
    acts, _ = forward(m, d.features)
    return ActivationSet(acts[-1], d.labels.copy(), client, m.digest())


def weight_divergence(global_delta: WeightDelta, local_delta: WeightDelta) -> float:
    """||dW_global - dW_local|| / ||dW_local|| over the flattened parameters."""
    g, l = global_delta.flatten(), local_delta.flatten()
    if g.shape != l.shape:
        raise ValueError(f"delta sizes differ: {g.shape} vs {l.shape}")
    denom = np.linalg.norm(l)
    if denom == 0:
        raise ZeroDivisionError("weight divergence is undefined for a zero local update")
    return float(np.linalg.norm(g - l) / denom)


def evaluate(m: ModelParams, d: Dataset) -> dict:
    if len(d) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    _check_shapes(m, d)
    _, logits = forward(m, d.features)
    logp = _log_softmax(logits)
    loss = -float(logp[np.arange(len(d)), d.labels].mean())
    acc = float(np.mean(np.argmax(logits, axis=1) == d.labels))
    return {"accuracy": acc, "loss": max(loss, 0.0)}


def train_federated(clients: Sequence[Dataset], spec: ModelSpec, opts: TrainOpts, rounds: int,
                    algo: str = "fedavg", eval_sets: Sequence[Dataset] | None = None) -> TrainingTrace:
    """Multi-round FedAvg/FedProx starting from ``init_model(spec)``.

    Per-client metrics evaluate the aggregated global model for FedAvg and the
    client's own post-update (personalized) model for FedProx.
    """
    if rounds < 1:
        raise ValueError(f"rounds must be >= 1 (got {rounds})")
    if algo not in ("fedavg", "fedprox"):
        raise ValueError(f"algo must be 'fedavg' or 'fedprox' (got {algo!r})")
    if len(clients) < 2:
        raise ValueError("federated training needs >= 2 clients")
    eval_sets = list(eval_sets) if eval_sets is not None else list(clients)
    if len(eval_sets) != len(clients):
        raise ValueError("one eval set per client is required")
    mu = opts.mu if algo == "fedprox" else 0.0
    trace = TrainingTrace()
    theta = init_model(spec)
    for rnd in range(rounds):
        new_theta, local = _fl_round(theta, clients, opts, rnd, mu)
        g_delta = new_theta - theta
        deltas = [lm - theta for lm in local]
        div = [weight_divergence(g_delta, dl) if dl.norm() > 0 else 0.0 for dl in deltas]
        if algo == "fedavg":
            metrics = [evaluate(new_theta, e) for e in eval_sets]
        else:
            metrics = [evaluate(lm, e) for lm, e in zip(local, eval_sets)]
        trace.rounds.append(RoundRecord(rnd + 1, new_theta, deltas, div, metrics))
        trace.local_params = local
        theta = new_theta
    return trace


def train_local(d: Dataset, spec: ModelSpec, opts: TrainOpts, rounds: int) -> ModelParams:
    """Local-only baseline with the same epoch budget as ``rounds`` FL rounds."""
    m = init_model(spec)
    for rnd in range(rounds):
        m = local_update(m, d, _round_opts(opts, rnd, 0.0))
    return m


def check_gradient_bound(z_c, z_k, p_a, p_b, y: int, atol: float = 1e-9) -> tuple[float, float]:
    """Evaluate both sides of the same-class gradient-difference bound.

    lhs = ||(p_a - e_y) z_c^T - (p_b - e_y) z_k^T||_F
    rhs = ||p_a - e_y|| ||z_c - z_k|| + ||p_a - p_b||
    """
    z_c, z_k = np.asarray(z_c, float), np.asarray(z_k, float)
    p_a, p_b = np.asarray(p_a, float), np.asarray(p_b, float)
    for name, z in (("z_c", z_c), ("z_k", z_k)):
        if abs(np.linalg.norm(z) - 1.0) > 1e-9:
            raise ValueError(f"{name} must have unit l2 norm")
    for name, p in (("p_a", p_a), ("p_b", p_b)):
        if np.any(p < -atol) or abs(p.sum() - 1.0) > 1e-9:
            raise ValueError(f"{name} is not on the probability simplex")
    if p_a.shape != p_b.shape or not 0 <= y < p_a.shape[0]:
        raise ValueError("probability vectors must share a length that covers class y")
    e = np.zeros_like(p_a)
    e[y] = 1.0
    lhs = np.linalg.norm(np.outer(p_a - e, z_c) - np.outer(p_b - e, z_k))
    rhs = np.linalg.norm(p_a - e) * np.linalg.norm(z_c - z_k) + np.linalg.norm(p_a - p_b)
    return float(lhs), float(rhs)


# -- serialization -------------------------------------------------------------

def save_model(m: ModelParams, path: str | Path) -> None:
    header = json.dumps({"activation": m.activation,
                         "shapes": [[list(W.shape), list(b.shape)] for W, b in m.layers]}).encode()
    with Path(path).open("wb") as fh:
        fh.write(_MODEL_MAGIC)
        fh.write(struct.pack("<II", _MODEL_VERSION, len(header)))
        fh.write(header)
        fh.write(m.flatten().astype("<f8").tobytes())


def load_model(path: str | Path) -> ModelParams:
    raw = Path(path).read_bytes()
    if raw[: len(_MODEL_MAGIC)] != _MODEL_MAGIC:
        raise ValueError(f"{path}: not a model file (bad magic)")
    off = len(_MODEL_MAGIC)
    version, hlen = struct.unpack_from("<II", raw, off)
    if version != _MODEL_VERSION:
        raise ValueError(f"{path}: unsupported model file version {version}")
    off += 8
    header = json.loads(raw[off:off + hlen])
    off += hlen
    flat = np.frombuffer(raw, dtype="<f8", offset=off)
    layers, pos = [], 0
    for wshape, bshape in header["shapes"]:
        nw, nb = int(np.prod(wshape)), int(np.prod(bshape))
        W = flat[pos:pos + nw].reshape(wshape).copy()
        pos += nw
        b = flat[pos:pos + nb].reshape(bshape).copy()
        pos += nb
        layers.append((W, b))
    if pos != flat.size:
        raise ValueError(f"{path}: payload size does not match header shapes")
    return ModelParams(layers, header["activation"])
