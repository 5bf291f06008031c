"""Per-class optimal-transport dissimilarity between two clients.

For every class both clients hold in sufficient number, samples are matched by
entropic OT under the cost ``w_f * feature_cost + w_l * hellinger``.  The
per-class transport costs are pooled with weights ``n_a * n_b`` and divided by
the cost ceiling ``2 w_f + w_l``, which places the aggregate in [0, 1].
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .datagen import Dataset
from .probe import ActivationSet, ModelParams, extract_activations

__all__ = [
    "ClassStats",
    "CostMatrix",
    "TransportPlan",
    "MetricConfig",
    "ClassResult",
    "SimilarityReport",
    "InsufficientClassesError",
    "l2_normalize",
    "feature_cost",
    "class_stats",
    "hellinger_gaussian",
    "total_cost",
    "sinkhorn",
    "similarity_from_activations",
    "pairwise_ot_similarity",
    "cost_matrix_all_pairs",
    "AllPairsResult",
    "wasserstein_baseline",
]


class InsufficientClassesError(ValueError):
    """No class is shared by both clients with enough samples."""


@dataclass
class ClassStats:
    c: int
    mean: np.ndarray
    cov: np.ndarray
    n: int
    noised: bool = False


@dataclass
class CostMatrix:
    c: int
    C: np.ndarray
    kind: str  # "feature" | "label" | "total"


@dataclass
class TransportPlan:
    plan: np.ndarray
    a: np.ndarray
    b: np.ndarray
    cost: float
    n_iter: int
    converged: bool
    marginal_error: float


@dataclass(frozen=True)
class MetricConfig:
    w_f: float = 2.0
    w_l: float = 1.0
    epsilon: float = 1e-2
    tol: float = 1e-6
    max_iter: int = 10_000
    min_samples: int = 50
    # class must also exceed the activation dimension unless this is switched off
    enforce_dim_floor: bool = True
    ridge: float = 1e-4
    feature_metric: str = "cosine"  # "cosine" (1 - cos) or "spherical" (sqrt(2 (1 - cos)))

    def __post_init__(self) -> None:
        if not (self.w_f > 0 and self.w_l > 0):
            raise ValueError(f"weights must be positive (got w_f={self.w_f}, w_l={self.w_l})")
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive (got {self.epsilon})")
        if self.min_samples < 2:
            raise ValueError(f"min_samples must be >= 2 (got {self.min_samples})")
        if self.ridge < 0:
            raise ValueError(f"ridge must be >= 0 (got {self.ridge})")
        if self.feature_metric not in ("cosine", "spherical"):
            raise ValueError(f"unknown feature_metric {self.feature_metric!r}")

    @property
    def ceiling(self) -> float:
        return 2 * self.w_f + self.w_l

    def min_count(self, dim: int) -> int:
        return max(self.min_samples, dim + 1) if self.enforce_dim_floor else self.min_samples


@dataclass
class ClassResult:
    c: int
    cost: float
    feature_cost: float
    label_cost: float
    n_a: int
    n_b: int
    n_iter: int
    converged: bool


@dataclass
class SimilarityReport:
    s_tilde: float
    per_class: list[ClassResult]
    skipped: list[dict]
    weights: tuple[float, float]
    epsilon: float
    privacy_mode: bool = False
    pair: tuple[str, str] = ("A", "B")
    budget: Optional[dict] = None
    # diagnostics only: not serialized
    plans: dict = field(default_factory=dict, repr=False)
    feature_costs: dict = field(default_factory=dict, repr=False)
    transcripts: list = field(default_factory=list, repr=False)

    def recompute(self) -> float:
        w_f, w_l = self.weights
        num = sum(r.cost * r.n_a * r.n_b for r in self.per_class)
        den = sum(r.n_a * r.n_b for r in self.per_class)
        return num / (den * (2 * w_f + w_l))

    def to_dict(self) -> dict:
        out = {
            "pair": list(self.pair),
            "s_tilde": self.s_tilde,
            "per_class": [asdict(r) for r in self.per_class],
            "skipped": self.skipped,
            "weights": {"w_f": self.weights[0], "w_l": self.weights[1]},
            "epsilon": self.epsilon,
            "privacy_mode": self.privacy_mode,
        }
        if self.budget is not None:
            out["budget"] = self.budget
        return out

    def to_json(self, path: str | Path | None = None) -> str:
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_dict(cls, d: dict) -> "SimilarityReport":
        return cls(
            s_tilde=d["s_tilde"],
            per_class=[ClassResult(**r) for r in d["per_class"]],
            skipped=d["skipped"],
            weights=(d["weights"]["w_f"], d["weights"]["w_l"]),
            epsilon=d["epsilon"],
            privacy_mode=d["privacy_mode"],
            pair=tuple(d["pair"]),
            budget=d.get("budget"),
        )


# -- cost components -------------------------------------------------------------

def l2_normalize(H: np.ndarray) -> np.ndarray:
    H = np.asarray(H, dtype=np.float64)
    norms = np.linalg.norm(H, axis=1)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise ValueError(f"cannot normalize zero-norm row {int(zero[0])}")
    return H / norms[:, None]


def _dot(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    return A @ B.T


def feature_cost(H_a: np.ndarray, H_b: np.ndarray, c: int = -1, metric: str = "cosine",
                 dot: Callable[[np.ndarray, np.ndarray], np.ndarray] = _dot) -> CostMatrix:
    """Pairwise ``1 - cos`` between rows (or the chordal distance when ``metric='spherical'``).

    ``dot`` computes the cross Gram matrix of the normalized rows; the private
    path swaps in the secure protocol here.
    """
    H_a, H_b = np.atleast_2d(H_a), np.atleast_2d(H_b)
    if H_a.shape[0] == 0 or H_b.shape[0] == 0:
        raise ValueError("feature cost needs nonempty inputs")
    if H_a.shape[1] != H_b.shape[1]:
        raise ValueError(f"dimension mismatch: {H_a.shape[1]} vs {H_b.shape[1]}")
    G = dot(l2_normalize(H_a), l2_normalize(H_b))
    C = np.clip(1.0 - G, 0.0, 2.0)
    if metric == "spherical":
        C = np.sqrt(2.0 * C)
    return CostMatrix(c, C, "feature")


def class_stats(H: np.ndarray, c: int = -1, ridge: float = 1e-4) -> ClassStats:
    H = np.asarray(H, dtype=np.float64)
    if H.shape[0] < 2:
        raise ValueError(f"class {c}: need >= 2 samples for a covariance (got {H.shape[0]})")
    mu = H.mean(axis=0)
    cov = np.cov(H, rowvar=False, ddof=1).reshape(H.shape[1], H.shape[1])
    cov = 0.5 * (cov + cov.T) + ridge * np.eye(H.shape[1])
    return ClassStats(c, mu, cov, H.shape[0])


def hellinger_gaussian(s_a: ClassStats, s_b: ClassStats) -> float:
    """Closed-form Hellinger distance between N(mu_a, S_a) and N(mu_b, S_b)."""
    if s_a.mean.shape != s_b.mean.shape:
        raise ValueError(f"dimension mismatch: {s_a.mean.shape} vs {s_b.mean.shape}")
    avg = 0.5 * (s_a.cov + s_b.cov)
    sign_a, ld_a = np.linalg.slogdet(s_a.cov)
    sign_b, ld_b = np.linalg.slogdet(s_b.cov)
    sign_m, ld_m = np.linalg.slogdet(avg)
    if min(sign_a, sign_b, sign_m) <= 0:
        raise np.linalg.LinAlgError("covariances must be positive definite")
    diff = s_a.mean - s_b.mean
    maha = float(diff @ np.linalg.solve(avg, diff))
    log_bc = 0.25 * ld_a + 0.25 * ld_b - 0.5 * ld_m - 0.125 * maha
    h2 = -np.expm1(min(log_bc, 0.0))
    return float(np.sqrt(min(max(h2, 0.0), 1.0)))


def total_cost(C_feat: CostMatrix, h: float, w_f: float, w_l: float) -> CostMatrix:
    if not 0.0 <= h <= 1.0:
        raise ValueError(f"label cost must lie in [0, 1] (got {h})")
    if not (w_f > 0 and w_l > 0):
        raise ValueError("weights must be positive")
    return CostMatrix(C_feat.c, w_f * C_feat.C + w_l * h, "total")


# -- Sinkhorn ----------------------------------------------------------------------

def _round_to_polytope(P: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # scale rows/cols down to the marginals, then add back the deficit as a rank-one term
    P = P * np.minimum(a / np.maximum(P.sum(axis=1), 1e-300), 1.0)[:, None]
    P = P * np.minimum(b / np.maximum(P.sum(axis=0), 1e-300), 1.0)[None, :]
    # deficits are nonnegative in exact arithmetic; clamp away rounding residue
    da = np.maximum(a - P.sum(axis=1), 0.0)
    db = np.maximum(b - P.sum(axis=0), 0.0)
    mass = da.sum()
    if mass > 0:
        P = P + np.outer(da, db) / mass
    return P


def _reduced_potentials(C: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # f_i + g_j <= C_ij with equality somewhere in every row and column, so the
    # initial kernel has a unit entry per row/column and cannot underflow to 0
    f = C.min(axis=1)
    g = (C - f[:, None]).min(axis=0)
    return f, g


def _sinkhorn_iterations(C, a, b, eps, f, g, tol, budget, check_every):
    """Kernel-domain Sinkhorn on exp((f + g - C)/eps), absorbing scalings into f, g."""
    it = 0
    err = np.inf
    while it < budget:
        K = np.exp((f[:, None] + g[None, :] - C) / eps)
        u = np.ones_like(a)
        v = np.ones_like(b)
        while it < budget:
            u = a / (K @ v)
            v = b / (K.T @ u)
            it += 1
            if it % check_every == 0 or it == budget:
                err = float(np.abs(u * (K @ v) - a).sum())
                if err < tol:
                    break
            if max(u.max(), v.max(), 1.0 / u.min(), 1.0 / v.min()) > 1e30:
                break
        f = f + eps * np.log(u)
        g = g + eps * np.log(v)
        if err < tol:
            break
    return f, g, it, err


def _newton_polish(C, a, b, eps, f, g, tol, max_steps=50):
    """Newton ascent on the entropic dual with backtracking; returns (f, g, steps, err)."""
    m = b.shape[0]

    def state(f, g):
        # rejected trial steps may overflow; they are discarded by the line search
        with np.errstate(over="ignore", invalid="ignore"):
            P = np.exp((f[:, None] + g[None, :] - C) / eps)
        r, c = P.sum(axis=1), P.sum(axis=0)
        return P, r, c, float(np.abs(a - r).sum() + np.abs(b - c).sum())

    def dual(f, g, P):
        with np.errstate(over="ignore", invalid="ignore"):
            return float(f @ a + g @ b - eps * P.sum())

    P, r, c, err = state(f, g)
    steps = 0
    while err >= tol and steps < max_steps:
        if np.any(r <= 0) or np.any(c <= 0):
            break
        S = np.diag(c) - P.T @ (P / r[:, None])
        rhs = eps * (b - c) - P.T @ (eps * (a - r) / r)
        dg = np.zeros(m)
        try:
            dg[:-1] = np.linalg.solve(S[:-1, :-1], rhs[:-1])
        except np.linalg.LinAlgError:
            break
        df = (eps * (a - r) - P @ dg) / r
        if not (np.all(np.isfinite(df)) and np.all(np.isfinite(dg))):
            break
        F0 = dual(f, g, P)
        step = 1.0
        while step > 1e-6:
            nf, ng = f + step * df, g + step * dg
            nP, nr, nc, nerr = state(nf, ng)
            if np.isfinite(nerr) and (dual(nf, ng, nP) > F0 or nerr < err):
                break
            step *= 0.5
        else:
            break
        f, g, P, r, c, err = nf, ng, nP, nr, nc, nerr
        steps += 1
    return f, g, steps, err


def sinkhorn(C: np.ndarray, a: np.ndarray | None = None, b: np.ndarray | None = None,
             epsilon: float = 1e-2, tol: float = 1e-6, max_iter: int = 10_000,
             check_every: int = 10, newton: bool = True) -> TransportPlan:
    """Entropic OT between marginals ``a`` and ``b`` under cost ``C``.

    Sinkhorn scaling runs in a stabilized kernel form (potentials absorbed into
    log-domain duals).  Once the l1 marginal violation falls below 1e-3 the
    dual is polished with damped Newton steps, which reach ``tol`` in a handful
    of iterations where plain scaling needs tens of thousands at small
    ``epsilon``; plain scaling resumes if a Newton step stalls.  Both routes
    target the same entropic fixed point.

    The final plan is rounded onto the exact transport polytope, so the
    reported cost ``<plan, C>`` belongs to a feasible coupling and never
    undercuts the exact OT value.  No entropy term is included in ``cost``.
    """
    C = np.asarray(C, dtype=np.float64)
    if C.ndim != 2:
        raise ValueError(f"cost must be a matrix (got shape {C.shape})")
    n, m = C.shape
    a = np.full(n, 1.0 / n) if a is None else np.asarray(a, dtype=np.float64)
    b = np.full(m, 1.0 / m) if b is None else np.asarray(b, dtype=np.float64)
    if a.shape != (n,) or b.shape != (m,):
        raise ValueError(f"marginal shapes {a.shape}, {b.shape} do not fit cost {C.shape}")
    if np.any(a <= 0) or np.any(b <= 0):
        raise ValueError("marginals must be strictly positive")
    if abs(a.sum() - 1.0) > 1e-9 or abs(b.sum() - 1.0) > 1e-9:
        raise ValueError(f"marginals must sum to 1 (got {a.sum()}, {b.sum()})")
    if not np.all(np.isfinite(C)):
        raise ValueError("cost matrix contains non-finite entries")
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")

    f, g = _reduced_potentials(C)
    use_newton = newton and n + m <= 4000
    warm_tol = max(tol, 1e-3) if use_newton else tol
    f, g, it, err = _sinkhorn_iterations(C, a, b, epsilon, f, g, warm_tol, max_iter, check_every)
    if use_newton and err < warm_tol and err >= tol:
        f, g, steps, err = _newton_polish(C, a, b, epsilon, f, g, tol)
        it += steps
        if err >= tol and it < max_iter:
            f, g, more, err = _sinkhorn_iterations(C, a, b, epsilon, f, g, tol, max_iter - it, check_every)
            it += more
    P = np.exp((f[:, None] + g[None, :] - C) / epsilon)
    converged = bool(err < tol)
    P = _round_to_polytope(P, a, b)
    merr = float(np.abs(P.sum(axis=1) - a).sum() + np.abs(P.sum(axis=0) - b).sum())
    return TransportPlan(P, a, b, float(np.sum(P * C)), it, converged, merr)


# -- pipeline ----------------------------------------------------------------------

StatsHook = Callable[[ClassStats, int], ClassStats]


def similarity_from_activations(act_a: ActivationSet, act_b: ActivationSet, cfg: MetricConfig = MetricConfig(),
                                dot: Callable[[np.ndarray, np.ndarray], np.ndarray] = _dot,
                                stats_hook: Optional[StatsHook] = None,
                                keep_plans: bool = False) -> SimilarityReport:
    """Aggregate per-class OT cost between two activation sets.

    ``stats_hook(stats, client_index)`` may replace class statistics (e.g. with
    noised copies) before the Hellinger distance is taken.
    """
    if act_a.H.shape[1] != act_b.H.shape[1]:
        raise ValueError(f"activation dims differ: {act_a.H.shape[1]} vs {act_b.H.shape[1]}")
    d = act_a.H.shape[1]
    need = cfg.min_count(d)
    classes = sorted(set(np.unique(act_a.labels)) | set(np.unique(act_b.labels)))
    per_class, skipped = [], []
    plans, feats = {}, {}
    for c in classes:
        c = int(c)
        Ha = act_a.H[act_a.labels == c]
        Hb = act_b.H[act_b.labels == c]
        na, nb = Ha.shape[0], Hb.shape[0]
        if na == 0 or nb == 0:
            skipped.append({"class": c, "n_a": na, "n_b": nb, "reason": "not shared"})
            continue
        if na < need or nb < need:
            skipped.append({"class": c, "n_a": na, "n_b": nb,
                            "reason": f"fewer than {need} samples"})
            continue
        Cf = feature_cost(Ha, Hb, c, cfg.feature_metric, dot)
        Za, Zb = l2_normalize(Ha), l2_normalize(Hb)
        sa, sb = class_stats(Za, c, cfg.ridge), class_stats(Zb, c, cfg.ridge)
        if stats_hook is not None:
            sa, sb = stats_hook(sa, 0), stats_hook(sb, 1)
        h = hellinger_gaussian(sa, sb)
        Ct = total_cost(Cf, h, cfg.w_f, cfg.w_l)
        tp = sinkhorn(Ct.C, epsilon=cfg.epsilon, tol=cfg.tol, max_iter=cfg.max_iter)
        per_class.append(ClassResult(c, tp.cost, float(np.sum(tp.plan * Cf.C)), h, na, nb,
                                     tp.n_iter, tp.converged))
        feats[c] = Cf.C
        if keep_plans:
            plans[c] = tp
    if not per_class:
        counts = {int(c): (int(np.sum(act_a.labels == c)), int(np.sum(act_b.labels == c))) for c in classes}
        raise InsufficientClassesError(
            f"no shared class has >= {need} samples on both sides; per-class counts (A, B): {counts}")
    num = sum(r.cost * r.n_a * r.n_b for r in per_class)
    den = sum(r.n_a * r.n_b for r in per_class)
    s = min(max(num / (den * cfg.ceiling), 0.0), 1.0)
    return SimilarityReport(s, per_class, skipped, (cfg.w_f, cfg.w_l), cfg.epsilon,
                            pair=(act_a.client or "A", act_b.client or "B"),
                            plans=plans, feature_costs=feats)


def pairwise_ot_similarity(d_a: Dataset, d_b: Dataset, model: ModelParams, cfg: MetricConfig = MetricConfig(),
                           privacy=None, names: tuple[str, str] = ("A", "B"),
                           allow_gate_failure: bool = False) -> SimilarityReport:
    """Extract probe activations for both clients and compute the normalized cost.

    ``privacy`` may be a ``PrivacyBudget``; the computation then runs through the
    secure-product and noised-statistics path of :mod:`otsim.privacy`, and
    ``allow_gate_failure`` acknowledges a budget that fails the gate.
    """
    if privacy is not None:
        from .privacy import private_pairwise_similarity
        return private_pairwise_similarity(d_a, d_b, model, cfg, privacy, allow_gate_failure, names)
    act_a = extract_activations(d_a, model, names[0])
    act_b = extract_activations(d_b, model, names[1])
    return similarity_from_activations(act_a, act_b, cfg)


@dataclass
class AllPairsResult:
    matrix: np.ndarray
    reports: dict
    errors: dict

    def to_csv(self, path: str | Path, names: Sequence[str] | None = None) -> None:
        k = self.matrix.shape[0]
        names = list(names) if names is not None else [f"client{i}" for i in range(k)]
        lines = ["," + ",".join(names)]
        for i in range(k):
            vals = ["" if np.isnan(v) else repr(float(v)) for v in self.matrix[i]]
            lines.append(names[i] + "," + ",".join(vals))
        Path(path).write_text("\n".join(lines) + "\n")


def cost_matrix_all_pairs(clients: Sequence[Dataset], model: ModelParams, cfg: MetricConfig = MetricConfig(),
                          privacy=None) -> AllPairsResult:
    """Symmetric matrix of pairwise costs; failed pairs become NaN and are listed in ``errors``."""
    k = len(clients)
    if k < 2:
        raise ValueError("need at least 2 clients")
    S = np.full((k, k), np.nan)
    reports, errors = {}, {}
    for i, j in [(i, i) for i in range(k)] + list(combinations(range(k), 2)):
        try:
            rep = pairwise_ot_similarity(clients[i], clients[j], model, cfg, privacy,
                                         names=(f"client{i}", f"client{j}"))
        except Exception as exc:  # recorded per pair, the matrix continues
            errors[(i, j)] = f"{type(exc).__name__}: {exc}"
            continue
        S[i, j] = S[j, i] = rep.s_tilde
        reports[(i, j)] = rep
    return AllPairsResult(S, reports, errors)


def wasserstein_baseline(act_a: ActivationSet | np.ndarray, act_b: ActivationSet | np.ndarray,
                         epsilon: float = 1e-2, tol: float = 1e-6, max_iter: int = 10_000) -> float:
    """Entropic OT cost under squared Euclidean ground cost, all samples, no classes.

    The regularization is ``epsilon * max(C)``, which keeps the solve
    scale-equivariant: multiplying every activation by ``c`` multiplies the
    result by ``c**2``.
    """
    Ha = act_a.H if isinstance(act_a, ActivationSet) else np.asarray(act_a, float)
    Hb = act_b.H if isinstance(act_b, ActivationSet) else np.asarray(act_b, float)
    if Ha.shape[0] == 0 or Hb.shape[0] == 0:
        raise ValueError("wasserstein baseline needs nonempty inputs")
    if Ha.shape[1] != Hb.shape[1]:
        raise ValueError(f"dimension mismatch: {Ha.shape[1]} vs {Hb.shape[1]}")
    C = (np.sum(Ha ** 2, axis=1)[:, None] + np.sum(Hb ** 2, axis=1)[None, :] - 2.0 * Ha @ Hb.T)
    C = np.maximum(C, 0.0)
    scale = C.max()
    if scale == 0:
        return 0.0
    tp = sinkhorn(C / scale, epsilon=epsilon, tol=tol, max_iter=max_iter)
    return tp.cost * scale
