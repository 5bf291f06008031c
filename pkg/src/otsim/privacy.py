"""Privacy-preserving path for the similarity metric.

Cross-client cosine products go through a simulated commodity-server masking
protocol (exact output, auditable transcript).  Class means and covariances are
released through the Gaussian mechanism under zero-concentrated DP, with
sensitivities derived for unit-norm activation rows under substitution
neighbours: 2/n for the mean and 2/n (Frobenius) for the covariance.
"""

from __future__ import annotations

import hashlib
import json
import math
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .datagen import Dataset
from .metric import (ClassStats, MetricConfig, SimilarityReport, l2_normalize,
                     similarity_from_activations)
from .probe import ModelParams, extract_activations

__all__ = [
    "PrivacyBudget",
    "BudgetCheck",
    "PartyTranscript",
    "Message",
    "CommodityServer",
    "AttackResult",
    "PrivacyGateError",
    "MaskReuseError",
    "secure_dot_product",
    "mean_noise_scale",
    "cov_noise_scale",
    "symmetric_noise",
    "add_dp_noise_stats",
    "check_privacy_budget",
    "zcdp_to_dp",
    "svd_reconstruction_attack",
    "simulate_attack",
    "private_pairwise_similarity",
]


class PrivacyGateError(RuntimeError):
    """The zCDP budget is too loose for reconstruction to be ruled out."""


class MaskReuseError(RuntimeError):
    """A mask identifier showed up in more than one protocol run."""


@dataclass(frozen=True)
class PrivacyBudget:
    rho: float
    delta: float = 1e-5
    rho_mean: Optional[float] = None
    rho_cov: Optional[float] = None
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.rho > 0:
            raise ValueError(f"rho must be > 0 (got {self.rho})")
        if not 0 < self.delta < 1:
            raise ValueError(f"delta must lie in (0, 1) (got {self.delta})")
        rm, rc = self.rho_mean, self.rho_cov
        if rm is None and rc is None:
            rm = rc = self.rho / 2
        elif rm is None:
            rm = self.rho - rc
        elif rc is None:
            rc = self.rho - rm
        if not (rm > 0 and rc > 0):
            raise ValueError(f"per-statistic budgets must be positive (got {rm}, {rc})")
        if math.isfinite(self.rho) and not math.isclose(rm + rc, self.rho, rel_tol=1e-9):
            raise ValueError(f"rho_mean + rho_cov must equal rho ({rm} + {rc} != {self.rho})")
        object.__setattr__(self, "rho_mean", rm)
        object.__setattr__(self, "rho_cov", rc)

    @property
    def epsilon(self) -> float:
        return zcdp_to_dp(self.rho, self.delta)

    def to_dict(self) -> dict:
        eps = self.epsilon if math.isfinite(self.rho) else None
        return {"rho": self.rho, "delta": self.delta, "epsilon": eps,
                "rho_mean": self.rho_mean, "rho_cov": self.rho_cov}


@dataclass(frozen=True)
class BudgetCheck:
    passed: bool
    threshold: float
    margin: float

    def __bool__(self) -> bool:
        return self.passed


def check_privacy_budget(rho: float, d: int, n: int) -> BudgetCheck:
    """Pass iff ``rho < 6 sqrt(d) / n`` (strict)."""
    if d < 1 or n < 1:
        raise ValueError(f"d and n must be >= 1 (got d={d}, n={n})")
    threshold = 6.0 * math.sqrt(d) / n
    return BudgetCheck(rho < threshold, threshold, threshold - rho)


def zcdp_to_dp(rho: float, delta: float) -> float:
    """(epsilon, delta)-DP implied by rho-zCDP: rho + 2 sqrt(rho ln(1/delta))."""
    if not rho > 0:
        raise ValueError(f"rho must be > 0 (got {rho})")
    if not 0 < delta < 1:
        raise ValueError(f"delta must lie in (0, 1) (got {delta})")
    return rho + 2.0 * math.sqrt(rho * math.log(1.0 / delta))


# -- Gaussian mechanism ------------------------------------------------------------

def mean_noise_scale(n: int, rho_mean: float) -> float:
    return (2.0 / n) / math.sqrt(2.0 * rho_mean)


def cov_noise_scale(n: int, rho_cov: float) -> float:
    return (2.0 / n) / math.sqrt(2.0 * rho_cov)


def symmetric_noise(d: int, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Symmetric matrix with iid N(0, sigma^2) entries on and above the diagonal."""
    upper = np.triu(rng.normal(0.0, sigma, size=(d, d)))
    return upper + np.triu(upper, 1).T


def _psd_clip(S: np.ndarray) -> np.ndarray:
    """Nearest PSD matrix in Frobenius norm (negative eigenvalues set to 0)."""
    S = 0.5 * (S + S.T)
    w, V = np.linalg.eigh(S)
    if w.min() >= 0:
        return S
    return (V * np.maximum(w, 0.0)) @ V.T


def add_dp_noise_stats(s: ClassStats, budget: PrivacyBudget, seed, ridge: float = 1e-4) -> ClassStats:
    """Release ``s`` through the Gaussian mechanism.

    ``s.cov`` is expected to carry the ridge ``ridge * I`` added by
    :func:`otsim.metric.class_stats`.  Noise goes onto the unridged covariance,
    which is then clipped to the PSD cone and ridged again, so vanishing noise
    returns the input unchanged.
    """
    if s.n < 1:
        raise ValueError("class statistics need n >= 1")
    rng = np.random.default_rng(seed)
    d = s.mean.shape[0]
    mu = s.mean + rng.normal(0.0, mean_noise_scale(s.n, budget.rho_mean), size=d)
    raw = s.cov - ridge * np.eye(d)
    noised = raw + symmetric_noise(d, cov_noise_scale(s.n, budget.rho_cov), rng)
    return ClassStats(s.c, mu, _psd_clip(noised) + ridge * np.eye(d), s.n, noised=True)


# -- secure dot product -------------------------------------------------------------

@dataclass(frozen=True)
class Message:
    sender: str
    receiver: str
    digest: str
    shape: tuple[int, ...]
    mask_id: Optional[str] = None


@dataclass
class PartyTranscript:
    invocation: str
    messages: list[Message] = field(default_factory=list)
    mask_ids: list[str] = field(default_factory=list)
    # raw payloads for in-process audit only; never exported
    payloads: list[np.ndarray] = field(default_factory=list, repr=False)

    def record(self, sender: str, receiver: str, payload: np.ndarray, mask_id: str | None = None) -> None:
        digest = hashlib.sha256(np.ascontiguousarray(payload).tobytes()).hexdigest()
        self.messages.append(Message(sender, receiver, digest, tuple(payload.shape), mask_id))
        self.payloads.append(payload.copy())

    def to_dict(self) -> dict:
        return {
            "invocation": self.invocation,
            "messages": [
                {"sender": m.sender, "receiver": m.receiver, "digest": m.digest,
                 "shape": list(m.shape), "mask_id": m.mask_id}
                for m in self.messages
            ],
            "mask_ids": list(self.mask_ids),
        }

    def to_json(self, path: str | Path | None = None) -> str:
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            Path(path).write_text(text)
        return text


class CommodityServer:
    """Semi-honest dealer of correlated randomness.

    ``mask_log`` maps every issued mask id to the mask, so tests and auditors
    can check that a transmitted message is exactly input + mask.
    """

    def __init__(self, rng: np.random.Generator | None = None, scale: float = 1.0):
        self.rng = rng if rng is not None else np.random.default_rng()
        self.scale = scale
        self.mask_log: dict[str, np.ndarray] = {}

    def _mask(self, shape) -> tuple[str, np.ndarray]:
        mid = uuid.uuid4().hex
        M = self.rng.uniform(-self.scale, self.scale, size=shape)
        self.mask_log[mid] = M
        return mid, M

    def deal(self, n: int, d: int, m: int):
        """Return (A's share, B's share): ((id_a, R_a, r_a), (id_b, R_b, r_b))."""
        id_a, Ra = self._mask((n, d))
        id_b, Rb = self._mask((d, m))
        _, ra = self._mask((n, m))
        rb = Ra @ Rb - ra
        return (id_a, Ra, ra), (id_b, Rb, rb)

    def fresh(self, shape) -> tuple[str, np.ndarray]:
        return self._mask(shape)


_USED_MASK_IDS: set[str] = set()


def _claim(mask_id: str) -> None:
    if mask_id in _USED_MASK_IDS:
        raise MaskReuseError(f"mask {mask_id} was already used; aborting protocol")
    _USED_MASK_IDS.add(mask_id)


def secure_dot_product(H_a: np.ndarray, H_b: np.ndarray,
                       dealer: CommodityServer | None = None) -> tuple[np.ndarray, PartyTranscript]:
    """Compute ``H_a @ H_b.T`` with A holding ``H_a`` and B holding ``H_b``.

    Commodity-server scalar-product protocol in matrix form:

    1. the dealer gives A ``(R_a, r_a)`` and B ``(R_b, r_b)`` with
       ``r_a + r_b = R_a R_b``;
    2. A sends ``H_a + R_a`` to B; B sends ``H_b^T + R_b`` to A;
    3. B draws a fresh ``V_b`` and sends ``T = (H_a + R_a) H_b^T + r_b - V_b``;
    4. A forms ``V_a = T + r_a - R_a (H_b^T + R_b)``, so ``V_a + V_b = H_a H_b^T``;
    5. both shares go to the coordinator, which learns only the sum.
    """
    X = np.asarray(H_a, dtype=np.float64)
    Y = np.asarray(H_b, dtype=np.float64)
    if X.ndim != 2 or Y.ndim != 2 or X.shape[1] != Y.shape[1]:
        raise ValueError(f"inner dimensions disagree: {X.shape} vs {Y.shape}")
    dealer = dealer if dealer is not None else CommodityServer()
    n, d = X.shape
    m = Y.shape[0]
    tr = PartyTranscript(uuid.uuid4().hex)

    (id_a, Ra, ra), (id_b, Rb, rb) = dealer.deal(n, d, m)
    for mid in (id_a, id_b):
        _claim(mid)
        tr.mask_ids.append(mid)
    tr.record("coordinator", "A", Ra, id_a)
    tr.record("coordinator", "B", Rb, id_b)

    Xh = X + Ra
    tr.record("A", "B", Xh, id_a)
    Yh = Y.T + Rb
    tr.record("B", "A", Yh, id_b)

    id_v, Vb = dealer.fresh((n, m))
    _claim(id_v)
    tr.mask_ids.append(id_v)
    T = Xh @ Y.T + rb - Vb
    tr.record("B", "A", T, id_v)

    Va = T + ra - Ra @ Yh
    tr.record("A", "coordinator", Va)
    tr.record("B", "coordinator", Vb)
    return Va + Vb, tr


# -- reconstruction attack harness -----------------------------------------------------

@dataclass(frozen=True)
class AttackResult:
    alignment: float
    k: int
    rho: Optional[float] = None


def _top_k_eigvecs(S: np.ndarray, k: int) -> np.ndarray:
    w, V = np.linalg.eigh(0.5 * (S + S.T))
    return V[:, np.argsort(w)[::-1][:k]]


def svd_reconstruction_attack(noisy_cov: np.ndarray, true_H: np.ndarray, k: int,
                              rho: float | None = None) -> AttackResult:
    """Mean cosine of the principal angles between top-k eigenspaces.

    Compares the eigenvectors an adversary reads off the released matrix with
    the right singular vectors of the true activation matrix (eigenvectors of
    ``H^T H``).  1 means the subspace is recovered exactly.
    """
    H = np.asarray(true_H, dtype=np.float64)
    S = np.asarray(noisy_cov, dtype=np.float64)
    d = H.shape[1]
    if S.shape != (d, d):
        raise ValueError(f"noisy covariance shape {S.shape} does not match activation dim {d}")
    if not 1 <= k <= d:
        raise ValueError(f"k must lie in [1, {d}] (got {k})")
    U_noisy = _top_k_eigvecs(S, k)
    U_true = _top_k_eigvecs(H.T @ H, k)
    cosines = np.linalg.svd(U_true.T @ U_noisy, compute_uv=False)
    return AttackResult(float(np.clip(cosines.mean(), 0.0, 1.0)), k, rho)


def simulate_attack(H: np.ndarray, rho: float, k: int, seed) -> AttackResult:
    """Release ``H^T H / n`` of row-normalized ``H`` under budget ``rho`` and attack it."""
    Z = l2_normalize(H)
    n, d = Z.shape
    budget = PrivacyBudget(rho)
    rng = np.random.default_rng(seed)
    released = Z.T @ Z / n + symmetric_noise(d, cov_noise_scale(n, budget.rho_cov), rng)
    return svd_reconstruction_attack(released, Z, k, rho)


# -- private pipeline ------------------------------------------------------------------

def private_pairwise_similarity(d_a: Dataset, d_b: Dataset, model: ModelParams, cfg: MetricConfig,
                                budget: PrivacyBudget, allow_gate_failure: bool = False,
                                names: tuple[str, str] = ("A", "B")) -> SimilarityReport:
    """Same pipeline as the plain metric, with secure products and DP class statistics.

    Every class that enters the cost must pass the budget gate for both clients
    unless ``allow_gate_failure`` is set; the gate outcome is recorded in the
    report either way.
    """
    act_a = extract_activations(d_a, model, names[0])
    act_b = extract_activations(d_b, model, names[1])
    dim = act_a.H.shape[1]
    need = cfg.min_count(dim)

    gate = []
    for ci, act in enumerate((act_a, act_b)):
        counts = np.bincount(act.labels)
        for c, n_c in enumerate(counts):
            if n_c < need:
                continue
            chk = check_privacy_budget(budget.rho, dim, int(n_c))
            gate.append({"client": names[ci], "class": c, "n": int(n_c),
                         "threshold": chk.threshold, "passed": chk.passed})
    failed = [g for g in gate if not g["passed"]]
    if failed and not allow_gate_failure:
        worst = min(failed, key=lambda g: g["threshold"])
        raise PrivacyGateError(
            f"rho={budget.rho} violates rho < 6 sqrt(d)/n for {len(failed)} client-class pairs "
            f"(tightest: client {worst['client']} class {worst['class']}, n={worst['n']}, "
            f"threshold={worst['threshold']:.4g})")

    transcripts: list[PartyTranscript] = []

    def dot(A: np.ndarray, B: np.ndarray) -> np.ndarray:
        out, tr = secure_dot_product(A, B)
        transcripts.append(tr)
        return out

    def noiser(s: ClassStats, client: int) -> ClassStats:
        seed = np.random.SeedSequence([budget.seed, client, s.c])
        return add_dp_noise_stats(s, budget, seed, cfg.ridge)

    rep = similarity_from_activations(act_a, act_b, cfg, dot=dot, stats_hook=noiser)
    rep.privacy_mode = True
    rep.budget = {**budget.to_dict(), "gate": gate, "gate_overridden": bool(failed)}
    rep.transcripts = transcripts
    return rep
