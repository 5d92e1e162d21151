"""Executable versions of the convergence, generalization and flip guarantees."""
from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .losses import bayes_risk
from .task_data import DomainError, TaskConfig, marker_token
from .training import cosine_to_target  # noqa: F401  (re-exported)


@dataclass
class CheckReport:
    check_id: str
    passed: bool
    measured: object
    bound: object
    tolerance: float = 0.0
    metadata: dict = field(default_factory=dict)

    def row(self) -> dict:
        return {"check_id": self.check_id, "passed": int(self.passed),
                "measured": json.dumps(_plain(self.measured)), "bound": json.dumps(_plain(self.bound)),
                "tolerance": self.tolerance, "metadata": json.dumps(_plain(self.metadata), sort_keys=True)}


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, np.ndarray):
        return _plain(x.tolist())
    if isinstance(x, (np.floating, np.integer, np.bool_)):
        return x.item()
    return x


def config_hash(*parts) -> str:
    blob = json.dumps([_plain(asdict(p) if hasattr(p, "__dataclass_fields__") else p) for p in parts],
                      sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def write_reports(path, reports) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["check_id", "passed", "measured", "bound", "tolerance", "metadata"])
        w.writeheader()
        for r in reports:
            w.writerow(r.row())


# ---------------------------------------------------------------------------
# convergence rate
# ---------------------------------------------------------------------------

def fit_log_linear(steps, losses, window=None, floor: float = 1e-13) -> float:
    """Least-squares slope of ``ln L`` against ``t`` inside ``window``.

    The window is cut at the first loss that is nonpositive or below
    ``floor`` (where rounding, not the dynamics, sets the value).
    """
    t = np.asarray(steps, dtype=float)
    L = np.asarray(losses, dtype=float)
    keep = ~np.isnan(L)
    if window is not None:
        keep &= (t >= window[0]) & (t <= window[1])
    t, L = t[keep], L[keep]
    bad = np.nonzero(~(L > floor))[0]
    if bad.size:
        t, L = t[: bad[0]], L[: bad[0]]
    if t.size < 2:
        raise DomainError("need at least two positive losses to fit a slope")
    return float(np.polyfit(t, np.log(L), 1)[0])


def check_linear_rate(slope: float, lo: float, hi: float, **meta) -> CheckReport:
    return CheckReport("linear_rate", lo <= slope <= hi, slope, [lo, hi], 0.0, meta)


# ---------------------------------------------------------------------------
# out-of-distribution prediction
# ---------------------------------------------------------------------------

def ood_noiseless_bound(lam: float, N: int) -> float:
    """``e^lam / (e^lam + N - 1)`` without overflow."""
    return 1.0 / (1.0 + (N - 1) * math.exp(-lam))


def check_ood_noiseless(p_ytest, t: int, eta: float, N: int, lam: float | None = None) -> CheckReport:
    """``p(y_test) >= e^{eta t}/(e^{eta t} + N - 1)``; ``lam`` replaces ``eta t`` if given."""
    x = eta * t if lam is None else lam
    bound = ood_noiseless_bound(x, N)
    p = float(np.min(p_ytest))
    return CheckReport("ood_noiseless", p >= bound - 1e-12, p, bound, 1e-12, {"t": t, "exponent": x})


def noisy_ood_tolerance(M: int, delta: float, t: int, eta: float, N: int,
                        c1: float = 2.0, c2: float = 2.0) -> float:
    return c1 * math.sqrt(math.log(1.0 / delta) / M) + c2 * N ** 2 * math.exp(-2.0 * eta * t)


def check_ood_noisy(p_ytest, p_tau, alpha: float, M: int, t: int, eta: float, N: int,
                    delta: float = 0.05, c1: float = 2.0, c2: float = 2.0) -> CheckReport:
    tol = noisy_ood_tolerance(M, delta, t, eta, N, c1, c2)
    dy = float(np.max(np.abs(np.asarray(p_ytest) - (1 - alpha))))
    dt = float(np.max(np.abs(np.asarray(p_tau) - alpha)))
    return CheckReport("ood_noisy", dy <= tol and dt <= tol, {"dev_y": dy, "dev_tau": dt}, tol, tol,
                       {"alpha": alpha, "M": M, "t": t})


# ---------------------------------------------------------------------------
# flip condition
# ---------------------------------------------------------------------------

def check_flip_batch(xi_attn: np.ndarray, xi_ff: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Attention argmax strictly at ``y`` and feed-forward argmax strictly at ``tau`` (last)."""
    xa = np.atleast_2d(xi_attn)
    xf = np.atleast_2d(xi_ff)
    y = np.atleast_1d(y)
    rows = np.arange(xa.shape[0])
    a_y = xa[rows, y - 1]
    oa = xa.copy()
    oa[rows, y - 1] = -np.inf
    f_tau = xf[:, -1]
    return (a_y > oa.max(axis=1)) & (f_tau > xf[:, :-1].max(axis=1))


def check_flip(logits, y: int) -> bool:
    return bool(check_flip_batch(logits.xi_attn, logits.xi_ff, np.array([y]))[0])


def hoeffding_width(M: int, delta: float) -> float:
    return math.sqrt(math.log(2.0 / delta) / (2.0 * M))


def flip_threshold(alpha: float, M: int, delta: float, eta: float) -> int:
    """First step after which the flip condition is guaranteed."""
    w = hoeffding_width(M, delta)
    if w >= min(alpha, 1 - alpha):
        raise DomainError(f"confidence width {w:.4f} swamps alpha={alpha}")
    val = abs(math.log(1 - alpha + w) - math.log(alpha - w)) / eta
    return max(1, math.ceil(val))


# ---------------------------------------------------------------------------
# directional convergence on the single-trigger variant
# ---------------------------------------------------------------------------

def direction_target(cfg: TaskConfig) -> np.ndarray:
    """``W* = E(q) E~(q)^T`` for the single trigger ``q``."""
    q = cfg.Q[0]
    W = np.zeros((cfg.d, cfg.d))
    W[q - 1, cfg.N + q] = 1.0
    return W


def limit_direction(cfg: TaskConfig) -> np.ndarray:
    """``(E(q) + E~(box)) (E(y1) + E(y2) + 2 E~(q))^T``, the gradient-flow direction from 0."""
    q = cfg.Q[0]
    box = marker_token(cfg)
    left = np.zeros(cfg.d)
    left[q - 1] = 1.0
    left[cfg.N + box] = 1.0
    right = np.zeros(cfg.d)
    for y in cfg.O:
        right[y - 1] = 1.0
    right[cfg.N + q] = 2.0
    return np.outer(left, right)


def check_direction(cos: float, target: float = 2 / math.sqrt(12), tol: float = 1e-2) -> CheckReport:
    return CheckReport("directional", abs(cos - target) <= tol, cos, target, tol)


# ---------------------------------------------------------------------------
# softmax two-phase behaviour
# ---------------------------------------------------------------------------

def check_two_phase(steps, s, lam_min, T0: int, eta: float, Q_size: int,
                    tol: float = 1e-9) -> CheckReport:
    t = np.asarray(steps, dtype=float)
    s = np.asarray(s, dtype=float)
    lam_min = np.asarray(lam_min, dtype=float)
    after = t > T0
    s_gap = s[after] - (0.5 + eta * (t[after] - T0))
    l_gap = lam_min[after] - eta * t[after] / Q_size
    ok = bool(after.any()) and bool((s_gap >= -tol).all()) and bool((l_gap >= -tol).all())
    measured = {"min_s_margin": float(s_gap.min()) if after.any() else None,
                "min_lam_margin": float(l_gap.min()) if after.any() else None}
    return CheckReport("two_phase", ok, measured, {"T0": T0}, tol)


# ---------------------------------------------------------------------------
# finite-sample Bayes gap
# ---------------------------------------------------------------------------

def kl_term(alpha: float, M: int, delta: float) -> float:
    w = hoeffding_width(M, delta)
    m = min(alpha, 1 - alpha)
    if w >= m:
        raise DomainError("confidence width exceeds min(alpha, 1 - alpha)")
    return w * w / (m - w)


def bayes_gap_bound(alpha: float, M: int, delta: float, eta: float, t: int, N: int,
                    const: float = 1.0) -> float:
    return bayes_risk(alpha) + const * kl_term(alpha, M, delta) + (N - 1) * math.exp(-eta * t)


def check_bayes_gap(final_loss: float, alpha: float, M: int, delta: float, eta: float, t: int,
                    N: int, const: float = 1.0, **meta) -> CheckReport:
    bound = bayes_gap_bound(alpha, M, delta, eta, t, N, const)
    return CheckReport("bayes_gap", final_loss <= bound, final_loss, bound, 0.0,
                       {"alpha": alpha, **meta})


def pass_rate(reports) -> float:
    reports = list(reports)
    return sum(r.passed for r in reports) / len(reports) if reports else 0.0
