"""Cross-entropy, population and empirical losses, Bayes risk and noise estimates."""
from __future__ import annotations

from typing import Mapping

import numpy as np
from scipy.special import logsumexp, softmax

from .model import (Logits, ModelParams, SentenceCounts,
                    closed_form_batch, closed_form_for_params, forward_batch)
from .task_data import DatasetStats, DomainError, SentenceBatch, TaskConfig


def _xi(logits) -> np.ndarray:
    return logits.xi if isinstance(logits, Logits) else np.asarray(logits, dtype=float)


def cross_entropy(logits, label: int, n_classes: int | None = None) -> float:
    """``-ln softmax(xi)_label`` over the first ``n_classes`` tokens."""
    xi = _xi(logits)
    n = xi.shape[-1] if n_classes is None else n_classes
    if not 1 <= label <= n:
        raise DomainError(f"label {label} outside 1..{n}")
    z = xi[..., :n]
    return float(logsumexp(z) - z[label - 1])


def one_hot_targets(labels: np.ndarray, n_classes: int) -> np.ndarray:
    T = np.zeros((len(labels), n_classes))
    T[np.arange(len(labels)), np.asarray(labels) - 1] = 1.0
    return T


def expected_targets(cfg: TaskConfig, y: np.ndarray, alpha: float | None = None) -> np.ndarray:
    """Label distribution given the planted output: ``(1-a) e_y + a e_tau``."""
    alpha = cfg.alpha if alpha is None else alpha
    T = one_hot_targets(y, cfg.n_classes) * (1.0 - alpha)
    if alpha > 0:
        T[:, cfg.tau - 1] += alpha
    return T


def xent_probs(xi: np.ndarray, targets: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-row cross-entropy against (soft) targets and the softmax probabilities.

    The log-normalizer is ``m + log1p(sum of the non-maximal terms)`` so
    losses far below machine epsilon keep their relative accuracy.
    """
    n = targets.shape[1]
    z = xi[:, :n]
    k = z.argmax(axis=1)
    rows = np.arange(z.shape[0])
    m = z[rows, k]
    e = np.exp(z - m[:, None])
    e[rows, k] = 0.0
    rest = e.sum(axis=1)
    e[rows, k] = 1.0
    log_s = np.log1p(rest)
    per = np.einsum("ij,ij->i", targets, m[:, None] - z) + targets.sum(axis=1) * log_s
    return per, e / (1.0 + rest)[:, None]


def batch_xent(xi: np.ndarray, targets: np.ndarray, weights: np.ndarray | None = None
               ) -> tuple[float, np.ndarray]:
    """Weighted mean cross-entropy against (soft) targets and its logit gradient.

    ``targets`` has ``n_classes`` columns; logits beyond them are ignored and
    receive zero gradient.
    """
    B, n = targets.shape
    per, p = xent_probs(xi, targets)
    wts = np.full(B, 1.0 / B) if weights is None else weights / weights.sum()
    G = np.zeros_like(xi)
    G[:, :n] = wts[:, None] * (p * targets.sum(axis=1, keepdims=True) - targets)
    return float(wts @ per), G


def contract_grad(p: np.ndarray, targets: np.ndarray, dxi: np.ndarray) -> np.ndarray:
    """Per-row ``sum_j (p_j - t_j) dxi_j`` without the cancellation of ``p_y - 1``.

    Uses ``sum_j p_j = 1`` to rewrite it as ``T sum_j p_j (dxi_j - dbar)`` with
    ``dbar`` the target-weighted mean of ``dxi``.
    """
    n = targets.shape[1]
    d = dxi[:, :n]
    ts = targets.sum(axis=1)
    dbar = np.einsum("ij,ij->i", targets, d) / ts
    return ts * np.einsum("ij,ij->i", p, d - dbar[:, None])


def stratified_weights(q: np.ndarray, triggers) -> np.ndarray:
    """Weights giving every trigger equal total mass (empty triggers dropped)."""
    w = np.zeros(len(q))
    present = [t for t in triggers if np.any(q == t)]
    for t in present:
        m = q == t
        w[m] = 1.0 / (m.sum() * len(present))
    return w


def bayes_risk(alpha: float) -> float:
    if not 0.0 <= alpha <= 1.0:
        raise DomainError(f"alpha={alpha} outside [0, 1]")
    if alpha in (0.0, 1.0):
        return 0.0
    return float(-alpha * np.log(alpha) - (1 - alpha) * np.log(1 - alpha))


def model_loss(params: ModelParams, cfg: TaskConfig, batch: SentenceBatch,
               counts: SentenceCounts | None = None, targets: str = "expected",
               weights: np.ndarray | None = None) -> float:
    """Mean cross-entropy of any model on ``batch``.

    ``targets="expected"`` scores against the label distribution given the
    planted output (population objective); ``"labels"`` uses realized labels.
    Reparameterized models go through their closed form when ``counts`` is
    supplied.
    """
    if targets == "expected":
        T = expected_targets(cfg, batch.y)
    else:
        T = one_hot_targets(batch.labels, cfg.n_classes)
    if counts is not None:
        xi = closed_form_for_params(params, cfg, counts, check=False).logits.xi
    else:
        xi = forward_batch(params, batch.Z[:, :-1])[0].xi
    return batch_xent(xi, T, weights)[0]


def population_loss_noiseless(lam, C) -> float:
    """Noiseless linear/ReLU population loss ``E[ln(exp(C lam_q) + N - 1) - C lam_q]``.

    ``C`` is either a :class:`SentenceCounts` (Monte Carlo over its rows, with
    ``lam`` a per-trigger mapping or scalar) or an explicit histogram
    ``{(lam_value, C_value): probability}`` passed with ``lam=None`` and
    ``N`` inside as key ``"N"``.
    """
    if isinstance(C, SentenceCounts):
        N = C.C.shape[1] - 1
        lam_row = _lam_rows(lam, C.q)
        x = C.c_qy * lam_row
        return float(np.mean(np.logaddexp(x, np.log(N - 1)) - x))
    N = C["N"]
    total = 0.0
    for (lv, cv), prob in C["hist"].items():
        x = lv * cv
        total += prob * (np.logaddexp(x, np.log(N - 1)) - x)
    return float(total)


def _lam_rows(lam, q: np.ndarray) -> np.ndarray:
    if isinstance(lam, Mapping):
        return np.array([lam[int(t)] for t in q], dtype=float)
    lam = np.asarray(lam, dtype=float)
    if lam.ndim == 0 or lam.size == 1:
        return np.full(len(q), float(lam.ravel()[0]))
    return lam


def population_loss_noisy(scheme_id: str, scalars: dict, alpha: float, counts: SentenceCounts,
                          N: int | None = None) -> float:
    """Expected cross-entropy with label tau w.p. ``alpha`` and y otherwise."""
    if not 0.0 < alpha < 1.0:
        raise DomainError(f"alpha={alpha} must lie in (0, 1)")
    cf = closed_form_batch(scheme_id, np.full(len(counts), float(scalars["lam"])), counts,
                           scalars.get("s"), scalars["gamma"])
    xi = cf.logits.xi
    V = xi.shape[1]
    T = np.zeros_like(xi)
    T[np.arange(len(counts)), counts.y - 1] = 1.0 - alpha
    T[:, V - 1] += alpha
    return batch_xent(xi, T)[0]


def estimate_alpha_gamma(dataset, cfg: TaskConfig | None = None, tau: int | None = None) -> DatasetStats:
    """``alpha_hat = M_tau / M`` and ``gamma_hat = ln(alpha_hat / (1 - alpha_hat))``."""
    labels = dataset.labels if isinstance(dataset, SentenceBatch) else np.array([s.label for s in dataset])
    tau = tau if tau is not None else cfg.tau
    M = int(labels.size)
    if M < 1:
        raise DomainError("empty dataset")
    M_tau = int(np.count_nonzero(labels == tau))
    a = M_tau / M
    if M_tau == 0:
        g = -np.inf
    elif M_tau == M:
        g = np.inf
    else:
        g = float(np.log(a / (1 - a)))
    return DatasetStats(M, M_tau, a, g)


def _require_nondegenerate(stats: DatasetStats):
    if stats.degenerate:
        raise DomainError(f"degenerate noise estimate (M_tau={stats.M_tau}, M={stats.M}); "
                          "use the noiseless pipeline")


def empirical_loss(lam: float, stats: DatasetStats, counts, N: int) -> float:
    """Finite-sample objective in closed form; ``counts`` are per-sentence C_{q,y}."""
    _require_nondegenerate(stats)
    C = np.asarray(counts, dtype=float)
    x = C * lam
    a = stats.alpha_hat
    per = -x + np.logaddexp(x - np.log1p(-a), np.log(N - 1))
    # tau-labelled sentences score xi_tau = C lam + gamma_hat, hence the minus sign
    return float(per.mean() - a * stats.gamma_hat)


def empirical_loss_grad(lam: float, stats: DatasetStats, counts, N: int) -> float:
    """``d L_emp / d lambda``: negative until ``exp(-C lambda)`` underflows, then 0."""
    _require_nondegenerate(stats)
    C = np.asarray(counts, dtype=float)
    a = stats.alpha_hat
    # C (1-N) / (exp(C lam)/(1-a) + N - 1), evaluated without overflow
    logden = np.logaddexp(C * lam - np.log1p(-a), np.log(N - 1))
    return float(np.mean(-C * np.exp(np.log(N - 1) - logden)))


def empirical_loss_model(params: ModelParams, batch: SentenceBatch, n_classes: int) -> float:
    """Dataset-mean cross-entropy of the materialized model (realized labels)."""
    xi = forward_batch(params, batch.Z[:, :-1])[0].xi
    return batch_xent(xi, one_hot_targets(batch.labels, n_classes))[0]


def ood_probabilities(params: ModelParams, cfg: TaskConfig, batch: SentenceBatch,
                      counts: SentenceCounts | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Predicted probabilities of ``y_test`` and of ``tau`` for OOD sentences."""
    if counts is not None:
        xi = closed_form_for_params(params, cfg, counts, check=False).logits.xi
    else:
        xi = forward_batch(params, batch.Z[:, :-1])[0].xi
    p = softmax(xi[:, : cfg.n_classes], axis=1)
    rows = np.arange(len(batch))
    p_tau = p[:, cfg.tau - 1] if cfg.noisy else np.zeros(len(batch))
    return p[rows, batch.y - 1], p_tau

