"""One-layer attention model, its reparameterized families and closed-form logits.

The model reads the final row ``x_H`` of the embedded context and returns

    xi_A = U V sum_h sigma(x_H^T W x_h) x_h
    xi_F = U F (x_H + V sum_h sigma(x_H^T W x_h) x_h)

with ``U`` the first ``N+1`` standard basis rows.  Two evaluation paths
exist: a dense one on an explicit ``H x d`` matrix (slow, obviously
correct) and a sparse batched one exploiting that each ``x_h`` has at most
two unit entries.  The batched path also provides the exact backward pass.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .embedding import EmbeddingBasis, token_indices
from .task_data import ConfigError, DomainError, TaskConfig


class AttentionKind(str, Enum):
    LINEAR = "linear"
    RELU = "relu"
    SOFTMAX = "softmax"

    @classmethod
    def parse(cls, name) -> "AttentionKind":
        if isinstance(name, cls):
            return name
        try:
            return cls(str(name).lower())
        except ValueError:
            raise ConfigError(f"unknown attention kind {name!r}") from None


class Scheme(str, Enum):
    ORIGIN = "origin"
    REPARAM_W = "reparam_w"
    REPARAM_FULL = "reparam_full"


# closed-form families, named after the data regime and attention they target
NOISELESS_LINEAR = "noiseless-linear"
NOISELESS_SOFTMAX = "noiseless-softmax"
NOISY_LINEAR = "noisy-linear"
NOISY_SOFTMAX = "noisy-softmax"
SCHEME_IDS = (NOISELESS_LINEAR, NOISELESS_SOFTMAX, NOISY_LINEAR, NOISY_SOFTMAX)


def scheme_id_for(kind: AttentionKind, noisy: bool) -> str:
    soft = AttentionKind.parse(kind) is AttentionKind.SOFTMAX
    if noisy:
        return NOISY_SOFTMAX if soft else NOISY_LINEAR
    return NOISELESS_SOFTMAX if soft else NOISELESS_LINEAR


def _is_noisy(scheme_id: str) -> bool:
    return scheme_id.startswith("noisy")


def _is_softmax(scheme_id: str) -> bool:
    return scheme_id.endswith("softmax")


@dataclass
class ModelParams:
    kind: AttentionKind
    scheme: Scheme
    V: np.ndarray
    W: np.ndarray
    F: np.ndarray
    N: int
    Q: tuple
    scheme_id: str | None = None
    lam: np.ndarray | None = None  # per trigger (noiseless) or length 1 (noisy)
    s: float | None = None
    gamma: float | None = None

    @property
    def d(self) -> int:
        return self.W.shape[0]

    def copy(self) -> "ModelParams":
        return ModelParams(self.kind, self.scheme, self.V.copy(), self.W.copy(), self.F.copy(),
                           self.N, self.Q, self.scheme_id,
                           None if self.lam is None else self.lam.copy(), self.s, self.gamma)

    def lam_for(self, q) -> np.ndarray:
        """lambda used for sentences with trigger(s) ``q``."""
        q = np.asarray(q)
        if self.lam.size == 1:
            return np.full(q.shape, float(self.lam[0]))
        index = {t: i for i, t in enumerate(self.Q)}
        return self.lam[np.vectorize(index.__getitem__, otypes=[np.int64])(q)]


@dataclass
class Logits:
    """Attention and feed-forward logits over tokens ``1..N+1`` (last axis)."""

    xi_attn: np.ndarray
    xi_ff: np.ndarray

    @property
    def xi(self) -> np.ndarray:
        return self.xi_attn + self.xi_ff


# ---------------------------------------------------------------------------
# reparameterized constructions
# ---------------------------------------------------------------------------

def w_basis(cfg: TaskConfig, scheme_id: str) -> list[np.ndarray]:
    """Matrices ``B_q`` with ``W = sum_q lambda_q B_q`` for one family."""
    if scheme_id not in SCHEME_IDS:
        raise ConfigError(f"unknown scheme id {scheme_id!r}")
    N, d, tau = cfg.N, cfg.d, cfg.tau
    out = []
    for q in cfg.Q:
        B = np.zeros((d, d))
        B[q - 1, N + q] = 1.0
        if scheme_id == NOISY_LINEAR:
            B[q - 1, tau - 1] = -1.0
        elif _is_softmax(scheme_id):
            others = [N + x for x in range(1, N + 1) if x != q]
            B[q - 1, others] = -1.0
            if scheme_id == NOISY_SOFTMAX:
                B[q - 1, tau - 1] = -2.0
        out.append(B)
    return out


def f_parts(cfg: TaskConfig) -> tuple[np.ndarray, np.ndarray]:
    """``(A, B)`` with the noisy feed-forward matrix ``F = gamma A + B``."""
    A = np.zeros((cfg.d, cfg.d))
    B = np.zeros((cfg.d, cfg.d))
    for q in cfg.Q:
        A[cfg.tau - 1, q - 1] = 1.0
        B[cfg.tau - 1, cfg.N + q] = 1.0
    return A, B


def build_reparam(cfg: TaskConfig, scheme_id: str, lam, s: float | None = None,
                  gamma: float | None = None, kind: AttentionKind | str | None = None) -> ModelParams:
    """Materialize the associative-memory construction for ``scheme_id``.

    ``lam`` is a per-trigger sequence (noiseless families) or a single
    scalar shared by all triggers (noisy families).
    """
    if scheme_id not in SCHEME_IDS:
        raise ConfigError(f"unknown scheme id {scheme_id!r}")
    if lam is None:
        raise ConfigError("lambda is required")
    lam = np.atleast_1d(np.asarray(lam, dtype=float)).copy()
    if _is_noisy(scheme_id):
        if lam.size != 1:
            raise ConfigError("noisy families share a single lambda")
        if gamma is None:
            raise ConfigError("gamma is required for noisy families")
    else:
        gamma = None
        if lam.size == 1 and len(cfg.Q) > 1:
            lam = np.full(len(cfg.Q), lam[0])
        if lam.size != len(cfg.Q):
            raise ConfigError(f"need {len(cfg.Q)} lambdas, got {lam.size}")
    if _is_softmax(scheme_id):
        if s is None:
            raise ConfigError("value scale s is required for softmax families")
        kind = AttentionKind.SOFTMAX
    else:
        kind = AttentionKind.parse(kind or AttentionKind.LINEAR)
        if kind is AttentionKind.SOFTMAX:
            raise ConfigError(f"{scheme_id} is for linear/ReLU attention")
        s = None
    if (lam < 0).any():
        raise DomainError("lambda must be nonnegative")

    V = (float(s) if s is not None else 1.0) * np.eye(cfg.d)
    W = np.zeros((cfg.d, cfg.d))
    lam_rows = lam if lam.size == len(cfg.Q) else np.full(len(cfg.Q), lam[0])
    for lq, B in zip(lam_rows, w_basis(cfg, scheme_id)):
        W += lq * B
    if _is_noisy(scheme_id):
        A, B = f_parts(cfg)
        F = float(gamma) * A + B
    else:
        F = np.zeros((cfg.d, cfg.d))
    return ModelParams(kind, Scheme.REPARAM_FULL, V, W, F, cfg.N, cfg.Q, scheme_id, lam,
                       None if s is None else float(s), None if gamma is None else float(gamma))


def init_origin(cfg: TaskConfig, kind, rng: np.random.Generator, std: float = 0.02) -> ModelParams:
    """Unconstrained ``V, W, F``; ``std=0`` gives the all-zero start."""
    d = cfg.d
    V, W, F = (std * rng.standard_normal((d, d)) for _ in range(3))
    return ModelParams(AttentionKind.parse(kind), Scheme.ORIGIN, V, W, F, cfg.N, cfg.Q)


def init_reparam_w(cfg: TaskConfig, kind, rng: np.random.Generator | None = None, std: float = 0.0,
                   s: float = 1.0, gamma: float | None = None) -> ModelParams:
    """Trainable ``W`` with ``V = s I`` and the family's fixed ``F``.

    ``s`` is trainable only under softmax attention.  ``gamma`` selects the
    noisy feed-forward matrix; ``None`` freezes ``F = 0``.
    """
    kind = AttentionKind.parse(kind)
    d = cfg.d
    W = std * rng.standard_normal((d, d)) if std > 0 else np.zeros((d, d))
    if kind is not AttentionKind.SOFTMAX:
        s = 1.0
    if gamma is None:
        F = np.zeros((d, d))
    else:
        A, B = f_parts(cfg)
        F = gamma * A + B
    return ModelParams(kind, Scheme.REPARAM_W, s * np.eye(d), W, F, cfg.N, cfg.Q,
                       s=float(s), gamma=None if gamma is None else float(gamma))


# ---------------------------------------------------------------------------
# dense single-sentence path
# ---------------------------------------------------------------------------

def _activate(kind: AttentionKind, scores: np.ndarray) -> np.ndarray:
    if kind is AttentionKind.LINEAR:
        return scores
    if kind is AttentionKind.RELU:
        return np.maximum(scores, 0.0)
    e = np.exp(scores - scores.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def attention_weights(params: ModelParams, X: np.ndarray) -> np.ndarray:
    scores = X @ params.W.T @ X[-1]  # x_H^T W x_h for every h
    return _activate(params.kind, scores)


def forward(params: ModelParams, X: np.ndarray) -> Logits:
    """Dense evaluation on one embedded context ``X`` (``H x d``)."""
    U = np.eye(params.N + 1, params.d)
    w = attention_weights(params, X)
    phi = params.V @ (X.T @ w)
    return Logits(U @ phi, U @ params.F @ (X[-1] + phi))


# ---------------------------------------------------------------------------
# sparse batched path
# ---------------------------------------------------------------------------

@dataclass
class BatchCache:
    cur: np.ndarray
    prev: np.ndarray
    cH: np.ndarray
    pH: np.ndarray
    scores: np.ndarray
    w: np.ndarray
    v: np.ndarray
    phi: np.ndarray
    a: np.ndarray


def _scatter(idx: np.ndarray, vals: np.ndarray, width: int) -> np.ndarray:
    """Row-wise ``out[b, idx[b, h]] += vals[b, h]``."""
    B = idx.shape[0]
    flat = (idx + width * np.arange(B)[:, None]).ravel()
    return np.bincount(flat, weights=vals.ravel(), minlength=B * width).reshape(B, width)


def forward_batch(params: ModelParams, Z: np.ndarray, basis: EmbeddingBasis | None = None
                  ) -> tuple[Logits, BatchCache]:
    """Logits for a batch of contexts ``Z`` (``B x H``, tokens ``z_1..z_H``)."""
    d, N = params.d, params.N
    basis = basis or EmbeddingBasis(N, d)
    cur, prev = token_indices(basis, Z)
    B = Z.shape[0]
    rows = np.arange(B)
    cH, pH = cur[:, -1], prev[:, -1]
    r = np.zeros((B, d + 1))
    r[:, :d] = params.W[cH] + params.W[pH]
    scores = np.take_along_axis(r, cur, 1) + np.take_along_axis(r, prev, 1)
    w = _activate(params.kind, scores)
    v = (_scatter(cur, w, d + 1) + _scatter(prev, w, d + 1))[:, :d]
    phi = v @ params.V.T
    a = np.zeros((B, d))
    a[rows, cH] += 1.0
    a[rows, pH] += 1.0
    xa = phi[:, : N + 1]
    xf = ((a + phi) @ params.F.T)[:, : N + 1]
    return Logits(xa, xf), BatchCache(cur, prev, cH, pH, scores, w, v, phi, a)


def backward_batch(params: ModelParams, cache: BatchCache, G: np.ndarray) -> dict:
    """Gradients of ``sum_b G[b] . xi[b]`` w.r.t. ``V``, ``W``, ``F`` and ``s``.

    ``G`` is ``B x (N+1)`` (the upstream gradient on the total logits); the
    ``s`` entry is the derivative along ``V = s I``.
    """
    d = params.d
    B = G.shape[0]
    Gd = np.zeros((B, d))
    Gd[:, : G.shape[1]] = G
    g_F = Gd.T @ (cache.a + cache.phi)
    g_phi = Gd + Gd @ params.F
    g_V = g_phi.T @ cache.v
    g_v = np.zeros((B, d + 1))
    g_v[:, :d] = g_phi @ params.V
    g_w = np.take_along_axis(g_v, cache.cur, 1) + np.take_along_axis(g_v, cache.prev, 1)
    if params.kind is AttentionKind.LINEAR:
        g_s = g_w
    elif params.kind is AttentionKind.RELU:
        g_s = g_w * (cache.scores > 0)
    else:
        w = cache.w
        g_s = w * (g_w - (w * g_w).sum(axis=1, keepdims=True))
    m = (_scatter(cache.cur, g_s, d + 1) + _scatter(cache.prev, g_s, d + 1))[:, :d]
    g_W = cache.a.T @ m
    return {"V": g_V, "W": g_W, "F": g_F, "s": float(np.trace(g_V))}


# ---------------------------------------------------------------------------
# closed forms from count statistics
# ---------------------------------------------------------------------------

@dataclass
class SentenceCounts:
    """Statistics of contexts that determine the reparameterized logits.

    Histograms are indexed by token ``j`` at position ``j-1`` (length ``N+1``).
    """

    q: np.ndarray
    y: np.ndarray
    H: int
    C: np.ndarray  # token histogram over positions 1..H
    Z0: np.ndarray  # tokens at position 1 and at positions following tau
    c_qy: np.ndarray
    c_qtau: np.ndarray
    c_other: np.ndarray  # positions whose predecessor is a different trigger
    prev_last_trigger: np.ndarray  # z_{H-1} is a trigger
    Qmask: np.ndarray = field(repr=False)  # token j-1 is a trigger

    @property
    def n0(self) -> np.ndarray:
        return self.Z0.sum(axis=-1)

    def __len__(self):
        return self.q.shape[0]

    def take(self, idx) -> "SentenceCounts":
        return SentenceCounts(self.q[idx], self.y[idx], self.H, self.C[idx], self.Z0[idx],
                              self.c_qy[idx], self.c_qtau[idx], self.c_other[idx],
                              self.prev_last_trigger[idx], self.Qmask)


def sentence_counts(cfg: TaskConfig, Z: np.ndarray, q=None, y=None) -> SentenceCounts:
    """Counts for contexts ``Z`` (``B x H`` or ``B x (H+1)`` with the label dropped).

    ``q`` defaults to ``z_H``.  ``y`` must be supplied (it is the planted
    output, not recoverable in general from a noisy label).
    """
    Z = np.atleast_2d(np.asarray(Z))
    if Z.shape[1] == cfg.H + 1:
        Z = Z[:, :-1]
    if Z.shape[1] != cfg.H:
        raise DomainError(f"expected contexts of length {cfg.H}, got {Z.shape[1]}")
    B, H, V = Z.shape[0], cfg.H, cfg.N + 1
    tau = cfg.tau
    q = Z[:, -1] if q is None else np.broadcast_to(np.asarray(q), (B,))
    y = np.broadcast_to(np.asarray(y), (B,))
    C = _scatter(Z - 1, np.ones(Z.shape), V)
    after_tau = np.zeros(Z.shape, dtype=bool)
    after_tau[:, 1:] = Z[:, :-1] == tau
    first = np.zeros(Z.shape, dtype=bool)
    first[:, 0] = True
    Z0 = _scatter(Z - 1, (after_tau | first).astype(float), V)
    pr, nx = Z[:, :-1], Z[:, 1:]
    qc = q[:, None]
    c_qy = np.count_nonzero((pr == qc) & (nx == y[:, None]), axis=1)
    c_qtau = np.count_nonzero((pr == qc) & (nx == tau), axis=1)
    Qa = np.asarray(cfg.Q)
    c_other = np.count_nonzero(np.isin(pr, Qa) & (pr != qc), axis=1)
    plt = np.isin(Z[:, -2], Qa)
    Qmask = np.zeros(V, dtype=bool)
    Qmask[Qa - 1] = True
    return SentenceCounts(q.copy(), y.copy(), H, C, Z0, c_qy, c_qtau, c_other, plt, Qmask)


def _check_counts(c: SentenceCounts, scheme_id: str):
    if (c.c_qy < 1).any():
        raise DomainError("every sentence needs C_{q,y} >= 1")
    tot = c.C.sum(axis=-1)
    if (tot > c.H).any() or (c.C < 0).any() or (c.Z0 > c.C).any():
        raise DomainError("inconsistent token counts")
    if (c.c_qy > c.C[np.arange(len(c)), c.y - 1]).any():
        raise DomainError("C_{q,y} exceeds the count of y")
    if not _is_noisy(scheme_id) and (c.C[:, -1] > 0).any():
        raise DomainError(f"{scheme_id} expects tau-free contexts")


@dataclass
class ClosedForm:
    """Batched closed-form logits and their derivatives w.r.t. the scalars."""

    logits: Logits
    d_lam: np.ndarray
    d_s: np.ndarray | None
    d_gamma: np.ndarray | None


def closed_form_batch(scheme_id: str, lam: np.ndarray, counts: SentenceCounts,
                      s: float | None = None, gamma: float | None = None,
                      check: bool = True) -> ClosedForm:
    """Logits of the ``scheme_id`` family for every sentence in ``counts``.

    ``lam`` is the per-sentence lambda (already resolved by trigger).
    Softmax scores take three values: ``+lam`` where the predecessor is the
    trigger and the token is not tau, ``0`` at position 1 and after tau, and
    ``-lam`` elsewhere.
    """
    if check:
        _check_counts(counts, scheme_id)
    B = len(counts)
    V = counts.C.shape[1]
    lam = np.broadcast_to(np.asarray(lam, dtype=float), (B,))
    rows = np.arange(B)
    yi = counts.y - 1
    noisy = _is_noisy(scheme_id)
    gamma_v = float(gamma) if noisy else 0.0
    xa = np.zeros((B, V))
    xf = np.zeros((B, V))
    d_lam = np.zeros((B, V))
    d_s = d_gamma = None

    if not _is_softmax(scheme_id):
        hi = np.zeros((B, V))
        hi[rows, yi] = counts.c_qy
        if scheme_id == NOISELESS_LINEAR:
            hi[:, -1] += counts.c_qtau
        xa = lam[:, None] * hi
        d_lam = hi.copy()
        if noisy:
            xf[:, -1] = gamma_v + counts.prev_last_trigger + lam * counts.c_qy
            d_lam[:, -1] += counts.c_qy
            d_gamma = np.zeros((B, V))
            d_gamma[:, -1] = 1.0
        return ClosedForm(Logits(xa, xf), d_lam, d_s, d_gamma)

    s = float(s)
    hi = np.zeros((B, V))
    hi[rows, yi] = counts.c_qy
    c_hi = counts.c_qy.astype(float)
    if scheme_id == NOISELESS_SOFTMAX:
        hi[:, -1] += counts.c_qtau
        c_hi = c_hi + counts.c_qtau
    n0 = counts.n0
    lo = counts.C - counts.Z0 - hi
    n_lo = counts.H - c_hi - n0
    # weights exp(+lam), 1, exp(-lam) rescaled by exp(-lam) (lam >= 0)
    om_h = np.ones(B)
    om_0 = np.exp(-lam)
    om_l = np.exp(-2.0 * lam)
    D = om_h * c_hi + om_0 * n0 + om_l * n_lo
    num = om_h[:, None] * hi + om_0[:, None] * counts.Z0 + om_l[:, None] * lo
    r = num / D[:, None]
    dnum = om_h[:, None] * hi - om_l[:, None] * lo
    dD = om_h * c_hi - om_l * n_lo
    dr = dnum / D[:, None] - r * (dD / D)[:, None]
    xa = s * r
    d_lam = s * dr
    d_s = r.copy()
    if noisy:
        Qm = counts.Qmask
        rQ = r[:, Qm].sum(axis=1)
        drQ = dr[:, Qm].sum(axis=1)
        lo_prevQ = counts.c_qtau + counts.c_other
        g = (om_h * counts.c_qy + om_l * lo_prevQ) / D
        dg = (om_h * counts.c_qy - om_l * lo_prevQ) / D - g * dD / D
        xf[:, -1] = gamma_v + counts.prev_last_trigger + gamma_v * s * rQ + s * g
        d_lam[:, -1] += gamma_v * s * drQ + s * dg
        d_s[:, -1] += gamma_v * rQ + g
        d_gamma = np.zeros((B, V))
        d_gamma[:, -1] = 1.0 + s * rQ
    return ClosedForm(Logits(xa, xf), d_lam, d_s, d_gamma)


def closed_form_logits(scheme_id: str, scalars: dict, counts: SentenceCounts) -> Logits:
    """Closed-form logits for sentences summarized by ``counts``.

    ``scalars`` holds ``lam`` (per-sentence or scalar), and ``s`` / ``gamma``
    where the family needs them.
    """
    if scheme_id not in SCHEME_IDS:
        raise ConfigError(f"unknown scheme id {scheme_id!r}")
    if _is_softmax(scheme_id) and scalars.get("s") is None:
        raise ConfigError("s is required")
    if _is_noisy(scheme_id) and scalars.get("gamma") is None:
        raise ConfigError("gamma is required")
    lam = np.asarray(scalars["lam"], dtype=float)
    if (lam < 0).any():
        raise DomainError("lambda must be nonnegative")
    return closed_form_batch(scheme_id, lam, counts, scalars.get("s"), scalars.get("gamma")).logits


def closed_form_for_params(params: ModelParams, cfg: TaskConfig, counts: SentenceCounts,
                           check: bool = True) -> ClosedForm:
    if params.scheme is not Scheme.REPARAM_FULL:
        raise ConfigError("closed forms exist only for reparameterized families")
    return closed_form_batch(params.scheme_id, params.lam_for(counts.q), counts,
                             params.s, params.gamma, check)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_params(path, params: ModelParams) -> None:
    header = {"version": CHECKPOINT_VERSION, "kind": params.kind.value, "scheme": params.scheme.value,
              "scheme_id": params.scheme_id, "N": params.N, "Q": list(params.Q),
              "lam": None if params.lam is None else params.lam.tolist(),
              "s": params.s, "gamma": params.gamma}
    with Path(path).open("wb") as fh:
        np.savez(fh, header=np.array(json.dumps(header)), V=params.V, W=params.W, F=params.F)


def load_params(path) -> ModelParams:
    with np.load(path) as z:
        header = json.loads(str(z["header"]))
        if header.get("version") != CHECKPOINT_VERSION:
            raise DomainError(f"unsupported checkpoint version {header.get('version')}")
        lam = header["lam"]
        return ModelParams(AttentionKind(header["kind"]), Scheme(header["scheme"]),
                           z["V"].copy(), z["W"].copy(), z["F"].copy(), int(header["N"]),
                           tuple(header["Q"]), header["scheme_id"],
                           None if lam is None else np.asarray(lam, dtype=float),
                           header["s"], header["gamma"])
