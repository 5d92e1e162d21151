"""Normalized gradient descent for the scalar families and the dense models."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .losses import (batch_xent, contract_grad, empirical_loss, empirical_loss_grad, estimate_alpha_gamma,
                     expected_targets, one_hot_targets, stratified_weights, xent_probs)
from .model import (NOISELESS_SOFTMAX, NOISY_LINEAR, AttentionKind, ModelParams, Scheme,
                    SentenceCounts, backward_batch, build_reparam, closed_form_batch,
                    forward_batch, scheme_id_for, sentence_counts)
from .task_data import (ConfigError, DatasetStats, DomainError, SentenceBatch, TaskConfig,
                        count_bigram_batch, sample_batch, sample_ood_batch)

# random streams, combined with the run seed and step: default_rng((seed, stream, t))
STREAM_TRAIN, STREAM_EVAL, STREAM_OOD, STREAM_DATA, STREAM_INIT = range(5)


def step_rng(seed: int, stream: int, t: int = 0) -> np.random.Generator:
    return np.random.default_rng((int(seed), stream, int(t)))


@dataclass
class TrainConfig:
    eta: float = 0.1
    steps: int = 2000
    batch_size: int = 512
    seed: int = 0
    optimizer: str = "ngd"  # ngd | gd
    init_std: float = 0.02
    lam0: float = 0.0
    s0: float | None = None  # None: the family's theory default
    train_gamma: bool = False
    raw_step: bool = False  # un-normalized lambda update in train_noise_estimated
    eval_size: int = 20480
    ood_size: int = 512
    eval_every: int = 10
    epochs: int | None = None  # finite-sample training of dense models

    def __post_init__(self):
        if not self.eta > 0:
            raise ConfigError("learning rate must be positive")
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.optimizer not in ("ngd", "gd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.batch_size < 1 or self.eval_every < 1:
            raise ConfigError("batch_size and eval_every must be >= 1")


@dataclass
class TrainTrajectory:
    records: list = field(default_factory=list)
    events: list = field(default_factory=list)
    params: ModelParams | None = None
    stats: DatasetStats | None = None
    state: "ReparamState | None" = None

    def column(self, name: str) -> np.ndarray:
        return np.array([r.get(name, np.nan) for r in self.records], dtype=float)

    @property
    def steps(self) -> np.ndarray:
        return self.column("step").astype(int)

    def fieldnames(self) -> list:
        names = []
        for r in self.records:
            for k in r:
                if k not in names:
                    names.append(k)
        return names

    def to_csv(self, path) -> None:
        names = self.fieldnames()
        with Path(path).open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=names, restval="")
            w.writeheader()
            for r in self.records:
                w.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v)
                            for k, v in r.items()})


def read_trajectory(path) -> TrainTrajectory:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise DomainError(f"{path} holds no records")
    out = TrainTrajectory()
    for r in rows:
        out.records.append({k: (float(v) if v not in ("", None) else np.nan) for k, v in r.items()})
    return out


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

# A normalized step only needs a direction, so descent continues for any
# gradient that is still a normal double.
STALL_TOL = float(np.finfo(float).tiny)


def safe_norm(*arrays) -> float:
    """Euclidean norm of the concatenated arrays, scaled to avoid underflow."""
    flat = [np.ravel(np.asarray(a, dtype=float)) for a in arrays]
    big = max((float(np.abs(a).max()) for a in flat if a.size), default=0.0)
    if big == 0.0 or not math.isfinite(big):
        return big
    return big * math.sqrt(sum(float(np.sum(np.square(a / big))) for a in flat))


def ngd_step_scalars(scalars, grad, eta: float, stall_tol: float = STALL_TOL):
    """One normalized step ``x - eta g / ||g||``; a zero gradient leaves ``x`` unchanged."""
    x = np.asarray(scalars, dtype=float)
    g = np.asarray(grad, dtype=float)
    n = safe_norm(g)
    if n < stall_tol:
        return x.copy()
    return x - eta * g / n


class NGD:
    """Normalized (or plain) descent over named parameter groups.

    Each group is normalized by its own Euclidean/Frobenius norm, so a scalar
    group moves by exactly ``eta`` per step.  Updates are accumulated with
    Kahan compensation so schedules like ``lam_t = eta t`` stay exact.
    """

    def __init__(self, eta: float, normalize: bool = True, stall_tol: float = STALL_TOL):
        self.eta = eta
        self.normalize = normalize
        self.stall_tol = stall_tol
        self._comp: dict = {}

    def step(self, values: dict, grads: dict) -> tuple[float, bool]:
        """Update ``values`` in place; returns (total gradient norm, stalled)."""
        total = safe_norm(*grads.values())
        if total < self.stall_tol:
            return total, True
        for name, g in grads.items():
            g = np.asarray(g, dtype=float)
            n = safe_norm(g)
            if self.normalize:
                if n < self.stall_tol:
                    continue
                delta = -self.eta * g / n
            else:
                delta = -self.eta * g
            v = np.asarray(values[name], dtype=float)
            c = self._comp.get(name, np.zeros_like(v))
            yk = delta - c
            t = v + yk
            self._comp[name] = (t - v) - yk
            values[name] = t
        return total, False


# ---------------------------------------------------------------------------
# evaluation sets
# ---------------------------------------------------------------------------

@dataclass
class EvalSet:
    batch: SentenceBatch
    counts: SentenceCounts
    targets: np.ndarray  # expected-label targets


def make_eval_set(cfg: TaskConfig, batch: SentenceBatch) -> EvalSet:
    return EvalSet(batch, sentence_counts(cfg, batch.Z, batch.q, batch.y), expected_targets(cfg, batch.y))


@dataclass
class EvalSets:
    pop: EvalSet
    ood: EvalSet

    @classmethod
    def build(cls, cfg: TaskConfig, seed: int, eval_size: int = 20480, ood_size: int = 512) -> "EvalSets":
        pop = sample_batch(cfg, step_rng(seed, STREAM_EVAL), eval_size)
        ood = sample_ood_batch(cfg, step_rng(seed, STREAM_OOD), ood_size)
        return cls(make_eval_set(cfg, pop), make_eval_set(cfg, ood))


def _logit_snapshot(xa: np.ndarray, xf: np.ndarray, y: np.ndarray) -> dict:
    """Mean attention/feed-forward logits at y, tau and the largest other token."""
    rows = np.arange(len(y))
    yi = y - 1
    out = {}
    for tag, x in (("xiA", xa), ("xiF", xf)):
        at_y, at_tau = x[rows, yi].copy(), x[:, -1].copy()
        out[f"{tag}_y"] = float(at_y.mean())
        out[f"{tag}_tau"] = float(at_tau.mean())
        x[rows, yi] = -np.inf
        x[:, -1] = -np.inf
        out[f"{tag}_maxother"] = float(x.max(axis=1).mean())
        x[rows, yi] = at_y
        x[:, -1] = at_tau
    return out


# ---------------------------------------------------------------------------
# scalar families
# ---------------------------------------------------------------------------

@dataclass
class ReparamState:
    scheme_id: str
    kind: AttentionKind
    lam: np.ndarray
    s: float | None
    gamma: float | None

    def values(self) -> dict:
        v = {"lam": self.lam.copy()}
        if self.s is not None:
            v["s"] = np.array(self.s)
        if self.gamma is not None:
            v["gamma"] = np.array(self.gamma)
        return v

    def lam_rows(self, cfg: TaskConfig, q: np.ndarray) -> np.ndarray:
        if self.lam.size == 1:
            return np.full(len(q), float(self.lam[0]))
        return self.lam[np.searchsorted(np.asarray(cfg.Q), q)]

    def to_params(self, cfg: TaskConfig) -> ModelParams:
        return build_reparam(cfg, self.scheme_id, np.maximum(self.lam, 0.0), self.s, self.gamma, self.kind)


def default_s0(cfg: TaskConfig, scheme_id: str) -> float:
    """Value-scale start that makes softmax training enter its monotone phase."""
    n_lam = len(cfg.Q) if scheme_id == NOISELESS_SOFTMAX else 1
    return (n_lam * math.log(cfg.H) + 2.0) / 2.0


def phase_boundary(cfg: TaskConfig, eta: float) -> int:
    """``ceil(|Q| ln H / (2 eta))``: end of the softmax warm-up phase."""
    return math.ceil(len(cfg.Q) * math.log(cfg.H) / (2.0 * eta))


def reparam_loss_and_grads(state: ReparamState, cfg: TaskConfig, counts: SentenceCounts,
                           targets: np.ndarray, weights: np.ndarray | None = None,
                           want: tuple = ("lam", "s", "gamma")) -> tuple[float, dict, "object"]:
    lam_rows = state.lam_rows(cfg, counts.q)
    cf = closed_form_batch(state.scheme_id, lam_rows, counts, state.s, state.gamma, check=False)
    per, p = xent_probs(cf.logits.xi, targets)
    B = len(per)
    wts = np.full(B, 1.0 / B) if weights is None else weights / weights.sum()
    loss = float(wts @ per)
    grads = {}
    if "lam" in want:
        g = wts * contract_grad(p, targets, cf.d_lam)
        if state.lam.size == 1:
            grads["lam"] = np.array([g.sum()])
        else:
            idx = np.searchsorted(np.asarray(cfg.Q), counts.q)
            grads["lam"] = np.bincount(idx, weights=g, minlength=state.lam.size)
    if "s" in want and cf.d_s is not None:
        grads["s"] = np.array((wts * contract_grad(p, targets, cf.d_s)).sum())
    if "gamma" in want and cf.d_gamma is not None:
        grads["gamma"] = np.array((wts * contract_grad(p, targets, cf.d_gamma)).sum())
    return loss, grads, cf


def _eval_reparam(state: ReparamState, cfg: TaskConfig, ev: EvalSets) -> dict:
    rec = {}
    loss, _, cf = reparam_loss_and_grads(state, cfg, ev.pop.counts, ev.pop.targets, want=())
    rec["loss_pop"] = loss
    rec["loss_ood"] = reparam_loss_and_grads(state, cfg, ev.ood.counts, ev.ood.targets, want=())[0]
    rec.update(_logit_snapshot(cf.logits.xi_attn, cf.logits.xi_ff, ev.pop.batch.y))
    return rec


def _scalar_record(t: int, state: ReparamState) -> dict:
    rec = {"step": t}
    if state.lam.size == 1:
        rec["lam"] = float(state.lam[0])
    else:
        for i, v in enumerate(state.lam):
            rec[f"lam_{i + 1}"] = float(v)
        rec["lam_min"] = float(state.lam.min())
    if state.s is not None:
        rec["s"] = float(state.s)
    if state.gamma is not None:
        rec["gamma"] = float(state.gamma)
    return rec


def initial_state(cfg: TaskConfig, tcfg: TrainConfig, kind) -> ReparamState:
    kind = AttentionKind.parse(kind)
    sid = scheme_id_for(kind, cfg.noisy)
    n_lam = 1 if cfg.noisy else len(cfg.Q)
    s = None
    if kind is AttentionKind.SOFTMAX:
        s = default_s0(cfg, sid) if tcfg.s0 is None else float(tcfg.s0)
    gamma = None
    if cfg.noisy:
        gamma = math.log(cfg.alpha / (1 - cfg.alpha))
    return ReparamState(sid, kind, np.full(n_lam, float(tcfg.lam0)), s, gamma)


def train_population(cfg: TaskConfig, tcfg: TrainConfig, kind, eval_sets: EvalSets | None = None,
                     state: ReparamState | None = None,
                     on_step: Callable | None = None) -> TrainTrajectory:
    """Normalized descent on the population loss of a reparameterized family.

    Each step draws a fresh batch; the gradient weights every trigger equally
    so symmetric starts stay symmetric.  In noisy runs ``gamma`` is held at
    ``ln(alpha/(1-alpha))`` unless ``tcfg.train_gamma``.
    """
    state = state or initial_state(cfg, tcfg, kind)
    ev = eval_sets or EvalSets.build(cfg, tcfg.seed, tcfg.eval_size, tcfg.ood_size)
    opt = NGD(tcfg.eta, normalize=tcfg.optimizer == "ngd")
    traj = TrainTrajectory()
    want = ["lam"] + (["s"] if state.s is not None else []) + (["gamma"] if tcfg.train_gamma else [])
    for t in range(tcfg.steps + 1):
        batch = sample_batch(cfg, step_rng(tcfg.seed, STREAM_TRAIN, t), tcfg.batch_size)
        counts = sentence_counts(cfg, batch.Z, batch.q, batch.y)
        wts = stratified_weights(batch.q, cfg.Q)
        loss, grads, _ = reparam_loss_and_grads(state, cfg, counts, expected_targets(cfg, batch.y),
                                                wts, tuple(want))
        gnorm = safe_norm(*grads.values())
        rec = _scalar_record(t, state)
        rec["loss_emp"] = loss
        rec["grad_norm"] = gnorm
        if t % tcfg.eval_every == 0 or t == tcfg.steps:
            rec.update(_eval_reparam(state, cfg, ev))
        traj.records.append(rec)
        if on_step is not None:
            on_step(t, state, rec)
        if t == tcfg.steps:
            break
        values = state.values()
        _, stalled = opt.step(values, grads)
        if stalled:
            traj.events.append({"step": t, "event": "stall"})
            continue
        state.lam = values["lam"]
        if "s" in grads:
            state.s = float(values["s"])
        if "gamma" in grads:
            state.gamma = float(values["gamma"])
        if (state.lam < 0).any():
            traj.events.append({"step": t + 1, "event": "negative-lambda"})
    traj.params = state.to_params(cfg)
    traj.state = state
    return traj


# ---------------------------------------------------------------------------
# finite-sample training with estimated noise level
# ---------------------------------------------------------------------------

def train_noise_estimated(dataset: SentenceBatch, cfg: TaskConfig, tcfg: TrainConfig,
               eval_sets: EvalSets | None = None, kind="linear") -> tuple[TrainTrajectory, DatasetStats]:
    """Estimate the noise level, then descend the closed-form empirical loss in lambda.

    The feed-forward offset is fixed at ``gamma_hat``.  With normalized steps
    the derivative is always negative, so ``lam_t = eta t``; this is checked
    at every step.
    """
    stats = estimate_alpha_gamma(dataset, cfg)
    if stats.degenerate:
        raise DomainError(f"degenerate noise estimate (M_tau={stats.M_tau} of {stats.M})")
    C = count_bigram_batch(dataset.Z, dataset.q, dataset.y)
    ev = eval_sets or EvalSets.build(cfg, tcfg.seed, tcfg.eval_size, tcfg.ood_size)
    state = ReparamState(NOISY_LINEAR, AttentionKind.parse(kind), np.array([0.0]), None, stats.gamma_hat)
    opt = NGD(tcfg.eta, normalize=not tcfg.raw_step)
    traj = TrainTrajectory(stats=stats)
    for t in range(tcfg.steps + 1):
        lam = float(state.lam[0])
        if not tcfg.raw_step and lam != tcfg.eta * t and abs(lam - tcfg.eta * t) > 1e-12:
            raise AssertionError(f"lambda schedule broken at t={t}: {lam} vs {tcfg.eta * t}")
        g = empirical_loss_grad(lam, stats, C, cfg.N)
        rec = {"step": t, "lam": lam, "gamma": stats.gamma_hat,
               "loss_emp": empirical_loss(lam, stats, C, cfg.N), "grad_norm": abs(g)}
        if t % tcfg.eval_every == 0 or t == tcfg.steps:
            rec.update(_eval_reparam(state, cfg, ev))
        traj.records.append(rec)
        if t == tcfg.steps:
            break
        values = {"lam": state.lam}
        _, stalled = opt.step(values, {"lam": np.array([g])})
        if stalled:
            traj.events.append({"step": t, "event": "stall"})
            continue
        state.lam = values["lam"]
    traj.params = state.to_params(cfg)
    traj.state = state
    return traj, stats


# ---------------------------------------------------------------------------
# dense models
# ---------------------------------------------------------------------------

def trainable(params: ModelParams) -> tuple:
    if params.scheme is Scheme.ORIGIN:
        return ("V", "W", "F")
    if params.scheme is Scheme.REPARAM_W:
        return ("W", "s") if params.kind is AttentionKind.SOFTMAX else ("W",)
    raise ConfigError("dense training needs an Origin or ReparamW model")


def full_loss_and_grads(params: ModelParams, batch: SentenceBatch, targets: np.ndarray,
                        weights: np.ndarray | None = None) -> tuple[float, dict, object]:
    """Mean cross-entropy and exact gradients for the trainable matrices."""
    logits, cache = forward_batch(params, batch.Z[:, :-1])
    loss, G = batch_xent(logits.xi, targets, weights)
    g = backward_batch(params, cache, G)
    return loss, {k: g[k] for k in trainable(params)}, logits


def _set_values(params: ModelParams, values: dict):
    for k, v in values.items():
        if k == "s":
            params.s = float(v)
            params.V = params.s * np.eye(params.d)
        else:
            setattr(params, k, v)


def cosine_to_target(W: np.ndarray, W_star: np.ndarray) -> float:
    nw, ns = np.linalg.norm(W), np.linalg.norm(W_star)
    if nw == 0 or ns == 0:
        raise DomainError("cosine undefined for a zero matrix")
    return float(np.sum(W * W_star) / (nw * ns))


def _eval_full(params: ModelParams, cfg: TaskConfig, ev: EvalSets) -> dict:
    rec = {}
    lg, _ = forward_batch(params, ev.pop.batch.Z[:, :-1])
    rec["loss_pop"] = batch_xent(lg.xi, ev.pop.targets)[0]
    lo, _ = forward_batch(params, ev.ood.batch.Z[:, :-1])
    rec["loss_ood"] = batch_xent(lo.xi, ev.ood.targets)[0]
    rec.update(_logit_snapshot(lg.xi_attn, lg.xi_ff, ev.pop.batch.y))
    return rec


def train_full(cfg: TaskConfig, tcfg: TrainConfig, params: ModelParams,
               sampler: Callable | None = None, w_star: np.ndarray | None = None,
               eval_sets: EvalSets | None = None, dataset: SentenceBatch | None = None,
               targets: str = "expected") -> TrainTrajectory:
    """Gradient descent on the dense matrices of an Origin or ReparamW model.

    Without ``dataset`` every step uses a fresh batch from ``sampler``
    (default: the task sampler).  With ``dataset`` the model sees minibatches
    of the fixed training set, cycling through epochs.
    """
    params = params.copy()
    names = trainable(params)
    sampler = sampler or sample_batch
    opt = NGD(tcfg.eta, normalize=tcfg.optimizer == "ngd")
    ev = eval_sets
    traj = TrainTrajectory()
    order = None
    for t in range(tcfg.steps + 1):
        rng = step_rng(tcfg.seed, STREAM_TRAIN, t)
        if dataset is None:
            batch = sampler(cfg, rng, tcfg.batch_size)
        else:
            per_epoch = max(1, len(dataset) // tcfg.batch_size)
            k = t % per_epoch
            if k == 0:
                order = step_rng(tcfg.seed, STREAM_DATA, t).permutation(len(dataset))
            batch = dataset.subset(order[k * tcfg.batch_size:(k + 1) * tcfg.batch_size])
        if targets == "expected":
            T = expected_targets(cfg, batch.y)
        else:
            T = one_hot_targets(batch.labels, cfg.n_classes)
        loss, grads, _ = full_loss_and_grads(params, batch, T)
        rec = {"step": t}
        for k in ("V", "W", "F"):
            rec[f"norm_{k}"] = float(np.linalg.norm(getattr(params, k)))
        if params.s is not None and "s" in names:
            rec["s"] = params.s
        rec["loss_emp"] = loss
        rec["grad_norm"] = safe_norm(*grads.values())
        if w_star is not None and np.any(params.W):
            rec["cos_wstar"] = cosine_to_target(params.W, w_star)
        if ev is not None and (t % tcfg.eval_every == 0 or t == tcfg.steps):
            rec.update(_eval_full(params, cfg, ev))
        traj.records.append(rec)
        if t == tcfg.steps:
            break
        values = {k: (np.array(params.s) if k == "s" else getattr(params, k)) for k in names}
        _, stalled = opt.step(values, grads)
        if stalled:
            traj.events.append({"step": t, "event": "stall"})
            continue
        _set_values(params, values)
    traj.params = params
    return traj


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheck:
    name: str
    index: tuple
    analytic: float
    numeric: float

    @property
    def rel_error(self) -> float:
        den = max(abs(self.analytic), abs(self.numeric))
        return 0.0 if den == 0 else abs(self.analytic - self.numeric) / den


def finite_difference_check(params: ModelParams, batch: SentenceBatch, targets: np.ndarray,
                            rng: np.random.Generator, n_coords: int = 20, h: float = 1e-5,
                            min_rel: float = 1e-3) -> list[GradCheck]:
    """Central differences on random coordinates of the trainable matrices.

    Coordinates are drawn from entries whose analytic gradient is at least
    ``min_rel`` times the largest entry, so the numeric estimate is not
    dominated by rounding.
    """
    params = params.copy()
    _, grads, _ = full_loss_and_grads(params, batch, targets)
    mats = [k for k in grads if k != "s"]
    pool = []
    for k in mats:
        g = grads[k]
        thr = min_rel * np.abs(g).max()
        for ij in np.argwhere(np.abs(g) > thr):
            pool.append((k, tuple(int(x) for x in ij)))
    if not pool:
        raise DomainError("gradient vanishes on the whole batch")
    picks = rng.choice(len(pool), size=min(n_coords, len(pool)), replace=False)
    out = []
    for p in picks:
        k, ij = pool[p]
        M = getattr(params, k)
        old = M[ij]
        M[ij] = old + h
        lp = full_loss_and_grads(params, batch, targets)[0]
        M[ij] = old - h
        lm = full_loss_and_grads(params, batch, targets)[0]
        M[ij] = old
        out.append(GradCheck(k, ij, float(grads[k][ij]), (lp - lm) / (2 * h)))
    return out
