"""Sentence generation and validation for the in-context recall task.

Tokens are 1-based: the vocabulary is ``1..N`` and the generic noise token
is ``tau = N + 1``.  A sentence is stored as an int64 array of length
``H + 1`` whose last entry is the label ``z_{H+1}``.  Array index ``i``
holds position ``i + 1``.
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class ConfigError(ValueError):
    """Raised for task configurations the samplers cannot honour."""


class DomainError(ValueError):
    """Raised when an argument lies outside the operation's domain."""


@dataclass(frozen=True)
class TaskConfig:
    N: int = 60
    H: int = 256
    d: int = 128
    Q: tuple = (1, 2, 3, 4, 5)
    O: tuple = (6, 7, 8, 9)
    alpha: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "Q", tuple(sorted(int(q) for q in self.Q)))
        object.__setattr__(self, "O", tuple(sorted(int(o) for o in self.O)))
        if not self.Q or not self.O:
            raise ConfigError("trigger and output sets must be nonempty")
        if set(self.Q) & set(self.O):
            raise ConfigError("trigger and output sets must be disjoint")
        if min(self.Q + self.O) < 1 or max(self.Q + self.O) > self.N:
            raise ConfigError("trigger/output tokens must lie in 1..N")
        if not 0.0 <= self.alpha < 1.0:
            raise ConfigError(f"alpha must be in [0, 1), got {self.alpha}")
        if 2 * (self.N + 1) > self.d:
            raise ConfigError(f"need 2*(N+1) <= d, got N={self.N}, d={self.d}")
        if self.H < 4:
            raise ConfigError(f"context length H must be >= 4, got {self.H}")

    @property
    def tau(self) -> int:
        return self.N + 1

    @property
    def noisy(self) -> bool:
        return self.alpha > 0

    @property
    def n_classes(self) -> int:
        """Size of the softmax support: ``[N]`` when noiseless, ``[N+1]`` otherwise."""
        return self.N + 1 if self.noisy else self.N

    @property
    def neutral(self) -> np.ndarray:
        used = set(self.Q) | set(self.O)
        return np.array([t for t in range(1, self.N + 1) if t not in used], dtype=np.int64)

    def with_alpha(self, alpha: float) -> "TaskConfig":
        return TaskConfig(self.N, self.H, self.d, self.Q, self.O, alpha)

    def to_dict(self) -> dict:
        return {"N": self.N, "H": self.H, "d": self.d, "Q": list(self.Q),
                "O": list(self.O), "alpha": self.alpha}

    @classmethod
    def from_dict(cls, d: dict) -> "TaskConfig":
        return cls(int(d["N"]), int(d["H"]), int(d["d"]), tuple(d["Q"]),
                   tuple(d["O"]), float(d["alpha"]))


@dataclass
class Sentence:
    tokens: np.ndarray  # z_1 .. z_{H+1}
    q: int
    y: int

    @property
    def label(self) -> int:
        return int(self.tokens[-1])

    @property
    def context(self) -> np.ndarray:
        return self.tokens[:-1]

    def label_is_noise(self, tau: int) -> bool:
        return self.label == tau


@dataclass
class SentenceBatch:
    """A stack of sentences sharing one config; rows of ``Z`` are sentences."""

    Z: np.ndarray  # (B, H+1)
    q: np.ndarray  # (B,)
    y: np.ndarray  # (B,)

    def __len__(self):
        return self.Z.shape[0]

    def __getitem__(self, i) -> Sentence:
        return Sentence(self.Z[i].copy(), int(self.q[i]), int(self.y[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def labels(self) -> np.ndarray:
        return self.Z[:, -1]

    def subset(self, idx) -> "SentenceBatch":
        return SentenceBatch(self.Z[idx], self.q[idx], self.y[idx])

    @classmethod
    def from_sentences(cls, sentences: Sequence[Sentence]) -> "SentenceBatch":
        return cls(np.stack([s.tokens for s in sentences]).astype(np.int64),
                   np.array([s.q for s in sentences], dtype=np.int64),
                   np.array([s.y for s in sentences], dtype=np.int64))


@dataclass
class DatasetStats:
    M: int
    M_tau: int
    alpha_hat: float
    gamma_hat: float  # -inf / +inf when degenerate

    @property
    def degenerate(self) -> bool:
        return self.M_tau == 0 or self.M_tau == self.M


# ---------------------------------------------------------------------------
# samplers
# ---------------------------------------------------------------------------

def _bigram_slots(cfg: TaskConfig, rng: np.random.Generator, n: int, with_noise: bool):
    """Start positions (1-based) of the (q,y) and optional (q,tau) bigrams."""
    hi = cfg.H - 3  # bigram (zeta, zeta+1) must end before z_{H-1}
    if hi < 1 or (with_noise and hi < 3):
        raise ConfigError(f"H={cfg.H} too small to place the required bigrams")
    z1 = rng.integers(1, hi + 1, size=n)
    if not with_noise:
        return z1, None
    z2 = rng.integers(1, hi + 1, size=n)
    # rejection keeps the pair uniform over non-overlapping slot pairs
    bad = np.abs(z1 - z2) <= 1
    while bad.any():
        k = int(bad.sum())
        z1[bad] = rng.integers(1, hi + 1, size=k)
        z2[bad] = rng.integers(1, hi + 1, size=k)
        bad = np.abs(z1 - z2) <= 1
    return z1, z2


def _sample(cfg: TaskConfig, rng: np.random.Generator, n: int, outputs: np.ndarray) -> SentenceBatch:
    neutral = cfg.neutral
    if neutral.size == 0:
        raise ConfigError("no neutral filler tokens available")
    H = cfg.H
    q = rng.choice(np.asarray(cfg.Q, dtype=np.int64), size=n)
    Z = np.empty((n, H + 1), dtype=np.int64)
    Z[:, : H - 1] = rng.choice(neutral, size=(n, H - 1))
    Z[:, H - 1] = q
    zeta, zeta_tau = _bigram_slots(cfg, rng, n, cfg.noisy)
    rows = np.arange(n)
    Z[rows, zeta - 1] = q
    Z[rows, zeta] = outputs
    if zeta_tau is not None:
        Z[rows, zeta_tau - 1] = q
        Z[rows, zeta_tau] = cfg.tau
    noise = rng.random(n) < cfg.alpha
    Z[:, H] = np.where(noise, cfg.tau, outputs)
    return SentenceBatch(Z, q, outputs.astype(np.int64))


def sample_batch(cfg: TaskConfig, rng: np.random.Generator, n: int) -> SentenceBatch:
    """Draw ``n`` i.i.d. sentences from the data model with the uniform sampler."""
    y = rng.choice(np.asarray(cfg.O, dtype=np.int64), size=n)
    return _sample(cfg, rng, n, y)


def sample_sentence(cfg: TaskConfig, rng: np.random.Generator) -> Sentence:
    return sample_batch(cfg, rng, 1)[0]


def sample_ood_batch(cfg: TaskConfig, rng: np.random.Generator, n: int,
                     y_test=None) -> SentenceBatch:
    """OOD sentences: the output following the trigger is a neutral token.

    With ``y_test=None`` each sentence draws its own ``y_test`` uniformly
    from the neutral set.
    """
    neutral = cfg.neutral
    if y_test is None:
        y = rng.choice(neutral, size=n)
    else:
        if int(y_test) in cfg.Q or int(y_test) in cfg.O or not 1 <= int(y_test) <= cfg.N:
            raise DomainError(f"y_test={y_test} must lie in [N] minus (Q u O)")
        y = np.full(n, int(y_test), dtype=np.int64)
    return _sample(cfg, rng, n, y)


def make_ood_sentence(cfg: TaskConfig, y_test: int, rng: np.random.Generator) -> Sentence:
    return sample_ood_batch(cfg, rng, 1, y_test)[0]


def marker_token(cfg: TaskConfig) -> int:
    """The distinguished neutral token placed at z_{H-1} by the single-trigger variant."""
    return int(cfg.neutral[0])


def sample_single_trigger_batch(cfg: TaskConfig, rng: np.random.Generator, n: int) -> SentenceBatch:
    """Single-trigger, two-output variant with exactly one planted bigram."""
    if len(cfg.Q) != 1 or len(cfg.O) != 2:
        raise ConfigError("single-trigger variant needs |Q| = 1 and |O| = 2")
    neutral = cfg.neutral
    if neutral.size == 0:
        raise ConfigError("single-trigger variant needs a nonempty neutral set")
    if cfg.H < 4:
        raise ConfigError("H too small for the single-trigger variant")
    H = cfg.H
    q = cfg.Q[0]
    y = rng.choice(np.asarray(cfg.O, dtype=np.int64), size=n)
    zeta = rng.integers(1, H - 2, size=n)  # Unif([H-3])
    Z = np.empty((n, H + 1), dtype=np.int64)
    Z[:, : H - 2] = rng.choice(neutral, size=(n, H - 2))
    rows = np.arange(n)
    Z[rows, zeta - 1] = q
    Z[rows, zeta] = y
    Z[:, H - 2] = marker_token(cfg)
    Z[:, H - 1] = q
    Z[:, H] = y
    return SentenceBatch(Z, np.full(n, q, dtype=np.int64), y)


def sample_single_trigger(cfg: TaskConfig, rng: np.random.Generator) -> Sentence:
    return sample_single_trigger_batch(cfg, rng, 1)[0]


# ---------------------------------------------------------------------------
# counting and validation
# ---------------------------------------------------------------------------

def count_bigram(s: Sentence, a: int, b: int) -> int:
    """Number of h in 2..H with (z_{h-1}, z_h) = (a, b)."""
    z = s.context
    return int(np.count_nonzero((z[:-1] == a) & (z[1:] == b)))


def count_bigram_batch(Z: np.ndarray, a, b) -> np.ndarray:
    ctx = Z[:, :-1]
    a = np.asarray(a).reshape(-1, 1)
    b = np.asarray(b).reshape(-1, 1)
    return np.count_nonzero((ctx[:, :-1] == a) & (ctx[:, 1:] == b), axis=1)


CONDITIONS = ("range", "trigger", "output", "z_H", "label", "I", "II", "III", "IV", "prev_last")


def validate_batch(cfg: TaskConfig, batch: SentenceBatch, outputs: Iterable[int] | None = None) -> dict:
    """Vectorised condition check; returns ``{condition: violated-mask}``.

    ``outputs`` overrides the output set (used for OOD sentences).
    """
    O = np.asarray(sorted(outputs) if outputs is not None else cfg.O, dtype=np.int64)
    Qa = np.asarray(cfg.Q, dtype=np.int64)
    Z, q, y = batch.Z, batch.q[:, None], batch.y[:, None]
    H, tau = cfg.H, cfg.tau
    prev, nxt = Z[:, :-1], Z[:, 1:]  # all adjacent pairs over positions 1..H+1
    after_q = prev == q
    viol = {}
    viol["range"] = ((Z < 1) | (Z > tau)).any(axis=1)
    viol["trigger"] = ~np.isin(batch.q, Qa)
    viol["output"] = ~np.isin(batch.y, O)
    viol["z_H"] = Z[:, H - 1] != batch.q
    viol["label"] = ~((Z[:, H] == batch.y) | (Z[:, H] == tau))
    viol["I"] = count_bigram_batch(Z, batch.q, batch.y) < 1
    tau_mask = Z == tau
    bad_tau = tau_mask[:, 1:] & ~after_q
    viol["II"] = bad_tau.any(axis=1) | tau_mask[:, 0]
    if not cfg.noisy:
        viol["II"] |= tau_mask.any(axis=1)
    viol["III"] = (after_q & (nxt != y) & (nxt != tau)).any(axis=1)
    other_trig = np.isin(prev, Qa) & ~after_q
    viol["IV"] = (other_trig & ~np.isin(nxt, O)).any(axis=1)
    viol["prev_last"] = np.isin(Z[:, H - 2], Qa)
    return viol


@dataclass
class ValidationReport:
    passed: bool
    violations: list = field(default_factory=list)


def validate_sentence(cfg: TaskConfig, s: Sentence, outputs: Iterable[int] | None = None) -> ValidationReport:
    batch = SentenceBatch(s.tokens[None, :].astype(np.int64), np.array([s.q]), np.array([s.y]))
    if batch.Z.shape[1] != cfg.H + 1:
        return ValidationReport(False, ["length"])
    viol = validate_batch(cfg, batch, outputs)
    bad = [name for name in CONDITIONS if viol[name][0]]
    return ValidationReport(not bad, bad)


# ---------------------------------------------------------------------------
# dataset files
# ---------------------------------------------------------------------------

def write_dataset(path, batch: SentenceBatch, seed: int) -> None:
    path = Path(path)
    H1 = batch.Z.shape[1]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "idx", "q", "y", "label"] + [f"z_{i}" for i in range(1, H1 + 1)])
        for i in range(len(batch)):
            w.writerow([seed, i, int(batch.q[i]), int(batch.y[i]), int(batch.Z[i, -1])]
                       + batch.Z[i].tolist())


def read_dataset(path) -> tuple[SentenceBatch, int]:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)  # empty files are reported below
        raw = np.loadtxt(path, delimiter=",", skiprows=1, dtype=np.int64, ndmin=2)
    if raw.shape[0] == 0:
        raise DomainError(f"{path} holds no records")
    seeds = np.unique(raw[:, 0])
    if seeds.size != 1:
        raise DomainError(f"{path} mixes several seeds")
    return SentenceBatch(raw[:, 5:].copy(), raw[:, 2].copy(), raw[:, 3].copy()), int(seeds[0])
