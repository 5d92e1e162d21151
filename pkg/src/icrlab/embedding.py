"""Fixed orthogonal token embeddings built from standard basis vectors."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .task_data import ConfigError, DomainError, Sentence, TaskConfig


@dataclass(frozen=True)
class EmbeddingBasis:
    """``E(i) = e_{i-1}`` and ``E~(i) = e_{N+i}`` (0-based coordinates) in R^d."""

    N: int
    d: int

    @property
    def vocab(self) -> int:
        return self.N + 1

    def e_index(self, tok):
        return np.asarray(tok) - 1

    def et_index(self, tok):
        return np.asarray(tok) + self.N

    def E(self, tok: int) -> np.ndarray:
        self._check(tok)
        v = np.zeros(self.d)
        v[tok - 1] = 1.0
        return v

    def E_tilde(self, tok: int) -> np.ndarray:
        self._check(tok)
        v = np.zeros(self.d)
        v[self.N + tok] = 1.0
        return v

    @property
    def U(self) -> np.ndarray:
        """Unembedding, rows ``E(1)^T .. E(N+1)^T``."""
        return np.eye(self.vocab, self.d)

    def _check(self, tok):
        if not 1 <= int(tok) <= self.vocab:
            raise DomainError(f"token {tok} outside 1..{self.vocab}")


def standard_basis(cfg: TaskConfig) -> EmbeddingBasis:
    if 2 * (cfg.N + 1) > cfg.d:
        raise ConfigError(f"embedding dimension d={cfg.d} < 2*(N+1)={2 * (cfg.N + 1)}")
    basis = EmbeddingBasis(cfg.N, cfg.d)
    # orthonormality is exact for 0/1 vectors; assert it once anyway
    Es = np.stack([basis.E(i) for i in range(1, basis.vocab + 1)])
    Ets = np.stack([basis.E_tilde(i) for i in range(1, basis.vocab + 1)])
    eye = np.eye(basis.vocab)
    assert np.array_equal(Es @ Es.T, eye) and np.array_equal(Ets @ Ets.T, eye)
    assert not (Es @ Ets.T).any()
    return basis


def token_indices(basis: EmbeddingBasis, Z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Coordinates of the two unit entries of each row ``x_h`` for a token batch.

    ``Z`` holds contexts ``z_1..z_H`` (shape ``(B, H)``).  Position 1 has no
    previous token; its second index points at the dummy coordinate ``d``.
    """
    Z = np.asarray(Z)
    if Z.min() < 1 or Z.max() > basis.vocab:
        raise DomainError("token out of range")
    cur = Z - 1
    prev = np.empty_like(Z)
    prev[:, 0] = basis.d
    prev[:, 1:] = Z[:, :-1] + basis.N
    return cur, prev


def embed_sequence(basis: EmbeddingBasis, s: Sentence | np.ndarray) -> np.ndarray:
    """Dense ``H x d`` matrix of rows ``x_h = E(z_h) + E~(z_{h-1})`` (``x_1 = E(z_1)``)."""
    z = s.context if isinstance(s, Sentence) else np.asarray(s)
    cur, prev = token_indices(basis, z[None, :])
    H = z.shape[0]
    X = np.zeros((H, basis.d + 1))
    X[np.arange(H), cur[0]] += 1.0
    X[np.arange(H), prev[0]] += 1.0
    return X[:, : basis.d]
