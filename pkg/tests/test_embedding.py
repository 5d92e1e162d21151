import numpy as np
import pytest

from icrlab.embedding import embed_sequence, standard_basis, token_indices
from icrlab.task_data import ConfigError, DomainError, TaskConfig, sample_sentence


def test_basis_is_orthonormal(small_cfg):
    b = standard_basis(small_cfg)
    vecs = [b.E(i) for i in range(1, b.vocab + 1)] + [b.E_tilde(i) for i in range(1, b.vocab + 1)]
    M = np.stack(vecs)
    assert np.array_equal(M @ M.T, np.eye(len(vecs)))
    assert np.array_equal(b.U, np.stack([b.E(i) for i in range(1, b.vocab + 1)]))


def test_basis_rejects_bad_tokens(small_cfg):
    b = standard_basis(small_cfg)
    for tok in (0, small_cfg.N + 2):
        with pytest.raises(DomainError):
            b.E(tok)
        with pytest.raises(DomainError):
            b.E_tilde(tok)


def test_standard_basis_needs_room():
    # bypass TaskConfig validation to reach the embedding check itself
    cfg = TaskConfig(N=12, H=24, d=32, Q=(1,), O=(2,))
    object.__setattr__(cfg, "d", 20)
    with pytest.raises(ConfigError):
        standard_basis(cfg)


def test_embed_sequence_rows(small_cfg, rng):
    b = standard_basis(small_cfg)
    s = sample_sentence(small_cfg, rng)
    X = embed_sequence(b, s)
    z = s.context
    assert X.shape == (small_cfg.H, small_cfg.d)
    assert np.array_equal(X[0], b.E(z[0]))
    for h in range(1, small_cfg.H):
        assert np.array_equal(X[h], b.E(z[h]) + b.E_tilde(z[h - 1]))


def test_token_indices(small_cfg, rng):
    b = standard_basis(small_cfg)
    Z = np.array([[3, 5, 7]])
    cur, prev = token_indices(b, Z)
    assert cur.tolist() == [[2, 4, 6]]
    assert prev.tolist() == [[small_cfg.d, 12 + 3, 12 + 5]]
    with pytest.raises(DomainError):
        token_indices(b, np.array([[0, 1]]))
