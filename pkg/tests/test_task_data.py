import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from icrlab.task_data import (ConfigError, DomainError, Sentence, SentenceBatch, TaskConfig,
                              marker_token, count_bigram, count_bigram_batch, make_ood_sentence,
                              read_dataset, sample_single_trigger_batch, sample_batch, sample_ood_batch,
                              sample_sentence, validate_batch, validate_sentence, write_dataset)


def no_violations(cfg, batch, outputs=None):
    viol = validate_batch(cfg, batch, outputs)
    return {k: int(v.sum()) for k, v in viol.items() if v.any()}


@pytest.mark.parametrize("kw", [
    dict(Q=(1, 2), O=(2, 3)),          # overlap
    dict(Q=(), O=(3,)),
    dict(Q=(0,), O=(3,)),
    dict(Q=(1,), O=(13,)),             # beyond N
    dict(alpha=1.0),
    dict(alpha=-0.1),
    dict(d=20),                        # 2(N+1) > d
    dict(H=3),
])
def test_config_rejects(kw):
    base = dict(N=12, H=24, d=32, Q=(1, 2), O=(3, 4))
    base.update(kw)
    with pytest.raises(ConfigError):
        TaskConfig(**base)


def test_config_roundtrip_and_derived(small_cfg):
    assert small_cfg.tau == 13
    assert small_cfg.n_classes == 12
    assert small_cfg.with_alpha(0.2).n_classes == 13
    assert list(small_cfg.neutral) == list(range(5, 13))
    assert TaskConfig.from_dict(small_cfg.to_dict()) == small_cfg


@pytest.mark.parametrize("alpha", [0.0, 0.3, 0.8])
def test_sampled_sentences_are_valid(small_cfg, rng, alpha):
    cfg = small_cfg.with_alpha(alpha)
    batch = sample_batch(cfg, rng, 2000)
    assert no_violations(cfg, batch) == {}
    assert (count_bigram_batch(batch.Z, batch.q, batch.y) == 1).all()
    taus = count_bigram_batch(batch.Z, batch.q, np.full(len(batch), cfg.tau))
    assert (taus == (1 if alpha else 0)).all()
    assert (batch.Z[:, cfg.H - 1] == batch.q).all()
    noise = batch.labels == cfg.tau
    assert (batch.labels[~noise] == batch.y[~noise]).all()
    if alpha == 0:
        assert not noise.any()


def test_sentence_view(small_cfg, rng):
    s = sample_sentence(small_cfg, rng)
    assert s.tokens.shape == (small_cfg.H + 1,)
    assert s.label == s.y and s.context.shape == (small_cfg.H,)
    assert validate_sentence(small_cfg, s).passed
    assert count_bigram(s, s.q, s.y) == 1


def test_sampling_is_deterministic(small_cfg):
    a = sample_batch(small_cfg, np.random.default_rng(7), 50)
    b = sample_batch(small_cfg, np.random.default_rng(7), 50)
    assert np.array_equal(a.Z, b.Z) and np.array_equal(a.y, b.y)


def test_ood_sentences(small_cfg, rng):
    batch = sample_ood_batch(small_cfg, rng, 500)
    assert np.isin(batch.y, small_cfg.neutral).all()
    assert no_violations(small_cfg, batch, small_cfg.neutral) == {}
    s = make_ood_sentence(small_cfg, 7, rng)
    assert s.y == 7 and count_bigram(s, s.q, 7) == 1
    for bad in (3, 1, 0, 13):
        with pytest.raises(DomainError):
            make_ood_sentence(small_cfg, bad, rng)


def test_bigram_position_uniform(small_cfg, rng):
    batch = sample_batch(small_cfg, rng, 20000)
    ctx = batch.Z[:, :-1]
    hit = (ctx[:, :-1] == batch.q[:, None]) & (ctx[:, 1:] == batch.y[:, None])
    zeta = hit.argmax(axis=1) + 1
    slots = small_cfg.H - 3
    counts = np.bincount(zeta, minlength=slots + 1)[1:]
    assert counts.sum() == len(batch)
    expected = len(batch) / slots
    sigma = np.sqrt(expected * (1 - 1 / slots))
    assert np.all(np.abs(counts - expected) < 4.5 * sigma)


def test_single_trigger_variant():
    cfg = TaskConfig(N=12, H=24, d=32, Q=(1,), O=(3, 4))
    batch = sample_single_trigger_batch(cfg, np.random.default_rng(0), 500)
    assert (batch.Z[:, cfg.H - 2] == marker_token(cfg)).all()
    assert (batch.Z[:, cfg.H - 1] == 1).all()
    assert (batch.labels == batch.y).all()
    assert (count_bigram_batch(batch.Z, 1, batch.y) == 1).all()
    with pytest.raises(ConfigError):
        sample_single_trigger_batch(TaskConfig(N=12, H=24, d=32, Q=(1, 2), O=(3, 4)), np.random.default_rng(0), 5)


@pytest.mark.parametrize("corrupt, cond", [
    (lambda z, c: z.__setitem__(c.H - 1, 5), "z_H"),
    (lambda z, c: z.__setitem__(c.H, 9), "label"),
    (lambda z, c: z.__setitem__(0, c.tau), "II"),
    (lambda z, c: z.__setitem__(c.H - 2, 2), "prev_last"),
    (lambda z, c: z.__setitem__(0, 99), "range"),
])
def test_validation_detects_corruption(small_cfg, rng, corrupt, cond):
    s = sample_sentence(small_cfg, rng)
    z = s.tokens.copy()
    corrupt(z, small_cfg)
    rep = validate_sentence(small_cfg, Sentence(z, s.q, s.y))
    assert not rep.passed and cond in rep.violations


def test_validation_condition_three(small_cfg, rng):
    # the trigger followed by something other than its output
    s = sample_sentence(small_cfg, rng)
    z = s.tokens.copy()
    z[2], z[3] = s.q, 9 if s.y != 9 else 10
    rep = validate_sentence(small_cfg, Sentence(z, s.q, s.y))
    assert "III" in rep.violations


def test_dataset_roundtrip(small_noisy, rng, tmp_path):
    batch = sample_batch(small_noisy, rng, 40)
    p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
    write_dataset(p1, batch, 3)
    write_dataset(p2, batch, 3)
    assert p1.read_bytes() == p2.read_bytes()
    back, seed = read_dataset(p1)
    assert seed == 3
    assert np.array_equal(back.Z, batch.Z) and np.array_equal(back.y, batch.y)
    assert np.array_equal(back.q, batch.q)


def test_dataset_errors(tmp_path, small_cfg, rng):
    empty = tmp_path / "e.csv"
    write_dataset(empty, SentenceBatch(np.zeros((0, 25), dtype=np.int64), np.zeros(0, dtype=np.int64),
                                       np.zeros(0, dtype=np.int64)), 0)
    with pytest.raises(DomainError):
        read_dataset(empty)
    with pytest.raises(OSError):
        read_dataset(tmp_path / "missing.csv")


def test_batch_helpers(small_cfg, rng):
    batch = sample_batch(small_cfg, rng, 10)
    sub = batch.subset([1, 3])
    assert len(sub) == 2 and np.array_equal(sub.Z[1], batch.Z[3])
    again = SentenceBatch.from_sentences(list(batch))
    assert np.array_equal(again.Z, batch.Z)


@settings(max_examples=30, deadline=None)
@given(N=st.integers(8, 20), nq=st.integers(1, 3), no=st.integers(1, 3),
       H=st.integers(8, 40), alpha=st.sampled_from([0.0, 0.1, 0.5, 0.9]), seed=st.integers(0, 10**6))
def test_property_sampler_valid(N, nq, no, H, alpha, seed):
    cfg = TaskConfig(N=N, H=H, d=2 * (N + 1), Q=tuple(range(1, nq + 1)),
                     O=tuple(range(nq + 1, nq + no + 1)), alpha=alpha)
    batch = sample_batch(cfg, np.random.default_rng(seed), 64)
    assert no_violations(cfg, batch) == {}
    ood = sample_ood_batch(cfg, np.random.default_rng(seed + 1), 16)
    assert no_violations(cfg, ood, cfg.neutral) == {}
