import math

import numpy as np
import pytest

from icrlab.losses import (batch_xent, bayes_risk, contract_grad, cross_entropy, empirical_loss,
                           empirical_loss_grad, empirical_loss_model, estimate_alpha_gamma,
                           expected_targets, model_loss, one_hot_targets, ood_probabilities,
                           population_loss_noiseless, population_loss_noisy, stratified_weights,
                           xent_probs)
from icrlab.model import NOISELESS_LINEAR, NOISY_LINEAR, NOISY_SOFTMAX, build_reparam, sentence_counts
from icrlab.task_data import DomainError, SentenceBatch, count_bigram_batch, sample_batch, sample_ood_batch


def test_cross_entropy_uniform():
    assert cross_entropy(np.zeros(61), 5) == pytest.approx(math.log(61), abs=1e-12)
    assert cross_entropy(np.zeros(61), 5, n_classes=60) == pytest.approx(math.log(60), abs=1e-12)
    with pytest.raises(DomainError):
        cross_entropy(np.zeros(4), 5)


def test_tiny_losses_keep_relative_accuracy():
    xi = np.zeros((1, 10))
    xi[0, 2] = 80.0
    per, p = xent_probs(xi, one_hot_targets(np.array([3]), 10))
    exact = 9 * math.exp(-80.0)
    assert per[0] == pytest.approx(exact, rel=1e-12)
    assert p.sum() == pytest.approx(1.0)


def test_batch_xent_gradient(rng):
    xi = rng.normal(size=(5, 8))
    T = rng.dirichlet(np.ones(7), size=5)
    w = rng.uniform(0.5, 2, size=5)
    loss, G = batch_xent(xi, T, w)
    assert not G[:, 7].any()
    h = 1e-6
    for i, j in [(0, 0), (2, 3), (4, 6)]:
        xp, xm = xi.copy(), xi.copy()
        xp[i, j] += h
        xm[i, j] -= h
        num = (batch_xent(xp, T, w)[0] - batch_xent(xm, T, w)[0]) / (2 * h)
        assert num == pytest.approx(G[i, j], abs=1e-9)


def test_contract_grad_matches_direct(rng):
    xi = rng.normal(size=(6, 5))
    T = rng.dirichlet(np.ones(5), size=6)
    dxi = rng.normal(size=(6, 5))
    _, p = xent_probs(xi, T)
    direct = np.einsum("ij,ij->i", p - T, dxi)
    assert np.allclose(contract_grad(p, T, dxi), direct, atol=1e-13)


def test_stratified_weights():
    q = np.array([1, 1, 1, 2, 5])
    w = stratified_weights(q, (1, 2, 3, 5))
    assert w.sum() == pytest.approx(1.0)
    assert w[q == 1].sum() == pytest.approx(w[q == 2].sum()) == pytest.approx(1 / 3)


def test_bayes_risk():
    assert bayes_risk(0.5) == pytest.approx(math.log(2))
    assert bayes_risk(0.2) == pytest.approx(0.500402, abs=1e-6)
    assert bayes_risk(0.8) == pytest.approx(bayes_risk(0.2))
    assert bayes_risk(0.0) == 0.0
    with pytest.raises(DomainError):
        bayes_risk(1.5)


def test_population_loss_noiseless(small_cfg, rng):
    batch = sample_batch(small_cfg, rng, 100)
    counts = sentence_counts(small_cfg, batch.Z, batch.q, batch.y)
    assert population_loss_noiseless(0.0, counts) == pytest.approx(math.log(small_cfg.N))
    lam = {1: 2.0, 2: 3.0}
    mc = population_loss_noiseless(lam, counts)
    frac = np.mean(batch.q == 1)
    hist = {"N": small_cfg.N, "hist": {(2.0, 1): frac, (3.0, 1): 1 - frac}}
    assert population_loss_noiseless(None, hist) == pytest.approx(mc, rel=1e-12)
    # agrees with the materialized model
    p = build_reparam(small_cfg, NOISELESS_LINEAR, [2.0, 3.0])
    assert model_loss(p, small_cfg, batch) == pytest.approx(mc, rel=1e-12)


@pytest.mark.parametrize("alpha", [0.2, 0.5, 0.8])
def test_population_loss_noisy_reaches_bayes(small_cfg, rng, alpha):
    cfg = small_cfg.with_alpha(alpha)
    batch = sample_batch(cfg, rng, 200)
    counts = sentence_counts(cfg, batch.Z, batch.q, batch.y)
    g = math.log(alpha / (1 - alpha))
    loss = population_loss_noisy(NOISY_LINEAR, {"lam": 60.0, "gamma": g}, alpha, counts)
    assert loss == pytest.approx(bayes_risk(alpha), abs=1e-9)
    assert loss >= bayes_risk(alpha) - 1e-12
    with pytest.raises(DomainError):
        population_loss_noisy(NOISY_LINEAR, {"lam": 1.0, "gamma": 0.0}, 1.0, counts)


def test_population_loss_noisy_matches_model(small_cfg, rng):
    cfg = small_cfg.with_alpha(0.3)
    batch = sample_batch(cfg, rng, 50)
    counts = sentence_counts(cfg, batch.Z, batch.q, batch.y)
    p = build_reparam(cfg, NOISY_SOFTMAX, [1.3], 2.0, -0.4)
    val = population_loss_noisy(NOISY_SOFTMAX, {"lam": 1.3, "s": 2.0, "gamma": -0.4}, 0.3, counts)
    assert model_loss(p, cfg, batch) == pytest.approx(val, rel=1e-12)
    assert model_loss(p, cfg, batch, counts) == pytest.approx(val, rel=1e-12)


def test_estimate_alpha_gamma(small_noisy, rng):
    batch = sample_batch(small_noisy, rng, 1000)
    st = estimate_alpha_gamma(batch, small_noisy)
    assert st.M == 1000 and st.M_tau == int((batch.labels == small_noisy.tau).sum())
    assert st.gamma_hat == pytest.approx(math.log(st.alpha_hat / (1 - st.alpha_hat)))
    clean = sample_batch(small_noisy.with_alpha(0.0), rng, 20)
    st0 = estimate_alpha_gamma(clean, tau=small_noisy.tau)
    assert st0.degenerate and st0.gamma_hat == -math.inf
    allnoise = SentenceBatch(clean.Z.copy(), clean.q, clean.y)
    allnoise.Z[:, -1] = small_noisy.tau
    assert estimate_alpha_gamma(allnoise, tau=small_noisy.tau).gamma_hat == math.inf
    with pytest.raises(DomainError):
        empirical_loss(1.0, st0, [1] * 20, small_noisy.N)


@pytest.mark.parametrize("lam", [0.0, 0.7, 5.0, 40.0])
def test_empirical_loss_matches_model(small_noisy, rng, lam):
    batch = sample_batch(small_noisy, rng, 400)
    st = estimate_alpha_gamma(batch, small_noisy)
    C = count_bigram_batch(batch.Z, batch.q, batch.y)
    p = build_reparam(small_noisy, NOISY_LINEAR, [lam], gamma=st.gamma_hat)
    want = empirical_loss_model(p, batch, small_noisy.n_classes)
    assert empirical_loss(lam, st, C, small_noisy.N) == pytest.approx(want, rel=1e-10, abs=1e-14)


def test_empirical_loss_grad(small_noisy, rng):
    batch = sample_batch(small_noisy, rng, 300)
    st = estimate_alpha_gamma(batch, small_noisy)
    C = count_bigram_batch(batch.Z, batch.q, batch.y)
    for lam in (0.0, 1.0, 10.0, 200.0, 700.0):
        assert empirical_loss_grad(lam, st, C, small_noisy.N) < 0
    assert empirical_loss_grad(1e4, st, C, small_noisy.N) == 0.0  # underflow, no overflow
    h = 1e-6
    for lam in (1.0, 10.0):
        num = (empirical_loss(lam + h, st, C, small_noisy.N)
               - empirical_loss(lam - h, st, C, small_noisy.N)) / (2 * h)
        assert num == pytest.approx(empirical_loss_grad(lam, st, C, small_noisy.N), rel=1e-5)


def test_ood_probabilities(small_cfg, rng):
    ood = sample_ood_batch(small_cfg, rng, 30)
    p = build_reparam(small_cfg, NOISELESS_LINEAR, [3.0, 3.0])
    py, pt = ood_probabilities(p, small_cfg, ood)
    counts = sentence_counts(small_cfg, ood.Z, ood.q, ood.y)
    py2, _ = ood_probabilities(p, small_cfg, ood, counts)
    assert not pt.any()
    assert np.allclose(py, py2)
    assert np.allclose(py, math.exp(3) / (math.exp(3) + small_cfg.N - 1))


def test_expected_targets(small_noisy):
    T = expected_targets(small_noisy, np.array([3, 4]))
    assert T.shape == (2, 13)
    assert T[0, 2] == pytest.approx(0.7) and T[0, 12] == pytest.approx(0.3)
    assert T.sum(axis=1) == pytest.approx([1, 1])
