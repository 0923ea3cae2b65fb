import numpy as np
import pytest

from cecl import encoder as enc
from cecl import losses as L
from gradcheck import STEP, random_problem, relative_errors


@pytest.mark.parametrize("seed", range(12))
def test_composite_loss_matches_finite_differences(seed):
    p, batch, th, cfg = random_problem(np.random.default_rng(1000 + seed))
    errs = relative_errors(p, batch, th, cfg)
    assert max(errs.values()) < 1e-4, errs


@pytest.mark.parametrize("seed", range(5))
def test_single_similarity_entry(seed):
    """d S[i, j] through both towers, checked entry by entry."""
    rng = np.random.default_rng(seed)
    p, batch, _, _ = random_problem(rng)
    B = len(batch)
    i, j = int(rng.integers(B)), int(rng.integers(B))

    def s_ij(q):
        return L.forward(q, batch).sims[i, j]

    fw = L.forward(p, batch)
    grads = enc.zero_grads(p)
    inv_tau = 1.0 / p.tau
    d_img = np.zeros_like(fw.img)
    d_img[i] = fw.txt[j] * inv_tau
    d_txt = np.zeros((B + fw.neg.shape[0], fw.txt.shape[1]))
    d_txt[j] = fw.img[i] * inv_tau
    enc.image_backward(p, fw.img_cache, d_img, grads)
    enc.text_backward(p, fw.txt_cache, d_txt, grads)
    grads["log_tau"] = np.array(-fw.sims[i, j])
    for name in enc.PARAM_NAMES:
        t = np.asarray(getattr(p, name), dtype=float)
        fd = np.zeros_like(t)
        for idx in np.ndindex(t.shape):
            up, down = t.copy(), t.copy()
            up[idx] += STEP
            down[idx] -= STEP
            fd[idx] = (s_ij(p.replace(**{name: up})) - s_ij(p.replace(**{name: down}))) / (2 * STEP)
        den = max(np.linalg.norm(fd), np.linalg.norm(grads[name]), 1e-6)
        assert np.linalg.norm(fd - grads[name]) / den < 1e-4, name


def test_trivial_single_pair_has_zero_itc_gradient():
    p, batch, th, _ = random_problem(np.random.default_rng(3))
    one = L.Batch(batch.features[:1], batch.pos_ids[:1], [], np.full((1, 4), -1))
    cfg = L.LossConfig(use_imc=False, use_cmr=False)
    _, grads, _ = L.loss_gradients(p, one, th, cfg)
    for g in grads.values():
        assert np.all(g == 0.0)


def test_inactive_hinge_contributes_nothing():
    p, batch, _, _ = random_problem(np.random.default_rng(7))
    cfg = L.LossConfig(0.3, 0.5, include_rel_term=False)
    fw = L.forward(p, batch)
    # thresholds so negative that no margin can be violated
    th = np.full(4, -1e3)
    with_cmr = L.loss_gradients(p, batch, th, cfg)
    without = L.loss_gradients(p, batch, th, L.LossConfig(0.3, 0.5, use_cmr=False, include_rel_term=False))
    assert with_cmr[0].cmr == 0.0
    for name in enc.PARAM_NAMES:
        np.testing.assert_array_equal(with_cmr[1][name], without[1][name])
    assert fw.sims.shape == (len(batch), len(batch))
