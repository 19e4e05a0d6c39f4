import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import numeric_grad, rel_err
from vtrigger import losses, nn
from vtrigger.errors import CtcInfeasibleError


def random_instance(rng, T_max=6, A_max=4, L_max=3):
    """Random feasible-or-not small CTC instance (blank = 0, labels in 1..A-1)."""
    A = int(rng.integers(2, A_max + 1))
    T = int(rng.integers(1, T_max + 1))
    L = int(rng.integers(1, L_max + 1))
    labels = rng.integers(1, A, size=L)
    lp = nn.log_softmax(rng.normal(scale=2.0, size=(T, A)))
    return lp, labels


def test_single_frame_single_label():
    q = 0.3
    lp = np.log([[0.5, q, 0.2]])
    loss, _ = losses.ctc_loss(lp, [1])
    assert loss == pytest.approx(-np.log(q), abs=1e-15)


def test_uniform_two_frames_loss_is_ln3():
    lp = np.log(np.full((2, 3), 1.0 / 3.0))
    loss, _ = losses.ctc_loss(lp, [1])
    assert abs(loss - np.log(3.0)) <= 1e-12
    assert abs(losses.ctc_bruteforce(lp, [1]) - np.log(3.0)) <= 1e-12


def test_dp_equals_bruteforce_on_random_instances():
    rng = np.random.default_rng(0)
    checked = 0
    for _ in range(300):
        lp, labels = random_instance(rng)
        if lp.shape[0] < losses.ctc_min_frames(labels):
            continue
        loss, _ = losses.ctc_loss(lp, labels)
        assert abs(loss - losses.ctc_bruteforce(lp, labels)) <= 1e-9
        checked += 1
    assert checked > 100


def test_labels_longer_than_frames_infeasible():
    lp = np.log(np.full((2, 4), 0.25))
    with pytest.raises(CtcInfeasibleError):
        losses.ctc_loss(lp, [1, 2, 3])
    with pytest.raises(CtcInfeasibleError):
        losses.ctc_bruteforce(lp, [1, 2, 3])
    assert losses.ctc_log_likelihood(lp, [1, 2, 3]) == -np.inf


def test_repeat_needs_separating_blank():
    lp = np.log(np.full((2, 3), 1.0 / 3.0))
    with pytest.raises(CtcInfeasibleError):
        losses.ctc_loss(lp, [1, 1])
    with pytest.raises(CtcInfeasibleError):
        losses.ctc_bruteforce(lp, [1, 1])
    assert losses.ctc_min_frames([1, 1]) == 3


def test_blank_in_labels_rejected():
    with pytest.raises(ValueError):
        losses.ctc_loss(np.zeros((3, 3)), [0, 1])


def test_bruteforce_refuses_large_instances():
    with pytest.raises(ValueError, match="too large"):
        losses.ctc_bruteforce(np.zeros((20, 4)), [1])


def test_ctc_gradient_wrt_log_posteriors(rng):
    lp = nn.log_softmax(rng.normal(size=(6, 4)))
    labels = [1, 2, 2]
    _, g = losses.ctc_loss(lp, labels)
    num = numeric_grad(lambda: losses.ctc_loss(lp, labels)[0], lp)
    assert rel_err(g, num) <= 1e-5


def test_ctc_gradient_wrt_logits_is_p_minus_gamma(rng):
    z = rng.normal(size=(7, 5))
    labels = [3, 1, 4]
    _, g = losses.ctc_grad_logits(nn.log_softmax(z), labels)
    num = numeric_grad(lambda: losses.ctc_loss(nn.log_softmax(z), labels)[0], z)
    assert rel_err(g, num) <= 1e-5
    # occupancy rows are distributions, so logit-gradient rows sum to zero
    np.testing.assert_allclose(g.sum(axis=1), 0.0, atol=1e-12)


@given(st.integers(0, 100_000))
def test_ctc_relabeling_equivariance(seed):
    rng = np.random.default_rng(seed)
    lp, labels = random_instance(rng, T_max=8, A_max=5)
    if lp.shape[0] < losses.ctc_min_frames(labels):
        return
    A = lp.shape[1]
    perm = np.concatenate([[0], 1 + rng.permutation(A - 1)])  # blank stays put
    inv = np.argsort(perm)
    loss, g = losses.ctc_loss(lp, labels)
    loss_p, g_p = losses.ctc_loss(lp[:, inv], perm[labels])
    assert loss_p == pytest.approx(loss, abs=1e-10)
    np.testing.assert_allclose(g_p, g[:, inv], atol=1e-10)


@given(st.integers(0, 100_000))
def test_ctc_loss_nonnegative_finite(seed):
    rng = np.random.default_rng(seed)
    lp, labels = random_instance(rng, T_max=30, A_max=10, L_max=8)
    if lp.shape[0] < losses.ctc_min_frames(labels):
        return
    loss, g = losses.ctc_loss(lp, labels)
    assert np.isfinite(loss) and loss >= 0
    assert np.all(np.isfinite(g))


def test_long_sequences_do_not_underflow(rng):
    lp = nn.log_softmax(rng.normal(size=(800, 54)))
    loss, g = losses.ctc_loss(lp, rng.integers(1, 54, size=40))
    assert np.isfinite(loss) and loss > 100
    np.testing.assert_allclose(-g.sum(axis=1), 1.0, atol=1e-9)


def test_batched_ctc_matches_single(rng):
    B, T, A = 5, 12, 6
    lengths = np.array([12, 7, 9, 3, 12])
    lp = nn.log_softmax(rng.normal(size=(B, T, A)))
    labels = [rng.integers(1, A, size=n) for n in (4, 2, 5, 1, 3)]
    lb, gb = losses.ctc_loss_batch(lp, lengths, labels)
    llb = losses.ctc_log_likelihood_batch(lp, lengths, labels)
    for b in range(B):
        l, g = losses.ctc_loss(lp[b, :lengths[b]], labels[b])
        assert lb[b] == pytest.approx(l, abs=1e-10)
        assert llb[b] == pytest.approx(-l, abs=1e-10)
        np.testing.assert_allclose(gb[b, :lengths[b]], g, atol=1e-10)
        assert np.all(gb[b, lengths[b]:] == 0)


def test_batched_ctc_infeasible_row():
    lp = np.log(np.full((2, 3, 3), 1 / 3))
    with pytest.raises(CtcInfeasibleError):
        losses.ctc_loss_batch(lp, [3, 1], [[1], [1, 2]])
    ll = losses.ctc_log_likelihood_batch(lp, [3, 1], [[1], [1, 2]])
    assert np.isfinite(ll[0]) and ll[1] == -np.inf


# --- decoder CE, discriminative loss, joint -----------------------------------

def test_decoder_ce_perfect_and_uniform():
    targets = np.array([2, 0, 1])
    onehot = np.full((3, 4), -np.inf)
    onehot[np.arange(3), targets] = 0.0
    assert losses.decoder_ce(onehot, targets)[0] == 0.0
    assert losses.decoder_ce(np.log(np.full((3, 4), 0.25)), targets)[0] == pytest.approx(np.log(4), abs=1e-15)


def test_decoder_ce_length_mismatch():
    with pytest.raises(ValueError):
        losses.decoder_ce(np.zeros((3, 4)), [1, 2])


def test_decoder_ce_gradient(rng):
    lp = nn.log_softmax(rng.normal(size=(5, 6)))
    t = rng.integers(0, 6, size=5)
    _, g = losses.decoder_ce(lp, t)
    assert rel_err(g, numeric_grad(lambda: losses.decoder_ce(lp, t)[0], lp)) <= 1e-6


def test_decoder_ce_batch_matches_rows(rng):
    lp = nn.log_softmax(rng.normal(size=(2, 4, 5)))
    t = rng.integers(0, 5, size=(2, 4))
    loss, g = losses.decoder_ce_batch(lp, t, [4, 2])
    for b, n in enumerate((4, 2)):
        l1, g1 = losses.decoder_ce(lp[b, :n], t[b, :n])
        assert loss[b] == pytest.approx(l1)
        np.testing.assert_allclose(g[b, :n], g1)
        assert np.all(g[b, n:] == 0)


def test_disc_loss_values():
    assert losses.disc_loss(0.5, 1)[0] == pytest.approx(np.log(2))
    assert losses.disc_loss(0.5, 0)[0] == pytest.approx(np.log(2))
    assert losses.disc_loss(1 - 1e-12, 1)[0] < 1e-11
    with pytest.raises(ValueError):
        losses.disc_loss(1.0, 1)


@pytest.mark.parametrize("y", [0, 1])
def test_disc_gradient_through_logit(y):
    z = np.array([0.37])
    p = float(nn.sigmoid(z[0]))
    _, g = losses.disc_loss(p, y)
    num = numeric_grad(lambda: losses.disc_loss(float(nn.sigmoid(z[0])), y)[0], z)[0]
    assert g == pytest.approx(num, rel=1e-7)
    assert losses.disc_loss_from_logit(0.37, y)[1] == pytest.approx(g)
    assert losses.disc_loss_from_logit(0.37, y)[0] == pytest.approx(losses.disc_loss(p, y)[0])


def test_joint_loss_sums_with_unit_weights():
    assert losses.joint_loss(ctc=1.0, ce=0.5).total == 1.5
    assert losses.joint_loss(ctc=2.0).total == 2.0
    assert losses.joint_loss(disc=0.7).total == 0.7
    with pytest.raises(ValueError):
        losses.joint_loss(ce=1.0)
