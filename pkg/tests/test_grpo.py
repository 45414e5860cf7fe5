import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import central_difference, token_mean_loss
from rlvr3d.grpo import (
    GRPOConfig,
    RolloutGroup,
    chunked_loss,
    clipped_surrogate,
    group_advantages,
    grpo_loss,
    kl_token,
    partition_indices,
    sft_loss,
    token_ratio,
    token_terms,
)


def random_group(rng, g=8, max_len=5, spread=0.3, single_token=False):
    lengths = np.ones(g, int) if single_token else rng.integers(1, max_len + 1, g)
    old = [rng.uniform(-3, -0.1, n) for n in lengths]
    ref = [o + rng.normal(0, spread, len(o)) for o in old]
    new = [o + rng.normal(0, spread, len(o)) for o in old]
    return RolloutGroup(sequences=[np.zeros(n, int) for n in lengths], rewards=rng.uniform(0, 3, g),
                        logp_old=old, logp_ref=ref, logp_new=new)


def flat_objective(groups, cfg):
    """Direct token-mean loss over all groups with the new log-probs flattened."""
    old = np.concatenate([np.concatenate(g.logp_old) for g in groups])
    ref = np.concatenate([np.concatenate(g.logp_ref) for g in groups])
    adv = np.concatenate([np.repeat(group_advantages(g.rewards), g.lengths) for g in groups])

    def fn(new):
        return token_mean_loss(new, old, ref, adv, cfg.clip_eps, cfg.kl_beta)

    return fn, np.concatenate([np.concatenate(g.logp_new) for g in groups])


# -- config and groups -------------------------------------------------------


@pytest.mark.parametrize("kwargs", [
    {"clip_eps": 0.0}, {"clip_eps": 1.0}, {"kl_beta": -0.1}, {"group_size": 1},
    {"micro_chunk": 0}, {"advantage_std_floor": 0.0},
])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        GRPOConfig(**kwargs)


def test_group_validation():
    ok = dict(sequences=[[1], [2]], rewards=[0, 1], logp_old=[[-1.0], [-1.0]], logp_ref=[[-1.0], [-1.0]])
    group = RolloutGroup(**ok)
    assert group.group_size == 2 and group.lengths == [1, 1]
    np.testing.assert_array_equal(group.logp_new[0], group.logp_old[0])
    with pytest.raises(ValueError):
        RolloutGroup(**{**ok, "sequences": [[1]], "rewards": [0], "logp_old": [[-1.0]], "logp_ref": [[-1.0]]})
    with pytest.raises(ValueError):
        RolloutGroup(**{**ok, "sequences": [[], [2]]})
    with pytest.raises(ValueError):
        RolloutGroup(**{**ok, "logp_ref": [[-1.0, -2.0], [-1.0]]})
    with pytest.raises(ValueError):
        RolloutGroup(**{**ok, "rewards": [0, 1, 2]})


# -- advantages --------------------------------------------------------------


def test_advantage_examples():
    np.testing.assert_array_equal(group_advantages([1, 0, 1, 0]), [1, -1, 1, -1])
    np.testing.assert_array_equal(group_advantages([2.5] * 6), np.zeros(6))
    with pytest.raises(ValueError):
        group_advantages([3])


def test_advantage_floor():
    adv = group_advantages([0.0, 1e-6], std_floor=1e-4)
    np.testing.assert_allclose(adv, [-5e-3, 5e-3])


rewards_st = st.lists(st.floats(-100, 100), min_size=2, max_size=16)


@given(rewards_st)
def test_advantage_normalization(rewards):
    adv = group_advantages(rewards)
    r = np.array(rewards)
    if np.all(r == r[0]):
        assert np.all(adv == 0)
    elif r.std() > 1e-3:
        assert abs(adv.mean()) < 1e-12
        assert abs(adv.std() - 1) < 1e-9


@given(rewards_st, st.floats(-50, 50), st.floats(0.1, 10))
def test_advantage_shift_scale_invariance(rewards, shift, scale):
    r = np.array(rewards)
    if r.std() < 1e-2:
        return
    np.testing.assert_allclose(group_advantages(r + shift), group_advantages(r), atol=1e-8)
    np.testing.assert_allclose(group_advantages(r * scale), group_advantages(r), atol=1e-8)


# -- scalar ops ------------------------------------------------------------------


def test_clipped_surrogate_examples():
    assert clipped_surrogate(1.0, 2.0, 0.2) == 2.0
    assert clipped_surrogate(1.5, 1.0, 0.2) == pytest.approx(1.2)
    assert clipped_surrogate(0.5, -1.0, 0.2) == pytest.approx(-0.8)


@given(st.floats(0.8, 1.2), st.floats(-5, 5))
def test_clip_inactive_inside_band(r, a):
    assert clipped_surrogate(r, a, 0.2) == r * a


def test_ratio_and_kl_examples(rng):
    assert token_ratio(-1.0, -1.0) == 1.0
    assert token_ratio(math.log(2), 0.0) == pytest.approx(2.0, abs=1e-15)
    p_new, p_old = rng.uniform(0.01, 1, 2)
    assert token_ratio(math.log(p_new), math.log(p_old)) == pytest.approx(p_new / p_old, rel=1e-12)
    assert kl_token(0.0, 0.0) == 0.0
    assert kl_token(0.1, 0.0) == pytest.approx(0.0051709180756477, rel=1e-12)


@given(st.floats(-20, 20), st.floats(-20, 20))
def test_kl_nonnegative(ref, new):
    value = kl_token(ref, new)
    assert value >= 0
    if ref != new:
        assert value > 0 or abs(ref - new) < 1e-7


def test_sft_loss():
    assert sft_loss([0.0, 0.0]) == 0.0
    assert sft_loss([-math.log(2)] * 2) == pytest.approx(2 * math.log(2))
    lp = np.random.default_rng(1).uniform(-3, 0, 7)
    assert sft_loss(lp) == pytest.approx(-sum(lp), abs=1e-12)
    assert sft_loss(lp, "mean") == pytest.approx(-sum(lp) / 7, abs=1e-12)
    with pytest.raises(ValueError):
        sft_loss([])
    with pytest.raises(ValueError):
        sft_loss([0.0], "max")


# -- loss --------------------------------------------------------------------


def test_zero_loss_on_policy_with_zero_advantage():
    g = RolloutGroup([[1], [2]], [1.0, 1.0], [[-0.5], [-0.7]], [[-0.5], [-0.7]])
    loss, grads = grpo_loss(g, GRPOConfig(kl_beta=0.0))
    assert loss == 0.0
    assert all(np.all(gr == 0) for gr in grads)


def test_single_token_hand_composed():
    cfg = GRPOConfig(clip_eps=0.2, kl_beta=0.1)
    g = RolloutGroup([[0], [0]], [1.0, 0.0], logp_old=[[-1.0], [-1.0]], logp_ref=[[-0.9], [-1.0]],
                     logp_new=[[-1.0 + math.log(1.5)], [-1.0 + math.log(0.9)]])
    # advantages (+1, -1); r = 1.5 and 0.9
    s0 = min(1.5 * 1, 1.2 * 1)
    s1 = min(0.9 * -1, 0.9 * -1)
    d0 = -0.9 - (-1.0 + math.log(1.5))
    d1 = -1.0 - (-1.0 + math.log(0.9))
    kl = (math.exp(d0) - d0 - 1) + (math.exp(d1) - d1 - 1)
    expected = (-(s0 + s1) + 0.1 * kl) / 2
    loss, grads = grpo_loss(g, cfg)
    assert loss == pytest.approx(expected, abs=1e-14)
    # clip binds on sample 0: only the KL term remains in its gradient
    assert grads[0][0] == pytest.approx(0.1 * (1 - math.exp(d0)) / 2, abs=1e-14)
    assert grads[1][0] == pytest.approx((0.9 + 0.1 * (1 - math.exp(d1))) / 2, abs=1e-14)


@pytest.mark.parametrize("beta", [0.0, 0.04, 0.5])
@pytest.mark.parametrize("spread", [0.01, 0.5])
@pytest.mark.parametrize("single_token", [True, False])
def test_loss_and_gradient_match_direct_formula(beta, spread, single_token):
    rng = np.random.default_rng(int(beta * 100) + int(spread * 100) + single_token)
    cfg = GRPOConfig(kl_beta=beta)
    groups = [random_group(rng, spread=spread, single_token=single_token) for _ in range(3)]
    fn, x = flat_objective(groups, cfg)
    loss, grads = grpo_loss(groups, cfg)
    assert loss == pytest.approx(fn(x), rel=1e-12, abs=1e-15)
    numeric = central_difference(fn, x)
    analytic = np.concatenate(grads)
    # exclude tokens sitting within h of a clip boundary, where the objective has a kink
    terms = token_terms(x, np.concatenate([np.concatenate(g.logp_old) for g in groups]),
                        np.concatenate([np.concatenate(g.logp_ref) for g in groups]),
                        np.concatenate([np.repeat(group_advantages(g.rewards), g.lengths) for g in groups]),
                        cfg)
    smooth = (np.abs(terms.ratio - 0.8) > 1e-4) & (np.abs(terms.ratio - 1.2) > 1e-4)
    np.testing.assert_allclose(analytic[smooth], numeric[smooth], rtol=1e-4, atol=1e-9)


def test_beta_zero_ignores_reference(rng):
    cfg = GRPOConfig(kl_beta=0.0)
    g = random_group(rng)
    loss, grads = grpo_loss(g, cfg)
    g.logp_ref = [r + rng.normal(0, 1, len(r)) for r in g.logp_ref]
    loss2, grads2 = grpo_loss(g, cfg)
    assert loss == loss2
    for a, b in zip(grads, grads2):
        np.testing.assert_array_equal(a, b)


def test_clip_binding_zeroes_surrogate_gradient():
    cfg = GRPOConfig(kl_beta=0.0)
    terms = token_terms([math.log(1.5), math.log(0.5), 0.0], [0.0, 0.0, 0.0], [0.0] * 3,
                        [1.0, -1.0, 1.0], cfg)
    np.testing.assert_array_equal(terms.clipped, [True, True, False])
    np.testing.assert_array_equal(terms.grad[:2], [0.0, 0.0])


# -- chunking ----------------------------------------------------------------


def test_partition_indices():
    assert partition_indices(5, 2) == [[0, 1], [2, 3], [4]]
    assert partition_indices(3, 8) == [[0, 1, 2]]
    with pytest.raises(ValueError):
        partition_indices(3, 0)


def test_single_chunk_is_bitwise_equal(rng):
    groups = [random_group(rng) for _ in range(2)]
    cfg = GRPOConfig(micro_chunk=16)
    loss, grads = grpo_loss(groups, cfg)
    closs, cgrads = chunked_loss(groups, cfg)
    assert loss == closs
    for a, b in zip(grads, cgrads):
        np.testing.assert_array_equal(a, b)


@given(st.integers(0, 2**32 - 1), st.integers(1, 3))
def test_chunking_identity_random_partitions(seed, n_groups):
    rng = np.random.default_rng(seed)
    groups = [random_group(rng, g=int(rng.integers(2, 9))) for _ in range(n_groups)]
    cfg = GRPOConfig(kl_beta=float(rng.uniform(0, 0.2)))
    k = sum(g.group_size for g in groups)
    labels = rng.integers(0, int(rng.integers(1, k + 1)), k)
    partition = [list(np.flatnonzero(labels == m)) for m in np.unique(labels)]
    loss, grads = grpo_loss(groups, cfg)
    closs, cgrads = chunked_loss(groups, cfg, partition)
    assert closs == pytest.approx(loss, rel=1e-12, abs=1e-15)
    for a, b in zip(grads, cgrads):
        np.testing.assert_allclose(b, a, rtol=1e-12, atol=1e-16)


def test_chunked_rejects_bad_partition(rng):
    g = random_group(rng, g=4)
    with pytest.raises(ValueError):
        chunked_loss(g, GRPOConfig(), [[0, 1], [1, 2, 3]])
    with pytest.raises(ValueError):
        chunked_loss(g, GRPOConfig(), [[0, 1]])
