import numpy as np
import pytest

from diffope.diffusion import make_schedule
from diffope.policies import (
    BoundaryActionError,
    DiffusionPolicyAdapter,
    GaussianPolicy,
    TabularPolicy,
    kappa_max,
    policy_family,
)
from diffope.rng import RngStream


def fd_score(policy, s, a, h=1e-5):
    """Finite-difference oracle for the score in state and action."""
    gs = np.zeros_like(s)
    ga = np.zeros_like(a)
    for i in range(s.shape[1]):
        sp, sm = s.copy(), s.copy()
        sp[:, i] += h
        sm[:, i] -= h
        gs[:, i] = (policy.log_prob(sp, a) - policy.log_prob(sm, a)) / (2 * h)
    for i in range(a.shape[1]):
        ap, am = a.copy(), a.copy()
        ap[:, i] += h
        am[:, i] -= h
        ga[:, i] = (policy.log_prob(s, ap) - policy.log_prob(s, am)) / (2 * h)
    return gs, ga


def test_score_zero_at_mean():
    pol = GaussianPolicy.constant(2, [0.4], 0.7)
    s = np.zeros((3, 2))
    a = np.full((3, 1), 0.4)
    gs, ga = pol.score(s, a)
    assert np.allclose(ga, 0.0, atol=1e-12)
    assert np.allclose(gs, 0.0, atol=1e-12)  # constant mean: no state gradient


def test_score_closed_form_unit_std():
    pol = GaussianPolicy.constant(1, [0.0], 1.0)
    s = np.zeros((1, 1))
    a = np.array([[0.5]])
    _, ga = pol.score(s, a)
    assert np.allclose(ga, [[-0.5]], atol=1e-12)


@pytest.mark.parametrize("squash", [False, True])
def test_score_matches_finite_differences(squash):
    rng = RngStream(21)
    from diffope.nn import Mlp
    net = Mlp.init_random([2, 8, 1], rng, activation="sigmoid")
    kwargs = dict(low=[-2.0], high=[2.0]) if squash else {}
    pol = GaussianPolicy(net, np.log([0.4]), squash=squash, **kwargs)
    s = rng.child(1).normal((5, 2))
    a = pol.sample(s, rng.child(2))
    gs, ga = pol.score(s, a)
    gs_fd, ga_fd = fd_score(pol, s, a)
    assert np.allclose(gs, gs_fd, rtol=1e-4, atol=1e-6)
    assert np.allclose(ga, ga_fd, rtol=1e-4, atol=1e-6)


def test_squashed_log_prob_integrates_to_one():
    # Gauss-Legendre with 200 nodes over the bounded action interval
    pol = GaussianPolicy.constant(1, [0.3], 0.6, squash=True,
                                  low=[-2.0], high=[2.0])
    nodes, weights = np.polynomial.legendre.leggauss(200)
    a = (nodes * 2.0)[:, None]  # map [-1, 1] -> [-2, 2]
    s = np.zeros((200, 1))
    dens = np.exp(pol.log_prob(s, a))
    integral = float((weights * 2.0) @ dens)
    assert abs(integral - 1.0) < 1e-3


def test_boundary_action_raises_without_clamp():
    pol = GaussianPolicy.constant(1, [0.0], 0.5, squash=True,
                                  low=[-1.0], high=[1.0])
    s = np.zeros((1, 1))
    with pytest.raises(BoundaryActionError):
        pol.score(s, np.array([[1.0]]))
    gs, ga = pol.score(s, np.array([[1.0]]), clamp=True)
    assert np.all(np.isfinite(ga))


def test_sampled_actions_respect_bounds():
    pol = GaussianPolicy.constant(1, [0.0], 2.0, squash=True,
                                  low=[-1.5], high=[0.5])
    a = pol.sample(np.zeros((1000, 1)), RngStream(3))
    assert a.min() >= -1.5 and a.max() <= 0.5


def test_kappa_finite_for_floored_squashed_policies():
    lo, hi = [-1.0], [1.0]
    pi = GaussianPolicy.constant(1, [0.4], 0.3, squash=True, low=lo, high=hi)
    beta = GaussianPolicy.constant(1, [-0.4], 0.3, squash=True, low=lo, high=hi)
    grid = np.linspace(-1.0 + 1e-4, 1.0 - 1e-4, 2001)[:, None]
    states = np.zeros((grid.shape[0], 1))
    kappa = kappa_max(pi, beta, states, grid)
    assert np.isfinite(kappa)
    assert kappa > 1.0


def test_policy_family_means():
    fam = policy_family(2, np.linspace(-0.5, 0.5, 5), 0.4)
    assert len(fam) == 5
    mids = [p.mean(np.zeros((1, 2)))[0, 0] for p in fam]
    assert np.allclose(mids, np.linspace(-0.5, 0.5, 5))


def test_tabular_policy_sample_and_logprob():
    pol = TabularPolicy(np.array([[0.25, 0.75], [1.0, 0.0]]))
    acts = pol.sample(np.zeros(4000, dtype=int), RngStream(2))
    assert abs(acts.mean() - 0.75) < 0.03
    lp = pol.log_prob([0, 1], [1, 0])
    assert np.allclose(lp, np.log([0.75, 1.0]))


def test_diffusion_policy_adapter_score_matches_gaussian():
    """An adapter wrapping the exact noised-Gaussian denoiser reproduces the
    closed-form Gaussian score at the lowest noise level within 5%."""
    mu, sigma_a = 0.3, 0.5
    sched = make_schedule("cosine", 64)

    def eps_fn(a, k, s):
        ab = sched.alpha_bars[k - 1]
        var_k = ab * sigma_a ** 2 + (1.0 - ab)
        score_k = -(a - np.sqrt(ab) * mu) / var_k
        return -np.sqrt(1.0 - ab) * score_k

    adapter = DiffusionPolicyAdapter(eps_fn, sched, action_dim=1)
    a = np.array([[0.8], [-0.2], [0.31]])
    s = np.zeros((3, 1))
    _, ga = adapter.score(s, a)
    exact = -(a - mu) / sigma_a ** 2
    assert np.all(np.abs(ga - exact) <= 0.05 * np.maximum(np.abs(exact), 1e-2))


def test_diffusion_policy_adapter_sampling_moments():
    mu, sigma_a = -0.4, 0.6
    sched = make_schedule("cosine", 64)

    def eps_fn(a, k, s):
        ab = sched.alpha_bars[k - 1]
        var_k = ab * sigma_a ** 2 + (1.0 - ab)
        return np.sqrt(1.0 - ab) * (a - np.sqrt(ab) * mu) / var_k

    adapter = DiffusionPolicyAdapter(eps_fn, sched, action_dim=1)
    acts = adapter.sample(np.zeros((4000, 1)), RngStream(8))
    assert abs(acts.mean() - mu) < 0.05
    assert abs(acts.std() - sigma_a) < 0.05
