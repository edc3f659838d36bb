import numpy as np
import pytest

from diffope.data import NormStats, Trajectory, slice_windows, window_width
from diffope.diffusion import (
    DenoiserModel,
    GaussianMixture1D,
    GuidanceSpec,
    NoiseSchedule,
    denoise_mean,
    exact_score_sample,
    forward_noise,
    guidance,
    guided_sample,
    make_schedule,
    train_denoiser,
)
from diffope.errors import NumericalAbortError
from diffope.metrics import ks_statistic
from diffope.rng import RngStream


# -- schedules -----------------------------------------------------------------


def test_abar_zero_convention():
    sched = make_schedule("cosine", 16)
    assert sched.abar(0) == 1.0


def test_schedule_hand_product():
    sched = NoiseSchedule(np.array([0.9, 0.8]))
    assert np.allclose(sched.alpha_bars, [0.9, 0.72])
    assert np.isclose(sched.sigmas[1], np.sqrt(0.28))


def test_cosine_schedule_terminal_noise():
    sched = make_schedule("cosine", 100)
    assert sched.alpha_bars[-1] < 0.01


def test_linear_schedule_terminal_noise():
    for k in (8, 64, 256):
        sched = make_schedule("linear", k)
        assert sched.alpha_bars[-1] < 0.01
        assert np.all(np.diff(sched.alpha_bars) < 0)


def test_schedule_consistency_invariant():
    sched = make_schedule("cosine", 32)
    recon = np.concatenate([[sched.alpha_bars[0]],
                            sched.alpha_bars[:-1] * sched.alphas[1:]])
    assert np.allclose(recon, sched.alpha_bars, atol=1e-14)


def test_invalid_schedule_args():
    with pytest.raises(ValueError):
        make_schedule("cosine", 0)
    with pytest.raises(ValueError):
        make_schedule("banana", 8)
    with pytest.raises(ValueError):
        NoiseSchedule(np.array([1.2, 0.5]))


# -- forward noising and posterior mean -----------------------------------------


def test_forward_noise_identity_at_k0():
    sched = make_schedule("cosine", 8)
    x0 = np.array([1.0, -2.0])
    assert np.array_equal(forward_noise(x0, 0, np.ones(2), sched), x0)


def test_forward_noise_hand_value():
    # abar = 0.25: 0.5 * 2 + sqrt(0.75) * 1 = 1.86603
    sched = NoiseSchedule(np.array([0.5, 0.5]))
    got = forward_noise(np.array([2.0]), 2, np.array([1.0]), sched)
    assert np.isclose(got[0], 1.86603, atol=1e-5)


def test_forward_noise_zero_input():
    sched = make_schedule("cosine", 8)
    assert np.array_equal(forward_noise(np.zeros(3), 4, np.zeros(3), sched),
                          np.zeros(3))


def test_denoise_mean_zero_eps():
    sched = NoiseSchedule(np.array([0.81]))
    got = denoise_mean(np.array([1.0]), np.array([0.0]), 1, sched)
    assert np.isclose(got[0], 1.0 / 0.9)


def test_denoise_mean_hand_value():
    # alpha = 0.81, sigma = 0.8 (abar = 0.36), tau = 1.0, eps_hat = 0.5
    sched = NoiseSchedule(np.array([4.0 / 9.0, 0.81]))
    assert np.isclose(sched.sigmas[1], 0.8)
    got = denoise_mean(np.array([1.0]), np.array([0.5]), 2, sched)
    assert np.isclose(got[0], 0.97917, atol=1e-5)


def test_denoise_mean_guards():
    sched = NoiseSchedule(np.array([1.0]))  # sigma_1 = 0
    with pytest.raises(ValueError):
        denoise_mean(np.array([1.0]), np.array([0.0]), 1, sched)
    sched2 = make_schedule("cosine", 4)
    with pytest.raises(ValueError):
        denoise_mean(np.array([1.0]), np.array([0.0]), 5, sched2)


# -- guidance ------------------------------------------------------------------


def spec_with_constant_scores(g_pi, g_beta, alpha, lam, normalize):
    """Single-step window (w=1, ds=1, da=1): scores land on (s_0, a_0)."""

    def tgt(s, a):
        return (np.full_like(s, g_pi[0]), np.full_like(a, g_pi[1]))

    def beh(s, a):
        return (np.full_like(s, g_beta[0]), np.full_like(a, g_beta[1]))

    return GuidanceSpec(alpha, lam, normalize, tgt, beh)


def test_guidance_hand_example():
    spec = spec_with_constant_scores((3.0, 4.0), (0.0, 1.0), 0.5, 0.25, True)
    g = guidance(np.zeros((1, 3)), spec, w=1, state_dim=1, action_dim=1)
    assert np.allclose(g[0, :2], [0.3, 0.15], atol=1e-12)
    assert g[0, 2] == 0.0  # trailing state carries no score


def test_guidance_zero_weights():
    spec = spec_with_constant_scores((3.0, 4.0), (0.0, 1.0), 0.0, 0.0, True)
    g = guidance(np.zeros((2, 3)), spec, w=1, state_dim=1, action_dim=1)
    assert np.all(g == 0.0)


def test_guidance_simple_unit_vector():
    spec = spec_with_constant_scores((3.0, 4.0), (0.0, 1.0), 1.0, 0.0, True)
    g = guidance(np.zeros((1, 3)), spec, w=1, state_dim=1, action_dim=1)
    assert np.isclose(np.linalg.norm(g[0]), 1.0)
    assert np.allclose(g[0, :2], [0.6, 0.8])


def test_guidance_linearity_without_normalization():
    a = spec_with_constant_scores((3.0, 4.0), (1.0, -2.0), 0.4, 0.3, False)
    b = spec_with_constant_scores((3.0, 4.0), (1.0, -2.0), 0.1, 0.6, False)
    c = spec_with_constant_scores((3.0, 4.0), (1.0, -2.0), 0.5, 0.9, False)
    x = np.zeros((1, 3))
    g_sum = guidance(x, a, 1, 1, 1) + guidance(x, b, 1, 1, 1)
    assert np.allclose(g_sum, guidance(x, c, 1, 1, 1), atol=1e-12)


def test_guidance_zero_norm_term_contributes_zero():
    spec = spec_with_constant_scores((0.0, 0.0), (0.0, 1.0), 0.7, 0.5, True)
    g = guidance(np.zeros((1, 3)), spec, 1, 1, 1)
    assert np.allclose(g[0, :2], [0.0, -0.5])


# -- exact-score sampler ---------------------------------------------------------


def test_exact_sampler_standard_normal_fixed_point():
    mix = GaussianMixture1D([1.0], [0.0], [1.0])
    sched = make_schedule("cosine", 64)
    x = exact_score_sample(mix, sched, RngStream(31), 10 ** 4)
    assert abs(x.mean()) < 0.03
    assert abs(x.var() - 1.0) < 0.05


def test_exact_sampler_mixture_mode_masses():
    mix = GaussianMixture1D([0.5, 0.5], [1.0, -1.0], [0.5, 0.5])
    sched = make_schedule("cosine", 64)
    x = exact_score_sample(mix, sched, RngStream(17), 10 ** 4)
    right = (x > 0).mean()
    assert abs(right - 0.5) < 0.03


def test_exact_sampler_guided_right_mode():
    mix = GaussianMixture1D([0.5, 0.5], [1.0, -1.0], [0.5, 0.5])
    sched = make_schedule("cosine", 64)
    x = exact_score_sample(mix, sched, RngStream(17), 10 ** 4,
                           guidance_fn=lambda v, ab: -(v - 1.0) / 0.25)
    assert (x > 0).mean() >= 0.9


def test_exact_sampler_marginals_match_noised_mixture():
    mix = GaussianMixture1D([0.5, 0.5], [1.0, -1.0], [0.5, 0.5])
    k_steps = 64
    sched = make_schedule("cosine", k_steps)
    _, trace = exact_score_sample(mix, sched, RngStream(29), 10 ** 4,
                                  trace_steps={k_steps, k_steps // 2, 1})
    for k in (k_steps, k_steps // 2, 1):
        noisy = mix.noised(sched.abar(k))
        assert ks_statistic(trace[k], noisy.cdf) < 0.03, f"k={k}"


def test_exact_sampler_deterministic():
    mix = GaussianMixture1D([1.0], [0.3], [0.8])
    sched = make_schedule("cosine", 16)
    a = exact_score_sample(mix, sched, RngStream(5), 100)
    b = exact_score_sample(mix, sched, RngStream(5), 100)
    assert np.array_equal(a, b)


# -- denoiser training -----------------------------------------------------------


def drift_dataset(n_traj=40, t_steps=8, seed=0):
    """Linear-Gaussian toy data: s' = s + 0.5 + 0.2 xi, a ~ N(0.2, 0.3^2)."""
    rng = RngStream(seed)
    out = []
    for i in range(n_traj):
        r = rng.child(i)
        s = np.zeros((t_steps + 1, 1))
        s[0, 0] = 0.3 * r.child(0).normal(())
        deltas = 0.5 + 0.2 * r.child(1).normal((t_steps,))
        s[1:, 0] = s[0, 0] + np.cumsum(deltas)
        a = 0.2 + 0.3 * r.child(2).normal((t_steps, 1))
        out.append(Trajectory(s, a, np.zeros(t_steps), np.zeros(t_steps, bool)))
    return out


def test_train_overfits_single_window():
    w = 4
    traj = drift_dataset(n_traj=1, t_steps=w)[0]
    batch = slice_windows([traj], w=w, stride=1)
    assert batch.n == 1
    norm = NormStats.identity(1, 1)
    sched = make_schedule("cosine", 8)
    model = DenoiserModel.create(w, 1, 1, sched, norm, RngStream(2),
                                 hidden=(64, 64), embed_dim=8)
    losses = train_denoiser(batch, model, RngStream(3), steps=3000,
                            batch_size=64, lr=3e-3)
    initial = losses[:20].mean()
    final = losses[-100:].mean()
    assert final < 0.05 * initial


def test_zero_capacity_net_loss_is_window_width():
    w = 3
    trajs = drift_dataset(n_traj=4, t_steps=6)
    batch = slice_windows(trajs, w=w, stride=1)
    norm = NormStats.fit(trajs)
    sched = make_schedule("cosine", 8)
    model = DenoiserModel.create(w, 1, 1, sched, norm, RngStream(2), hidden=(16,))
    model.net.set_flat(np.zeros(model.net.n_params()))
    losses = train_denoiser(batch, model, RngStream(3), steps=400,
                            batch_size=128, lr=0.0)
    width = window_width(w, 1, 1)
    assert abs(losses.mean() - width) < 0.35


def test_training_deterministic():
    trajs = drift_dataset(n_traj=4, t_steps=6)
    batch = slice_windows(trajs, w=3, stride=1)
    norm = NormStats.fit(trajs)
    sched = make_schedule("cosine", 8)
    m1 = DenoiserModel.create(3, 1, 1, sched, norm, RngStream(2), hidden=(16,))
    m2 = DenoiserModel.create(3, 1, 1, sched, norm, RngStream(2), hidden=(16,))
    l1 = train_denoiser(batch, m1, RngStream(3), steps=60, batch_size=32)
    l2 = train_denoiser(batch, m2, RngStream(3), steps=60, batch_size=32)
    assert np.array_equal(l1, l2)
    assert np.array_equal(m1.net.get_flat(), m2.net.get_flat())


def test_training_divergence_aborts():
    trajs = drift_dataset(n_traj=2, t_steps=4)
    batch = slice_windows(trajs, w=2, stride=1)
    sched = make_schedule("cosine", 8)
    model = DenoiserModel.create(2, 1, 1, sched, NormStats.fit(trajs),
                                 RngStream(2), hidden=(16,))
    model.net.set_flat(np.full(model.net.n_params(), 1e200))
    with pytest.raises(NumericalAbortError):
        train_denoiser(batch, model, RngStream(3), steps=10, batch_size=8)


# -- guided sampling -------------------------------------------------------------


@pytest.fixture(scope="module")
def quick_model():
    """Barely-trained model for mechanical (non-statistical) sampling tests."""
    trajs = drift_dataset(n_traj=20, t_steps=8)
    batch = slice_windows(trajs, w=4, stride=1)
    norm = NormStats.fit(trajs)
    sched = make_schedule("cosine", 32)
    model = DenoiserModel.create(4, 1, 1, sched, norm, RngStream(7),
                                 hidden=(32,))
    train_denoiser(batch, model, RngStream(8), steps=200, batch_size=64,
                   lr=1e-3)
    return model, trajs, batch


@pytest.fixture(scope="module")
def converged_model():
    """Well-trained model for the distribution-matching sanity check."""
    trajs = drift_dataset(n_traj=60, t_steps=8)
    batch = slice_windows(trajs, w=4, stride=1)
    norm = NormStats.fit(trajs)
    sched = make_schedule("cosine", 16)
    model = DenoiserModel.create(4, 1, 1, sched, norm, RngStream(7))
    train_denoiser(batch, model, RngStream(8), steps=6000, batch_size=256,
                   lr=3e-3)
    return model, trajs, batch


def test_zero_guidance_bitwise_equals_unguided(quick_model):
    model, trajs, batch = quick_model
    cond = batch.cond_states[:5]
    none_spec = GuidanceSpec(0.0, 0.0, False)
    zero_spec = GuidanceSpec(0.0, 0.0, True,
                             target_score=lambda s, a: (s * 0, a * 0),
                             behavior_score=lambda s, a: (s * 0, a * 0))
    a = guided_sample(model, cond, none_spec, RngStream(9))
    b = guided_sample(model, cond, zero_spec, RngStream(9))
    assert np.array_equal(a, b)


def test_conditioning_fidelity_exact(quick_model):
    model, trajs, batch = quick_model
    cond = np.array([[0.37], [-1.2], [5.5]])
    out = guided_sample(model, cond, GuidanceSpec(0.0, 0.0, False), RngStream(4))
    assert np.array_equal(out[:, :1], cond)


def test_guided_sample_deterministic(quick_model):
    model, trajs, batch = quick_model
    cond = batch.cond_states[:3]
    spec = GuidanceSpec(0.0, 0.0, False)
    assert np.array_equal(guided_sample(model, cond, spec, RngStream(12)),
                          guided_sample(model, cond, spec, RngStream(12)))


def test_trained_model_matches_data_delta_stats(converged_model):
    model, trajs, batch = converged_model
    data_deltas = np.concatenate([np.diff(t.states[:, 0]) for t in trajs])
    cond = batch.cond_states[RngStream(13).integers(0, batch.n, size=400)]
    out = guided_sample(model, cond, GuidanceSpec(0.0, 0.0, False), RngStream(14),
                        clip_denoised=True)
    from diffope.data import unflatten_window
    st, _ = unflatten_window(out, model.w, 1, 1)
    gen_deltas = np.diff(st[:, :, 0], axis=1).ravel()
    assert abs(gen_deltas.mean() - data_deltas.mean()) < 0.1 * abs(data_deltas.mean())
    assert abs(gen_deltas.std() - data_deltas.std()) < 0.25 * data_deltas.std()


def test_sampling_nonfinite_aborts(quick_model):
    model, trajs, batch = quick_model
    poisoned = DenoiserModel(model.net.copy(), model.schedule, model.w, 1, 1,
                             model.norm, model.embed_dim, model.embed_period,
                             codec=model.codec)
    poisoned.net.set_flat(np.full(model.net.n_params(), np.inf))
    with pytest.raises(NumericalAbortError):
        guided_sample(poisoned, batch.cond_states[:2],
                      GuidanceSpec(0.0, 0.0, False), RngStream(1))
