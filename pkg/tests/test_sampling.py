import math
from types import SimpleNamespace

import numpy as np
import pytest

from hybvit.autodiff import ContractError
from hybvit.diffusion import make_schedule, mu_from_eps
from hybvit.sampling import SampleRequest, p_sample_step, sample
from hybvit.vit import ViT

from oracles import ZeroEps, randomize, tiny_config

DATA_MEAN, DATA_STD = 0.3, 0.2


class GaussianOptimal:
    """Exact E[eps | x_t] for one-pixel data x_0 ~ N(DATA_MEAN, DATA_STD^2)."""

    config = SimpleNamespace(image_size=1, channels=1)

    def __init__(self, schedule):
        self.s = schedule

    def predict_eps(self, xt, t):
        ab = self.s.alpha_bar[t].reshape(-1, 1, 1, 1)
        v = ab * DATA_STD**2 + 1 - ab
        return np.sqrt(1 - ab) * (xt - np.sqrt(ab) * DATA_MEAN) / v


def propagate_moments(s):
    """Mean and variance of the reverse chain under GaussianOptimal, step by step in closed form."""
    mean, var = 0.0, 1.0
    for t in range(s.T, 0, -1):
        ab = s.alpha_bar[t]
        k = s.beta[t] / (ab * DATA_STD**2 + 1 - ab)
        gain = (1 - k) / math.sqrt(s.alpha[t])
        mean = gain * mean + k * math.sqrt(ab) * DATA_MEAN / math.sqrt(s.alpha[t])
        var = gain * gain * var + (s.beta_tilde[t] if t > 1 else 0.0)
    return mean, var


def test_t1_step_is_the_mean():
    s = make_schedule("cosine", 50)
    model = randomize(ViT(tiny_config(), dtype=np.float64), seed=0)
    x = np.random.default_rng(0).standard_normal((3, 4, 4, 1))
    out = p_sample_step(model, s, x, 1, rng=np.random.default_rng(1))
    ref = mu_from_eps(s, x, np.ones(3, int), model.predict_eps(x, np.ones(3, int)))
    np.testing.assert_array_equal(out, ref)


def test_zero_eps_mean_reduction():
    s = make_schedule("linear", 30)
    x = np.random.default_rng(2).standard_normal((2, 3))
    np.testing.assert_allclose(p_sample_step(ZeroEps(), s, x, 1), x / math.sqrt(s.alpha[1]))
    z = np.random.default_rng(3).standard_normal((2, 3))
    out = p_sample_step(ZeroEps(), s, x, 7, noise=z)
    np.testing.assert_allclose(out, x / math.sqrt(s.alpha[7]) + math.sqrt(s.beta_tilde[7]) * z)


def test_step_contracts():
    s = make_schedule("cosine", 10)
    with pytest.raises(ContractError):
        p_sample_step(ZeroEps(), s, np.zeros((1, 2)), 11, rng=np.random.default_rng(0))
    with pytest.raises(ContractError):
        p_sample_step(ZeroEps(), s, np.zeros((1, 2)), 5)
    with pytest.raises(ContractError):
        SampleRequest(count=0)


def test_gaussian_data_recovered_by_chains():
    s = make_schedule("cosine", 1000)
    x = sample(GaussianOptimal(s), s, SampleRequest(count=10_000, seed=1)).ravel()
    n = len(x)
    m_exact, v_exact = propagate_moments(s)
    for target_m, target_v in [(DATA_MEAN, DATA_STD**2), (m_exact, v_exact)]:
        assert abs(x.mean() - target_m) < 4 * math.sqrt(target_v / n)
        assert abs(x.var(ddof=1) - target_v) < 4 * target_v * math.sqrt(2 / (n - 1))


def test_sampling_deterministic_and_thread_independent():
    s = make_schedule("cosine", 20)
    model = randomize(ViT(tiny_config()), seed=3, scale=0.1)
    a = sample(model, s, SampleRequest(count=5, seed=9))
    b = sample(model, s, SampleRequest(count=5, seed=9))
    c = sample(model, s, SampleRequest(count=5, seed=9, threads=3))
    assert a.shape == (5, 4, 4, 1)
    assert a.tobytes() == b.tobytes() == c.tobytes()
    assert not np.array_equal(a, sample(model, s, SampleRequest(count=5, seed=10)))


def test_noise_only_above_t1_on_trajectory():
    s = make_schedule("cosine", 12)
    model = randomize(ViT(tiny_config(), dtype=np.float64), seed=4, scale=0.1)
    x_T = np.random.default_rng(0).standard_normal((3, 4, 4, 1))
    _, traj = sample(model, s, SampleRequest(count=3, seed=2, x_T=x_T, dump_every=1), return_trajectory=True)
    assert sorted(traj) == list(range(12))
    traj[12] = x_T
    for t in range(12, 0, -1):
        tt = np.full(3, t)
        mean = mu_from_eps(s, traj[t], tt, model.predict_eps(traj[t], tt))
        injected = traj[t - 1] - mean
        if t == 1:
            assert np.all(injected == 0)
        else:
            assert np.all(np.abs(injected) > 0)
            # the injected noise has the sampler's variance scale
            assert np.std(injected) < 6 * math.sqrt(s.beta_tilde[t])


def test_sampling_leaves_params_and_clamps():
    s = make_schedule("cosine", 10)
    model = randomize(ViT(tiny_config()), seed=5, scale=1.0)
    before = {k: v.data.copy() for k, v in model.params.items()}
    out = sample(model, s, SampleRequest(count=4, seed=0))
    for k, v in model.params.items():
        assert np.array_equal(v.data, before[k])
    assert out.min() >= -1.0 and out.max() <= 1.0


def test_clip_x0_flag_changes_chain_only_when_needed():
    s = make_schedule("cosine", 10)
    model = randomize(ViT(tiny_config()), seed=6, scale=1.0)
    plain = sample(model, s, SampleRequest(count=3, seed=0))
    clipped = sample(model, s, SampleRequest(count=3, seed=0, clip_x0=True))
    assert plain.shape == clipped.shape
    assert not np.array_equal(plain, clipped)
