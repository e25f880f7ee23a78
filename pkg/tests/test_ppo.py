"""PPO machinery: GAE against a brute-force discounted-sum oracle, learning
rate adaptation, Gaussian log-probabilities, and the update loop on a toy
agent."""

import numpy as np
import pytest
import torch

from planarhoi.nets import AdamOptimizer
from planarhoi.ppo import (PpoConfig, RolloutBuffer, adapt_lr, compute_gae,
                           gaussian_entropy, gaussian_logprob, ppo_update)


def brute_force_gae(rewards, values, dones, gamma, lam):
    """O(T^2) definition: A_t = sum_l (gamma*lam)^l * delta_{t+l}, the sum
    truncated at the first done after t."""
    t_len, n = rewards.shape
    adv = np.zeros((t_len, n))
    for i in range(n):
        delta = np.array([
            rewards[t, i]
            + gamma * values[t + 1, i] * (1.0 - dones[t, i])
            - values[t, i]
            for t in range(t_len)])
        for t in range(t_len):
            acc = 0.0
            coef = 1.0
            for l_idx in range(t, t_len):
                acc += coef * delta[l_idx]
                if dones[l_idx, i]:
                    break
                coef *= gamma * lam
            adv[t, i] = acc
    return adv


def test_gae_matches_brute_force_exactly():
    gen = np.random.default_rng(0)
    for _ in range(200):
        t_len = int(gen.integers(1, 11))
        n = int(gen.integers(1, 4))
        rewards = gen.normal(size=(t_len, n))
        values = gen.normal(size=(t_len + 1, n))
        dones = gen.uniform(size=(t_len, n)) < 0.25
        gamma = float(gen.uniform(0.5, 1.0))
        lam = float(gen.uniform(0.5, 1.0))
        adv, ret = compute_gae(rewards, values, dones.astype(float),
                               gamma, lam, normalize=False)
        expected = brute_force_gae(rewards, values, dones, gamma, lam)
        np.testing.assert_allclose(adv, expected, rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(ret, adv + values[:-1], atol=1e-12)


def test_gae_shape_validation():
    with pytest.raises(ValueError):
        compute_gae(np.zeros((5, 2)), np.zeros((5, 2)), np.zeros((5, 2)),
                    0.99, 0.95)


def test_gae_normalization():
    gen = np.random.default_rng(1)
    adv, _ = compute_gae(gen.normal(size=(20, 8)), gen.normal(size=(21, 8)),
                         np.zeros((20, 8)), 0.99, 0.95, normalize=True)
    assert abs(adv.mean()) < 1e-10
    assert abs(adv.std() - 1.0) < 1e-6


def test_adapt_lr_rules():
    assert adapt_lr(1e-4, kl=0.1, target_kl=0.02, lr_min=1e-5, lr_max=1e-3) \
        == pytest.approx(1e-4 / 1.5)
    assert adapt_lr(1e-4, kl=0.005, target_kl=0.02, lr_min=1e-5, lr_max=1e-3) \
        == pytest.approx(1.5e-4)
    assert adapt_lr(1e-4, kl=0.02, target_kl=0.02, lr_min=1e-5, lr_max=1e-3) \
        == 1e-4
    # clamped at both ends
    assert adapt_lr(1.2e-5, kl=1.0, target_kl=0.02, lr_min=1e-5, lr_max=1e-3) \
        == 1e-5
    assert adapt_lr(9e-4, kl=0.0, target_kl=0.02, lr_min=1e-5, lr_max=1e-3) \
        == 1e-3


def test_gaussian_logprob_matches_closed_form():
    gen = np.random.default_rng(2)
    mean = torch.as_tensor(gen.normal(size=(6, 3)))
    log_std = torch.as_tensor(np.log(gen.uniform(0.1, 2.0, 3)))
    x = torch.as_tensor(gen.normal(size=(6, 3)))
    got = gaussian_logprob(mean, log_std, x).numpy()
    std = np.exp(log_std.numpy())
    want = np.sum(
        -0.5 * ((x.numpy() - mean.numpy()) / std) ** 2
        - np.log(std) - 0.5 * np.log(2 * np.pi), axis=-1)
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_gaussian_entropy_matches_closed_form():
    log_std = torch.as_tensor(np.log([0.5, 1.0, 2.0]))
    like = torch.zeros(4, 3)
    got = gaussian_entropy(log_std, like).numpy()
    want = np.sum(np.log([0.5, 1.0, 2.0]) + 0.5 * (1 + np.log(2 * np.pi)))
    np.testing.assert_allclose(got, np.full(4, want), atol=1e-12)


def test_ppo_config_validation():
    with pytest.raises(ValueError):
        PpoConfig(gamma=0.0)
    with pytest.raises(ValueError):
        PpoConfig(clip=-0.1)
    with pytest.raises(ValueError):
        PpoConfig(lr_min=1e-3, lr_max=1e-4)


def test_rollout_buffer_lifecycle():
    buf = RolloutBuffer(t_len=3, n_envs=2)
    with pytest.raises(RuntimeError):
        buf.finish(np.zeros(2), 0.99, 0.95)
    for t in range(3):
        buf.add({"x": np.full((2, 4), t)}, np.zeros((2, 1)), np.zeros(2),
                np.zeros(2), np.ones(2), np.zeros(2, dtype=bool))
    with pytest.raises(IndexError):
        buf.add({"x": np.zeros((2, 4))}, np.zeros((2, 1)), np.zeros(2),
                np.zeros(2), np.ones(2), np.zeros(2, dtype=bool))
    buf.finish(np.zeros(2), 0.99, 0.95)
    assert buf.obs["x"].shape == (3, 2, 4)
    assert buf.advantages.shape == (3, 2)


class _LinearAgent:
    """Minimal stateless Gaussian policy over stored observations."""

    def __init__(self):
        torch.manual_seed(0)
        self.w = torch.zeros(4, 1, requires_grad=True)
        self.v = torch.zeros(4, 1, requires_grad=True)
        self.log_std = torch.tensor([np.log(0.5)])

    def parameters(self):
        return [self.w, self.v]

    def act(self, x, rng):
        mean = torch.as_tensor(x) @ self.w
        noise = rng.normal(size=mean.shape)
        sample = mean.detach().numpy() + 0.5 * noise
        logp = gaussian_logprob(mean, self.log_std,
                                torch.as_tensor(sample)).detach().numpy()
        value = (torch.as_tensor(x) @ self.v)[:, 0].detach().numpy()
        return sample, logp, value

    def evaluate(self, buf, ids):
        x = torch.as_tensor(buf.obs["x"][:, ids])
        a = torch.as_tensor(buf.actions[:, ids])
        mean = x @ self.w
        logp = gaussian_logprob(mean, self.log_std, a)
        values = (x @ self.v)[..., 0]
        ent = gaussian_entropy(self.log_std, mean)
        return {"logprobs": logp, "values": values, "entropy": ent}


def test_ppo_update_improves_toy_objective():
    """Reward = first obs feature times action: positive weight is optimal."""
    gen = np.random.default_rng(3)
    agent = _LinearAgent()
    opt = AdamOptimizer(agent.parameters(), lr=5e-2)
    cfg = PpoConfig(epochs=4, minibatches=2, entropy_coef=0.0,
                    value_coef=0.5, target_kl=1e9, lr_min=5e-2, lr_max=5e-2)
    for _ in range(30):
        buf = RolloutBuffer(t_len=8, n_envs=16)
        for _t in range(8):
            x = gen.normal(size=(16, 4))
            a, logp, v = agent.act(x, gen)
            reward = x[:, 0] * a[:, 0]
            buf.add({"x": x}, a, logp, v, reward,
                    np.zeros(16, dtype=bool))
        buf.finish(np.zeros(16), cfg.gamma, cfg.lam)
        stats = ppo_update(buf, agent, opt, cfg, gen)
    assert agent.w[0, 0].item() > 0.3
    assert np.isfinite(stats.kl)
    assert 0.0 <= stats.clip_frac <= 1.0


def test_ppo_update_reports_lr_adaptation():
    gen = np.random.default_rng(4)
    agent = _LinearAgent()
    opt = AdamOptimizer(agent.parameters(), lr=1e-4)
    cfg = PpoConfig(epochs=1, minibatches=1, target_kl=1e-6,
                    lr_min=1e-6, lr_max=1e-3)
    buf = RolloutBuffer(t_len=4, n_envs=4)
    for _t in range(4):
        x = gen.normal(size=(4, 4))
        a, logp, v = agent.act(x, gen)
        buf.add({"x": x}, a, logp, v, gen.normal(size=4),
                np.zeros(4, dtype=bool))
    buf.finish(np.zeros(4), cfg.gamma, cfg.lam)
    stats = ppo_update(buf, agent, opt, cfg, gen)
    assert stats.lr == opt.lr
    assert cfg.lr_min <= stats.lr <= cfg.lr_max
