"""Shared PPO machinery: GAE, rollout storage, clipped surrogate updates with
recurrent sequence replay, approximate-KL tracking and adaptive learning rate.

The engine is agnostic to the policy being trained; each training stage
supplies an agent object that replays stored observation sequences from the
hidden states snapshotted at rollout start.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch


@dataclass
class PpoConfig:
    gamma: float = 0.99
    lam: float = 0.95
    clip: float = 0.2
    value_coef: float = 2.0
    entropy_coef: float = 0.01
    epochs: int = 5
    minibatches: int = 10
    target_kl: float = 0.02
    lr_init: float = 1e-4
    lr_min: float = 1e-5
    lr_max: float = 1e-4
    action_std: float = 0.005          # fixed std stages; ignored when learnable
    action_std_final: float | None = None   # geometric anneal target over a run
    learnable_std: bool = False
    std_bounds: tuple = (0.01, 2.0)
    max_grad_norm: float = 1.0

    def __post_init__(self):
        if not (0 < self.gamma <= 1 and 0 < self.lam <= 1):
            raise ValueError("gamma and lam must lie in (0, 1]")
        if self.clip <= 0:
            raise ValueError("clip must be positive")
        if not (self.lr_min <= self.lr_max):
            raise ValueError("lr bounds inverted")
        if self.action_std_final is not None and self.action_std_final <= 0:
            raise ValueError("action_std_final must be positive")

    def std_at(self, iteration: int, iterations: int) -> float:
        """Exploration std for a given iteration: constant by default, or a
        geometric interpolation toward `action_std_final` over the run."""
        if self.action_std_final is None or iterations <= 1:
            return self.action_std
        f = min(max(iteration / (iterations - 1), 0.0), 1.0)
        return float(self.action_std ** (1.0 - f) * self.action_std_final ** f)


def compute_gae(rewards: np.ndarray, values: np.ndarray, dones: np.ndarray,
                gamma: float, lam: float, normalize: bool = True):
    """Backward GAE recursion.

    rewards, dones: (T, N); values: (T+1, N) including the bootstrap value.
    Returns (advantages, returns), each (T, N). `dones` marks transitions after
    which the next state belongs to a new episode.
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    dones = np.asarray(dones, dtype=float)
    t_len, n = rewards.shape
    if values.shape != (t_len + 1, n) or dones.shape != (t_len, n):
        raise ValueError("mismatched GAE input lengths")
    adv = np.zeros((t_len, n))
    gae = np.zeros(n)
    for t in range(t_len - 1, -1, -1):
        not_done = 1.0 - dones[t]
        delta = rewards[t] + gamma * values[t + 1] * not_done - values[t]
        gae = delta + gamma * lam * not_done * gae
        adv[t] = gae
    returns = adv + values[:-1]
    if normalize:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    return adv, returns


def adapt_lr(lr: float, kl: float, target_kl: float, lr_min: float, lr_max: float) -> float:
    """Halve-ish on large KL, grow on small KL, always inside the bounds."""
    if kl > 2.0 * target_kl:
        lr = lr / 1.5
    elif kl < target_kl / 2.0:
        lr = lr * 1.5
    return float(np.clip(lr, lr_min, lr_max))


def gaussian_logprob(mean: torch.Tensor, log_std: torch.Tensor,
                     sample: torch.Tensor) -> torch.Tensor:
    var = torch.exp(2.0 * log_std)
    return (-0.5 * ((sample - mean) ** 2 / var)
            - log_std - 0.5 * np.log(2.0 * np.pi)).sum(dim=-1)


def gaussian_entropy(log_std: torch.Tensor, dim_like: torch.Tensor) -> torch.Tensor:
    ent = (log_std + 0.5 * (1.0 + np.log(2.0 * np.pi)))
    return ent.expand(dim_like.shape[:-1] + ent.shape[-1:]).sum(dim=-1) \
        if ent.dim() < dim_like.dim() else ent.sum(dim=-1)


class RolloutBuffer:
    """Fixed-horizon storage over N parallel envs with per-env hidden snapshots."""

    def __init__(self, t_len: int, n_envs: int):
        self.t_len = t_len
        self.n_envs = n_envs
        self.obs: dict[str, np.ndarray] = {}
        self.actions = None            # (T, N, A) pre-squash samples
        self.logprobs = np.zeros((t_len, n_envs))
        self.values = np.zeros((t_len + 1, n_envs))
        self.rewards = np.zeros((t_len, n_envs))
        self.dones = np.zeros((t_len, n_envs), dtype=bool)
        self.initial_hidden: dict[str, np.ndarray] = {}
        self.step = 0

    def store_hidden(self, name: str, h: np.ndarray) -> None:
        self.initial_hidden[name] = np.array(h)

    def add(self, obs: dict[str, np.ndarray], action: np.ndarray,
            logprob: np.ndarray, value: np.ndarray, reward: np.ndarray,
            done: np.ndarray) -> None:
        t = self.step
        if t >= self.t_len:
            raise IndexError("rollout buffer full")
        for k, v in obs.items():
            if k not in self.obs:
                self.obs[k] = np.zeros((self.t_len,) + v.shape)
            self.obs[k][t] = v
        if self.actions is None:
            self.actions = np.zeros((self.t_len,) + action.shape)
        self.actions[t] = action
        self.logprobs[t] = logprob
        self.values[t] = value
        self.rewards[t] = reward
        self.dones[t] = done
        self.step += 1

    def finish(self, last_value: np.ndarray, gamma: float, lam: float):
        if self.step != self.t_len:
            raise RuntimeError("rollout incomplete")
        self.values[-1] = last_value
        self.advantages, self.returns = compute_gae(
            self.rewards, self.values, self.dones, gamma, lam)


@dataclass
class UpdateStats:
    kl: float
    clip_frac: float
    policy_loss: float
    value_loss: float
    entropy: float
    aux: dict
    lr: float
    skipped: bool = False


def ppo_update(buffer: RolloutBuffer, agent, optimizer, config: PpoConfig,
               rng: np.random.Generator) -> UpdateStats:
    """Clipped-surrogate update with recurrent minibatch replay.

    `agent.evaluate(buffer, env_ids)` must return a dict with keys
    logprobs (T, M) tensor, values (T, M) tensor, entropy (T, M) tensor and
    optionally aux_loss (scalar tensor) + aux_stats (floats).
    """
    adv = torch.as_tensor(buffer.advantages)
    ret = torch.as_tensor(buffer.returns)
    old_logp = torch.as_tensor(buffer.logprobs)

    n = buffer.n_envs
    mb_count = max(1, min(config.minibatches, n))
    kls, clip_fracs, pls, vls, ents = [], [], [], [], []
    aux_stats_acc: dict[str, list] = {}
    skipped = False

    stop = False
    for _ in range(config.epochs):
        if stop:
            break
        perm = rng.permutation(n)
        for ids in np.array_split(perm, mb_count):
            out = agent.evaluate(buffer, ids)
            logp, values, entropy = out["logprobs"], out["values"], out["entropy"]
            mb_adv = adv[:, ids]
            mb_ret = ret[:, ids]
            mb_old = old_logp[:, ids]

            ratio = torch.exp(logp - mb_old)
            surr1 = ratio * mb_adv
            surr2 = torch.clamp(ratio, 1.0 - config.clip, 1.0 + config.clip) * mb_adv
            policy_loss = -torch.min(surr1, surr2).mean()
            value_loss = 0.5 * (values - mb_ret).pow(2).mean()
            ent = entropy.mean()
            loss = (policy_loss + config.value_coef * value_loss
                    - config.entropy_coef * ent)
            aux = out.get("aux_loss")
            if aux is not None:
                loss = loss + aux
            if not torch.isfinite(loss):
                skipped = True
                continue

            optimizer.zero_grad()
            loss.backward()
            groups = getattr(agent, "grad_groups", None)
            if groups is not None:
                # clip actor and critic separately so a large value loss
                # cannot starve the policy gradient under a shared norm
                for params in groups().values():
                    torch.nn.utils.clip_grad_norm_(params, config.max_grad_norm)
            else:
                torch.nn.utils.clip_grad_norm_(optimizer.params,
                                               config.max_grad_norm)
            optimizer.step()

            with torch.no_grad():
                kl = (mb_old - logp).mean().item()
                clip_frac = ((ratio - 1.0).abs() > config.clip).double().mean().item()
            kls.append(kl)
            clip_fracs.append(clip_frac)
            pls.append(policy_loss.item())
            vls.append(value_loss.item())
            ents.append(ent.item())
            for k, v in out.get("aux_stats", {}).items():
                aux_stats_acc.setdefault(k, []).append(v)
        if kls and abs(kls[-1]) > 1.5 * config.target_kl:
            stop = True     # early epoch stop on KL overshoot

    mean_kl = float(np.mean(kls)) if kls else 0.0
    new_lr = adapt_lr(optimizer.lr, abs(mean_kl), config.target_kl,
                      config.lr_min, config.lr_max)
    optimizer.lr = new_lr
    return UpdateStats(
        kl=mean_kl,
        clip_frac=float(np.mean(clip_fracs)) if clip_fracs else 0.0,
        policy_loss=float(np.mean(pls)) if pls else 0.0,
        value_loss=float(np.mean(vls)) if vls else 0.0,
        entropy=float(np.mean(ents)) if ents else 0.0,
        aux={k: float(np.mean(v)) for k, v in aux_stats_acc.items()},
        lr=new_lr,
        skipped=skipped,
    )
