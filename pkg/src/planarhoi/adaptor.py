"""Stage-3 interaction adaptor: a recurrent joint-space residual policy added
on top of the frozen two-stage stack for object interaction.

The adaptor sees proprioception, the keypoint window, the object reference
window and the current object state (all base-frame), and outputs a small
bounded correction to the tracker's action. Exploration noise is learnable
per-dimension, clamped to [0.01, 2.0]. Stages 1-2 stay frozen and checksummed.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .envs import TrackingWorld, WorldConfig
from .bfm import load_bfm
from .nets import (AdamOptimizer, GruCell, GruSpec, Mlp, MlpSpec,
                   load_checkpoint, params_checksum, save_checkpoint,
                   seed_everything)
from .ppo import PpoConfig, RolloutBuffer, gaussian_logprob, ppo_update
from .sim import ACTION_DIM, PROPRIO_DIM
from .stack import (ADAPTOR_BOUNDS, ADAPTOR_OBS_DIM, ControlStack,
                    KEYPOINT_WINDOW_DIM, OBJECT_STATE_DIM, OBJECT_WINDOW_DIM,
                    joint_residual)
from .tracker import (KEYPOINT_NOISE_STD, frozen_checksums, freeze,
                      load_tracker)

STD_MIN, STD_MAX = 0.01, 2.0
STD_INIT = 1.0

ADAPTOR_CRITIC_DIM = PROPRIO_DIM + 6 + KEYPOINT_WINDOW_DIM \
    + OBJECT_WINDOW_DIM + OBJECT_STATE_DIM


@dataclass
class AdaptorSizes:
    gru_hidden: int = 256
    mlp_widths: tuple = (256, 256, 128)
    critic_widths: tuple = (512, 512, 512, 512, 256)

    @staticmethod
    def smoke() -> "AdaptorSizes":
        return AdaptorSizes(gru_hidden=64, mlp_widths=(128, 64),
                            critic_widths=(128, 128))

    def to_dict(self) -> dict:
        return {"gru_hidden": self.gru_hidden,
                "mlp_widths": list(self.mlp_widths),
                "critic_widths": list(self.critic_widths)}

    @staticmethod
    def from_dict(d: dict) -> "AdaptorSizes":
        return AdaptorSizes(d["gru_hidden"], tuple(d["mlp_widths"]),
                            tuple(d["critic_widths"]))


class AdaptorPolicy(nn.Module):
    """Residual GRU policy with learnable per-dimension exploration noise."""

    def __init__(self, sizes: AdaptorSizes | None = None,
                 gen: torch.Generator | None = None):
        super().__init__()
        self.sizes = sizes or AdaptorSizes()
        s = self.sizes
        self.gru = GruCell(GruSpec(ADAPTOR_OBS_DIM, s.gru_hidden), gen)
        self.mlp = Mlp(MlpSpec(s.gru_hidden, s.mlp_widths, ACTION_DIM), gen)
        self.log_std = nn.Parameter(
            torch.full((ACTION_DIM,), float(np.log(STD_INIT))))
        self.critic = Mlp(MlpSpec(ADAPTOR_CRITIC_DIM, s.critic_widths, 1), gen)

    def clamp_std(self) -> None:
        with torch.no_grad():
            self.log_std.clamp_(float(np.log(STD_MIN)), float(np.log(STD_MAX)))

    def std(self) -> torch.Tensor:
        return torch.exp(self.log_std)

    def value(self, critic_obs) -> torch.Tensor:
        return self.critic(torch.as_tensor(critic_obs)).squeeze(-1)

    def modules_dict(self) -> dict:
        return {"gru": self.gru, "mlp": self.mlp, "critic": self.critic,
                "std": _StdWrapper(self)}


class _StdWrapper(nn.Module):
    """Exposes the log-std parameter through the module checkpoint interface."""

    def __init__(self, owner: AdaptorPolicy):
        super().__init__()
        self.log_std = owner.log_std


def adapt_action(tracker_action: np.ndarray, mean_pre) -> np.ndarray:
    """a_int = a' + bounded residual; exact additive identity at zero."""
    delta = joint_residual(mean_pre).numpy()
    return np.asarray(tracker_action) + delta


def save_adaptor(path, policy: AdaptorPolicy, frozen: dict,
                 extra: dict | None = None) -> None:
    manifest = {"kind": "adaptor", "sizes": policy.sizes.to_dict(),
                "frozen_checksums": frozen}
    manifest.update(extra or {})
    save_checkpoint(path, policy.modules_dict(), manifest)


def load_adaptor(path) -> tuple[AdaptorPolicy, dict]:
    with open(str(path) + ".json") as fh:
        manifest = json.load(fh)
    policy = AdaptorPolicy(AdaptorSizes.from_dict(manifest["sizes"]))
    load_checkpoint(path, policy.modules_dict())
    return policy, manifest


@dataclass
class AdaptorTrainConfig:
    sizes: AdaptorSizes = field(default_factory=AdaptorSizes.smoke)
    ppo: PpoConfig = field(default_factory=lambda: PpoConfig(
        value_coef=3.0, entropy_coef=1e-3, epochs=5, minibatches=10,
        target_kl=0.02, lr_init=1e-4, lr_min=1e-5, lr_max=3e-4,
        learnable_std=True, std_bounds=(STD_MIN, STD_MAX)))
    n_envs: int = 32
    rollout_steps: int = 25
    iterations: int = 100
    episode_seconds: float = 4.0
    keypoint_noise_std: float = KEYPOINT_NOISE_STD


class _AdaptorAgent:
    def __init__(self, policy: AdaptorPolicy):
        self.policy = policy

    def grad_groups(self) -> dict:
        return {"actor": list(self.policy.gru.parameters())
                + list(self.policy.mlp.parameters()) + [self.policy.log_std],
                "critic": list(self.policy.critic.parameters())}

    def evaluate(self, buf: RolloutBuffer, ids: np.ndarray) -> dict:
        obs = torch.as_tensor(buf.obs["adaptor"][:, ids])
        critic_obs = torch.as_tensor(buf.obs["critic"][:, ids])
        dones = torch.as_tensor(buf.dones[:, ids], dtype=torch.float64)
        actions = torch.as_tensor(buf.actions[:, ids])
        h = torch.as_tensor(buf.initial_hidden["h_adaptor"][ids])
        log_std = self.policy.log_std
        logps = []
        for t in range(buf.t_len):
            if t > 0:
                h = h * (1.0 - dones[t - 1]).unsqueeze(-1)
            h = self.policy.gru(obs[t], h)
            mean = self.policy.mlp(h)
            logps.append(gaussian_logprob(mean, log_std, actions[t]))
        logprobs = torch.stack(logps)
        values = self.policy.critic(critic_obs).squeeze(-1)
        entropy = (log_std + 0.5 * (1.0 + np.log(2 * np.pi))) \
            .sum().expand(logprobs.shape)
        return {"logprobs": logprobs, "values": values, "entropy": entropy,
                "aux_stats": {"std_mean": float(torch.exp(log_std).mean().item())}}


def adaptor_critic_obs(world: TrackingWorld) -> np.ndarray:
    return np.concatenate([
        world.proprio(), world.critic_state(),
        world.keypoint_window_base(noisy=False),
        world.object_window_base(), world.object_state_base()], axis=1)


@torch.no_grad()
def collect_adaptor_rollout(world: TrackingWorld, stack: ControlStack,
                            policy: AdaptorPolicy, t_len: int,
                            rng: np.random.Generator) -> tuple:
    n = world.n
    buf = RolloutBuffer(t_len, n)
    buf.store_hidden("h_adaptor", stack.h_adaptor.numpy())
    ep_returns, ep_terms = [], []
    reward_acc = np.zeros(n)
    std = policy.std()

    for _ in range(t_len):
        cobs = adaptor_critic_obs(world)
        noise = torch.as_tensor(rng.standard_normal((n, ACTION_DIM))) * std
        res = stack.step_10hz(world, adaptor_noise=noise)
        u = res.adaptor_mean + noise.numpy()
        logp = gaussian_logprob(torch.as_tensor(res.adaptor_mean),
                                policy.log_std, torch.as_tensor(u)).numpy()
        value = policy.value(cobs).numpy()
        buf.add({"adaptor": res.adaptor_obs, "critic": cobs},
                u, logp, value, res.reward, res.done)
        reward_acc += res.reward
        done_ids = np.nonzero(res.done)[0]
        if len(done_ids):
            for i in done_ids:
                ep_returns.append(reward_acc[i])
                ep_terms.append(bool(res.terminated[i]))
            reward_acc[done_ids] = 0.0
            world.reset(done_ids)
            stack.reset_ids(done_ids)

    last_value = policy.value(adaptor_critic_obs(world)).numpy()
    stats = {"episode_return": float(np.mean(ep_returns)) if ep_returns else float("nan"),
             "termination_rate": float(np.mean(ep_terms)) if ep_terms else float("nan"),
             "mean_step_reward": float(buf.rewards.mean())}
    return buf, last_value, stats


def train_adaptor(bfm_path, tracker_path, clips: list,
                  config: AdaptorTrainConfig, seed: int, out_dir,
                  world_config: WorldConfig | None = None,
                  stop_hook=None, init_path=None) -> list[dict]:
    """Stage-3 optimization over the frozen two-stage stack. Requires clips
    with object tracks; raises RuntimeError when frozen parameters change."""
    for clip in clips:
        if clip.object_track is None:
            raise ValueError("adaptor training requires clips with object tracks")
    os.makedirs(out_dir, exist_ok=True)
    rng = seed_everything(seed)
    gen = torch.Generator().manual_seed(seed)
    bfm, _ = load_bfm(bfm_path)
    trk, _ = load_tracker(tracker_path)
    for mod in (*bfm.modules_dict().values(), *trk.modules_dict().values()):
        freeze(mod)
    frozen = {"bfm": frozen_checksums(bfm),
              "tracker": {k: params_checksum(m)
                          for k, m in trk.modules_dict().items()}}

    policy = AdaptorPolicy(config.sizes, gen)
    if init_path is not None:
        load_checkpoint(init_path, policy.modules_dict())
    agent = _AdaptorAgent(policy)
    optimizer = AdamOptimizer(list(policy.parameters()), lr=config.ppo.lr_init)

    wc = world_config or WorldConfig(stage=3, n_envs=config.n_envs,
                                     episode_seconds=config.episode_seconds,
                                     keypoint_noise_std=config.keypoint_noise_std)
    wc.stage = 3
    wc.n_envs = config.n_envs
    world = TrackingWorld(clips, wc, seed=seed)
    stack = ControlStack(bfm, tracker=trk, adaptor=policy,
                         n_envs=config.n_envs)

    rows = []
    csv_path = os.path.join(out_dir, "train_log.csv")
    fields = ["iteration", "mean_step_reward", "episode_return",
              "termination_rate", "policy_loss", "value_loss", "entropy",
              "kl", "clip_frac", "lr", "std_mean"]
    with open(csv_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for it in range(config.iterations):
            buf, last_value, roll_stats = collect_adaptor_rollout(
                world, stack, policy, config.rollout_steps, rng)
            buf.finish(last_value, config.ppo.gamma, config.ppo.lam)
            stats = ppo_update(buf, agent, optimizer, config.ppo, rng)
            policy.clamp_std()
            now = {"bfm": frozen_checksums(bfm),
                   "tracker": {k: params_checksum(m)
                               for k, m in trk.modules_dict().items()}}
            if now != frozen:
                raise RuntimeError("frozen stage-1/2 parameters changed")
            row = {"iteration": it,
                   "mean_step_reward": roll_stats["mean_step_reward"],
                   "episode_return": roll_stats["episode_return"],
                   "termination_rate": roll_stats["termination_rate"],
                   "policy_loss": stats.policy_loss,
                   "value_loss": stats.value_loss, "entropy": stats.entropy,
                   "kl": stats.kl, "clip_frac": stats.clip_frac,
                   "lr": stats.lr,
                   "std_mean": stats.aux.get("std_mean", float("nan"))}
            rows.append(row)
            writer.writerow(row)
            fh.flush()
            if stop_hook is not None and stop_hook(policy, it, row):
                break
    save_adaptor(os.path.join(out_dir, "adaptor"), policy, frozen,
                 extra={"seed": seed, "iterations": len(rows),
                        "bfm_checkpoint": str(bfm_path),
                        "tracker_checkpoint": str(tracker_path)})
    return rows
