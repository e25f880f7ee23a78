"""Stage-2 keypoint tracker: a recurrent latent-residual planner steering the
frozen backbone.

The planner consumes proprioceptive history, a 1 s keypoint window in the base
frame, the previous composed latent and the backbone's latent prior, and emits
a bounded additive correction to that prior. The backbone's predictor and
decoder stay frozen throughout; training moves only the planner and its critic.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .bfm import BfmPolicy, load_bfm
from .envs import TrackingWorld, WorldConfig
from .nets import (AdamOptimizer, GruCell, GruSpec, Mlp, MlpSpec,
                   load_checkpoint, params_checksum, save_checkpoint,
                   seed_everything)
from .ppo import PpoConfig, RolloutBuffer, gaussian_logprob, ppo_update
from .sim import PROPRIO_DIM
from .stack import (ControlStack, KEYPOINT_WINDOW_DIM, PLANNER_OBS_DIM,
                    latent_residual)

KEYPOINT_NOISE_STD = 0.05       # training-time reference corruption, m

# planner critic sees privileged absolute base state and noiseless keypoints
TRACKER_CRITIC_DIM = PROPRIO_DIM + 6 + KEYPOINT_WINDOW_DIM + 2 * 32


@dataclass
class TrackerSizes:
    latent_dim: int = 32
    gru_hidden: int = 256
    mlp_widths: tuple = (256, 256, 128)
    critic_widths: tuple = (512, 512, 512, 512, 256)

    @staticmethod
    def smoke() -> "TrackerSizes":
        return TrackerSizes(gru_hidden=64, mlp_widths=(128, 64),
                            critic_widths=(128, 128))

    def to_dict(self) -> dict:
        return {"latent_dim": self.latent_dim, "gru_hidden": self.gru_hidden,
                "mlp_widths": list(self.mlp_widths),
                "critic_widths": list(self.critic_widths)}

    @staticmethod
    def from_dict(d: dict) -> "TrackerSizes":
        return TrackerSizes(d["latent_dim"], d["gru_hidden"],
                            tuple(d["mlp_widths"]), tuple(d["critic_widths"]))


class TrackerPolicy(nn.Module):
    """Planner GRU + residual head, plus a feedforward critic."""

    def __init__(self, sizes: TrackerSizes | None = None,
                 gen: torch.Generator | None = None):
        super().__init__()
        self.sizes = sizes or TrackerSizes()
        s = self.sizes
        obs_dim = PROPRIO_DIM + KEYPOINT_WINDOW_DIM + 2 * s.latent_dim
        self.gru = GruCell(GruSpec(obs_dim, s.gru_hidden), gen)
        self.mlp = Mlp(MlpSpec(s.gru_hidden, s.mlp_widths, s.latent_dim), gen)
        self.critic = Mlp(MlpSpec(
            PROPRIO_DIM + 6 + KEYPOINT_WINDOW_DIM + 2 * s.latent_dim,
            s.critic_widths, 1), gen)

    def plan(self, obs, h) -> tuple[torch.Tensor, torch.Tensor]:
        """(pre-tanh residual mean, next hidden)."""
        h = self.gru(torch.as_tensor(obs), torch.as_tensor(h))
        return self.mlp(h), h

    def value(self, critic_obs) -> torch.Tensor:
        return self.critic(torch.as_tensor(critic_obs)).squeeze(-1)

    def modules_dict(self) -> dict:
        return {"gru": self.gru, "mlp": self.mlp, "critic": self.critic}


def plan_residual(policy: TrackerPolicy, obs, h):
    """Deterministic bounded residual for one planner step."""
    mean, h = policy.plan(obs, h)
    return latent_residual(mean), h


def compose_latent(z_hat, z_res) -> torch.Tensor:
    """z' = z_hat + z_res (exact elementwise sum; commutative, 0-identity)."""
    return torch.as_tensor(z_hat) + torch.as_tensor(z_res)


def save_tracker(path, policy: TrackerPolicy, bfm_checksums: dict,
                 extra: dict | None = None) -> None:
    manifest = {"kind": "tracker", "sizes": policy.sizes.to_dict(),
                "bfm_checksums": bfm_checksums}
    manifest.update(extra or {})
    save_checkpoint(path, policy.modules_dict(), manifest)


def load_tracker(path) -> tuple[TrackerPolicy, dict]:
    with open(str(path) + ".json") as fh:
        manifest = json.load(fh)
    policy = TrackerPolicy(TrackerSizes.from_dict(manifest["sizes"]))
    load_checkpoint(path, policy.modules_dict())
    return policy, manifest


def frozen_checksums(bfm: BfmPolicy) -> dict:
    return {name: params_checksum(mod)
            for name, mod in bfm.modules_dict().items()}


def freeze(module: nn.Module) -> None:
    for p in module.parameters():
        p.requires_grad_(False)


@dataclass
class TrackerTrainConfig:
    sizes: TrackerSizes = field(default_factory=TrackerSizes.smoke)
    ppo: PpoConfig = field(default_factory=lambda: PpoConfig(
        value_coef=2.0, entropy_coef=3e-4, epochs=10, minibatches=8,
        target_kl=0.05, lr_init=2e-4, lr_min=1e-5, lr_max=3e-4,
        action_std=0.02, learnable_std=False))
    n_envs: int = 32
    rollout_steps: int = 25          # 10 Hz planner steps per iteration
    iterations: int = 100
    episode_seconds: float = 4.0
    keypoint_noise_std: float = KEYPOINT_NOISE_STD


class _TrackerAgent:
    """PPO replay: re-run the planner GRU over stored observation sequences.
    The frozen backbone never has to be replayed because its outputs (prior and
    previous composed latent) are part of the stored observations."""

    def __init__(self, policy: TrackerPolicy, log_std: torch.Tensor):
        self.policy = policy
        self.log_std = log_std

    def grad_groups(self) -> dict:
        return {"actor": list(self.policy.gru.parameters())
                + list(self.policy.mlp.parameters()),
                "critic": list(self.policy.critic.parameters())}

    def evaluate(self, buf: RolloutBuffer, ids: np.ndarray) -> dict:
        obs = torch.as_tensor(buf.obs["planner"][:, ids])
        critic_obs = torch.as_tensor(buf.obs["critic"][:, ids])
        dones = torch.as_tensor(buf.dones[:, ids], dtype=torch.float64)
        actions = torch.as_tensor(buf.actions[:, ids])
        h = torch.as_tensor(buf.initial_hidden["h_tracker"][ids])
        logps = []
        for t in range(buf.t_len):
            if t > 0:
                h = h * (1.0 - dones[t - 1]).unsqueeze(-1)
            h = self.policy.gru(obs[t], h)
            mean = self.policy.mlp(h)
            logps.append(gaussian_logprob(mean, self.log_std, actions[t]))
        logprobs = torch.stack(logps)
        values = self.policy.critic(critic_obs).squeeze(-1)
        entropy = (self.log_std + 0.5 * (1.0 + np.log(2 * np.pi))) \
            .sum().expand(logprobs.shape)
        return {"logprobs": logprobs, "values": values, "entropy": entropy}


def tracker_critic_obs(world: TrackingWorld, z_prev: np.ndarray,
                       z_hat: np.ndarray) -> np.ndarray:
    return np.concatenate([
        world.proprio(), world.critic_state(),
        world.keypoint_window_base(noisy=False), z_prev, z_hat], axis=1)


@torch.no_grad()
def collect_tracker_rollout(world: TrackingWorld, stack: ControlStack,
                            policy: TrackerPolicy, log_std: torch.Tensor,
                            t_len: int, rng: np.random.Generator,
                            force_zero_prior: bool = False) -> tuple:
    n = world.n
    buf = RolloutBuffer(t_len, n)
    buf.store_hidden("h_tracker", stack.h_tracker.numpy())
    std = torch.exp(log_std)
    ep_returns, ep_terms = [], []
    reward_acc = np.zeros(n)
    ldim = policy.sizes.latent_dim

    for _ in range(t_len):
        z_prev_np = stack.z_prime_prev.numpy().copy()
        critic_state = world.critic_state()
        kp_clean = world.keypoint_window_base(noisy=False)
        proprio = world.proprio()

        # exploration noise applied around the planner mean, pre-tanh
        noise = torch.as_tensor(rng.standard_normal((n, ldim))) * std
        res = stack.step_10hz(world, tracker_noise=noise,
                              force_zero_prior=force_zero_prior)
        u = res.planner_mean + noise.numpy()
        logp = gaussian_logprob(torch.as_tensor(res.planner_mean), log_std,
                                torch.as_tensor(u)).numpy()
        cobs = np.concatenate([proprio, critic_state, kp_clean,
                               z_prev_np, res.z_hat], axis=1)
        value = policy.value(cobs).numpy()
        buf.add({"planner": res.planner_obs, "critic": cobs},
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

    with torch.no_grad():
        # peek at the next prior for the bootstrap value without advancing
        # the stack's recurrent state
        h_peek = stack.bfm.gru(torch.as_tensor(world.proprio()), stack.h_bfm)
        z_hat_boot = stack.bfm.predictor(
            torch.cat([h_peek, stack.z_prime_prev], dim=-1)).numpy()
    last_cobs = tracker_critic_obs(world, stack.z_prime_prev.numpy(), z_hat_boot)
    last_value = policy.value(last_cobs).numpy()
    stats = {"episode_return": float(np.mean(ep_returns)) if ep_returns else float("nan"),
             "termination_rate": float(np.mean(ep_terms)) if ep_terms else float("nan"),
             "mean_step_reward": float(buf.rewards.mean())}
    return buf, last_value, stats


def train_tracker(bfm_path, clips: list, config: TrackerTrainConfig, seed: int,
                  out_dir, world_config: WorldConfig | None = None,
                  force_zero_prior: bool = False,
                  stop_hook=None, init_path=None) -> list[dict]:
    """Stage-2 optimization over a frozen stage-1 checkpoint.

    Raises RuntimeError if any frozen parameter changes. `stop_hook(policy,
    iteration, row)` may return True to stop early.
    """
    os.makedirs(out_dir, exist_ok=True)
    rng = seed_everything(seed)
    gen = torch.Generator().manual_seed(seed)
    try:
        bfm, _ = load_bfm(bfm_path)
    except FileNotFoundError as exc:
        raise FileNotFoundError(f"backbone checkpoint not found: {bfm_path}") from exc
    for mod in bfm.modules_dict().values():
        freeze(mod)
    checksums_before = frozen_checksums(bfm)

    policy = TrackerPolicy(config.sizes, gen)
    if init_path is not None:
        load_checkpoint(init_path, policy.modules_dict())
    log_std = torch.full((config.sizes.latent_dim,),
                         float(np.log(config.ppo.action_std)))
    agent = _TrackerAgent(policy, log_std)
    optimizer = AdamOptimizer(list(policy.parameters()), lr=config.ppo.lr_init)

    wc = world_config or WorldConfig(stage=2, n_envs=config.n_envs,
                                     episode_seconds=config.episode_seconds,
                                     keypoint_noise_std=config.keypoint_noise_std)
    wc.stage = 2
    wc.n_envs = config.n_envs
    world = TrackingWorld(clips, wc, seed=seed)
    stack = ControlStack(bfm, tracker=policy, n_envs=config.n_envs)

    rows = []
    csv_path = os.path.join(out_dir, "train_log.csv")
    fields = ["iteration", "mean_step_reward", "episode_return",
              "termination_rate", "policy_loss", "value_loss", "entropy",
              "kl", "clip_frac", "lr"]
    with open(csv_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for it in range(config.iterations):
            log_std.fill_(np.log(config.ppo.std_at(it, config.iterations)))
            buf, last_value, roll_stats = collect_tracker_rollout(
                world, stack, policy, log_std, config.rollout_steps, rng,
                force_zero_prior=force_zero_prior)
            buf.finish(last_value, config.ppo.gamma, config.ppo.lam)
            stats = ppo_update(buf, agent, optimizer, config.ppo, rng)
            if frozen_checksums(bfm) != checksums_before:
                raise RuntimeError("frozen backbone parameters changed")
            row = {"iteration": it,
                   "mean_step_reward": roll_stats["mean_step_reward"],
                   "episode_return": roll_stats["episode_return"],
                   "termination_rate": roll_stats["termination_rate"],
                   "policy_loss": stats.policy_loss,
                   "value_loss": stats.value_loss, "entropy": stats.entropy,
                   "kl": stats.kl, "clip_frac": stats.clip_frac,
                   "lr": stats.lr}
            rows.append(row)
            writer.writerow(row)
            fh.flush()
            if stop_hook is not None and stop_hook(policy, it, row):
                break
    save_tracker(os.path.join(out_dir, "tracker"), policy, checksums_before,
                 extra={"seed": seed, "iterations": len(rows),
                        "bfm_checkpoint": str(bfm_path)})
    return rows
