"""Motion-tracking backbone: window encoder, autoregressive latent predictor,
and a GRU-conditioned action decoder, trained jointly with PPO plus latent
regularizers.

The encoder maps a 1 s future reference window (relativized to its first
frame) to a compact latent z; the predictor produces a prior z_hat for the next
latent from proprioceptive history alone; the decoder turns (history, latent)
into low-level actions at 50 Hz. Latents refresh at 10 Hz and are held between
refreshes. Downstream stages reuse the frozen predictor/decoder and steer
behaviour purely through the latent.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field, replace

import numpy as np
import torch
from torch import nn

from .envs import TrackingWorld, WorldConfig, squash_action
from .motion import WINDOW_HORIZON, WINDOW_STRIDE, FRAME_DIM
from .nets import (AdamOptimizer, GruCell, GruSpec, Mlp, MlpSpec,
                   load_checkpoint, save_checkpoint, seed_everything)
from .ppo import (PpoConfig, RolloutBuffer, UpdateStats, gaussian_logprob,
                  ppo_update)
from .sim import ACTION_DIM, PROPRIO_DIM

LATENT_DIM = 32
WINDOW_DIM = WINDOW_HORIZON * FRAME_DIM          # 140
CRITIC_DIM = PROPRIO_DIM + 6 + WINDOW_DIM        # + absolute base pose/velocity

# latent regularizer weights
PREDICTION_W = 1.0
OVERLAP_W = 0.35
COMMITMENT_W = 0.25
TRIPLET_W = 5.0
TRIPLET_MARGIN = 0.2


@dataclass
class BfmSizes:
    latent_dim: int = LATENT_DIM
    gru_hidden: int = 256
    encoder_widths: tuple = (512, 512, 512, 512, 512, 512, 256)
    predictor_widths: tuple = (1024, 1024, 1024, 1024, 1024, 1024)
    decoder_widths: tuple = (1024, 1024, 1024, 1024, 1024, 1024, 128)
    critic_widths: tuple = (512, 512, 512, 512, 256)

    @staticmethod
    def smoke() -> "BfmSizes":
        return BfmSizes(gru_hidden=64,
                        encoder_widths=(128, 128, 64),
                        predictor_widths=(128, 128),
                        decoder_widths=(128, 128, 64),
                        critic_widths=(128, 128))

    def to_dict(self) -> dict:
        return {"latent_dim": self.latent_dim, "gru_hidden": self.gru_hidden,
                "encoder_widths": list(self.encoder_widths),
                "predictor_widths": list(self.predictor_widths),
                "decoder_widths": list(self.decoder_widths),
                "critic_widths": list(self.critic_widths)}

    @staticmethod
    def from_dict(d: dict) -> "BfmSizes":
        return BfmSizes(latent_dim=d["latent_dim"], gru_hidden=d["gru_hidden"],
                        encoder_widths=tuple(d["encoder_widths"]),
                        predictor_widths=tuple(d["predictor_widths"]),
                        decoder_widths=tuple(d["decoder_widths"]),
                        critic_widths=tuple(d["critic_widths"]))


class BfmPolicy(nn.Module):
    """Encoder / history GRU / predictor / decoder / critic bundle."""

    def __init__(self, sizes: BfmSizes | None = None,
                 gen: torch.Generator | None = None):
        super().__init__()
        self.sizes = sizes or BfmSizes()
        s = self.sizes
        self.encoder = Mlp(MlpSpec(WINDOW_DIM, s.encoder_widths, s.latent_dim), gen)
        self.gru = GruCell(GruSpec(PROPRIO_DIM, s.gru_hidden), gen)
        self.predictor = Mlp(MlpSpec(s.gru_hidden + s.latent_dim,
                                     s.predictor_widths, s.latent_dim), gen)
        self.decoder = Mlp(MlpSpec(s.gru_hidden + s.latent_dim,
                                   s.decoder_widths, ACTION_DIM), gen)
        self.critic = Mlp(MlpSpec(CRITIC_DIM, s.critic_widths, 1), gen)

    # all helpers accept numpy or torch and return torch tensors
    def encode(self, window) -> torch.Tensor:
        return self.encoder(torch.as_tensor(window))

    def advance(self, proprio, h) -> torch.Tensor:
        return self.gru(torch.as_tensor(proprio), torch.as_tensor(h))

    def prior(self, h, z_prev) -> torch.Tensor:
        return self.predictor(torch.cat(
            [torch.as_tensor(h), torch.as_tensor(z_prev)], dim=-1))

    def action_mean(self, h, z) -> torch.Tensor:
        return self.decoder(torch.cat(
            [torch.as_tensor(h), torch.as_tensor(z)], dim=-1))

    def value(self, critic_obs) -> torch.Tensor:
        return self.critic(torch.as_tensor(critic_obs)).squeeze(-1)

    def actor_parameters(self):
        for m in (self.encoder, self.gru, self.predictor, self.decoder):
            yield from m.parameters()

    def modules_dict(self) -> dict:
        return {"encoder": self.encoder, "gru": self.gru,
                "predictor": self.predictor, "decoder": self.decoder,
                "critic": self.critic}


def save_bfm(path, policy: BfmPolicy, extra: dict | None = None) -> None:
    manifest = {"kind": "bfm", "sizes": policy.sizes.to_dict()}
    manifest.update(extra or {})
    save_checkpoint(path, policy.modules_dict(), manifest)


def load_bfm(path) -> tuple[BfmPolicy, dict]:
    with open(str(path) + ".json") as fh:
        manifest = json.load(fh)
    policy = BfmPolicy(BfmSizes.from_dict(manifest["sizes"]))
    load_checkpoint(path, policy.modules_dict())
    return policy, manifest


def critic_observation(world: TrackingWorld) -> np.ndarray:
    return np.concatenate([world.proprio(), world.critic_state(),
                           world.encoder_window()], axis=1)


@dataclass
class BfmTrainConfig:
    sizes: BfmSizes = field(default_factory=BfmSizes.smoke)
    ppo: PpoConfig = field(default_factory=lambda: PpoConfig(
        value_coef=2.0, entropy_coef=0.01, epochs=5, minibatches=10,
        target_kl=0.02, lr_init=1e-4, lr_min=1e-5, lr_max=1e-4,
        action_std=0.005, learnable_std=False))
    n_envs: int = 32
    rollout_steps: int = 50          # 50 Hz control steps per iteration
    iterations: int = 100
    episode_seconds: float = 4.0


class _BfmAgent:
    """Replay adapter for the shared PPO engine: re-runs the recurrent policy
    over stored sequences from the snapshotted hidden states and recomputes the
    latent regularizers on the way."""

    def __init__(self, policy: BfmPolicy, log_std: torch.Tensor):
        self.policy = policy
        self.log_std = log_std

    def grad_groups(self) -> dict:
        return {"actor": list(self.policy.actor_parameters()),
                "critic": list(self.policy.critic.parameters())}

    def evaluate(self, buf: RolloutBuffer, ids: np.ndarray) -> dict:
        t_len = buf.t_len
        h = torch.as_tensor(buf.initial_hidden["h"][ids])
        # the held latent doubles as the autoregressive "previous latent":
        # at a refresh boundary it still carries the last boundary's value
        z_hold = torch.as_tensor(buf.initial_hidden["z"][ids])
        proprio = torch.as_tensor(buf.obs["proprio"][:, ids])
        window = torch.as_tensor(buf.obs["window"][:, ids])
        critic_obs = torch.as_tensor(buf.obs["critic"][:, ids])
        boundary = torch.as_tensor(buf.obs["boundary"][:, ids])      # (T, M)
        has_prev = torch.as_tensor(buf.obs["has_prev"][:, ids])
        dones = torch.as_tensor(buf.dones[:, ids], dtype=torch.float64)
        actions = torch.as_tensor(buf.actions[:, ids])

        logps = []
        pred_l, comm_l, over_l, trip_l = [], [], [], []
        pred_n = comm_n = over_n = trip_n = 0.0
        for t in range(t_len):
            if t > 0:
                keep = (1.0 - dones[t - 1]).unsqueeze(-1)
                h = h * keep
                z_hold = z_hold * keep
            h = self.policy.gru(proprio[t], h)
            b = boundary[t].unsqueeze(-1)
            z_prev = z_hold                      # last boundary's latent
            z_new = self.policy.encoder(window[t])
            z_hat = self.policy.predictor(
                torch.cat([h, z_prev.detach()], dim=-1))
            bm = boundary[t]
            hp = has_prev[t]
            pred_l.append((bm * ((z_hat - z_new.detach()) ** 2).sum(-1)).sum())
            pred_n += bm.sum().item()
            comm_l.append((bm * ((z_new - z_hat.detach()) ** 2).sum(-1)).sum())
            comm_n += bm.sum().item()
            over_l.append((hp * ((z_new - z_prev.detach()) ** 2).sum(-1)).sum())
            over_n += hp.sum().item()
            # negatives: another env's latent at the same step
            z_neg = z_new.roll(1, dims=0).detach()
            d_pos = ((z_new - z_prev.detach()) ** 2).sum(-1).sqrt()
            d_neg = ((z_new - z_neg) ** 2).sum(-1).sqrt()
            trip_l.append((hp * torch.clamp(d_pos - d_neg + TRIPLET_MARGIN,
                                            min=0.0)).sum())
            trip_n += hp.sum().item()

            z_hold = b * z_new + (1.0 - b) * z_hold
            u_mean = self.policy.decoder(torch.cat([h, z_hold], dim=-1))
            logps.append(gaussian_logprob(u_mean, self.log_std, actions[t]))

        logprobs = torch.stack(logps)                                 # (T, M)
        values = self.policy.critic(critic_obs).squeeze(-1)
        entropy = (self.log_std + 0.5 * (1.0 + np.log(2 * np.pi))) \
            .sum().expand(logprobs.shape)

        def _mean(parts, count):
            return torch.stack(parts).sum() / max(count, 1.0)

        pred = _mean(pred_l, pred_n)
        comm = _mean(comm_l, comm_n)
        over = _mean(over_l, over_n)
        trip = _mean(trip_l, trip_n)
        aux = (PREDICTION_W * pred + COMMITMENT_W * comm
               + OVERLAP_W * over + TRIPLET_W * trip)
        return {
            "logprobs": logprobs, "values": values, "entropy": entropy,
            "aux_loss": aux,
            "aux_stats": {"prediction": pred.item(), "commitment": comm.item(),
                          "overlap": over.item(), "triplet": trip.item()},
        }


def collect_bfm_rollout(world: TrackingWorld, policy: BfmPolicy,
                        log_std: torch.Tensor, t_len: int,
                        rng: np.random.Generator, carry: dict) -> tuple:
    """One on-policy rollout at 50 Hz. `carry` holds (h, z, z_prev) across
    iterations so recurrent state is never discarded mid-episode."""
    n = world.n
    hdim = policy.sizes.gru_hidden
    ldim = policy.sizes.latent_dim
    if not carry:
        carry.update(h=np.zeros((n, hdim)), z=np.zeros((n, ldim)))
    buf = RolloutBuffer(t_len, n)
    buf.store_hidden("h", carry["h"])
    buf.store_hidden("z", carry["z"])

    h = torch.as_tensor(carry["h"]).clone()
    z = torch.as_tensor(carry["z"]).clone()
    ep_returns, ep_lengths = [], []
    reward_acc = np.zeros(n)
    std = torch.exp(log_std)

    with torch.no_grad():
        for _ in range(t_len):
            o = world.proprio()
            win = world.encoder_window()
            cobs = critic_observation(world)
            boundary = (world.steps_in_episode % WINDOW_STRIDE == 0)
            has_prev = boundary & (world.steps_in_episode > 0)

            h = policy.gru(torch.as_tensor(o), h)
            if boundary.any():
                bmask = torch.as_tensor(boundary.astype(float)).unsqueeze(-1)
                z_new = policy.encoder(torch.as_tensor(win))
                z = bmask * z_new + (1.0 - bmask) * z
            u_mean = policy.decoder(torch.cat([h, z], dim=-1))
            noise = torch.as_tensor(rng.standard_normal((n, ACTION_DIM)))
            u = u_mean + std * noise
            value = policy.critic(torch.as_tensor(cobs)).squeeze(-1)
            logp = gaussian_logprob(u_mean, log_std, u)

            world.step_50hz(squash_action(u.numpy()))
            reward, done, _ = world.reward_and_done()
            reward_acc += reward
            buf.add({"proprio": o, "window": win, "critic": cobs,
                     "boundary": boundary.astype(float),
                     "has_prev": has_prev.astype(float)},
                    u.numpy(), logp.numpy(), value.numpy(), reward, done)
            done_ids = np.nonzero(done)[0]
            if len(done_ids):
                for i in done_ids:
                    ep_returns.append(reward_acc[i])
                    ep_lengths.append(world.steps_in_episode[i])
                reward_acc[done_ids] = 0.0
                keep = torch.as_tensor((~done).astype(float)).unsqueeze(-1)
                h = h * keep
                z = z * keep
                world.reset(done_ids)
        last_value = policy.critic(
            torch.as_tensor(critic_observation(world))).squeeze(-1).numpy()

    carry.update(h=h.numpy(), z=z.numpy())
    stats = {"episode_return": float(np.mean(ep_returns)) if ep_returns else float("nan"),
             "episode_length": float(np.mean(ep_lengths)) if ep_lengths else float("nan"),
             "mean_step_reward": float(buf.rewards.mean())}
    return buf, last_value, stats


def train_bfm(clips: list, config: BfmTrainConfig, seed: int, out_dir,
              world_config: WorldConfig | None = None,
              stop_reward: float | None = None,
              init_path=None) -> list[dict]:
    """Full stage-1 optimization; writes train_log.csv + bfm checkpoint to
    out_dir and returns the per-iteration log rows. `init_path` warm-starts
    from an earlier checkpoint with matching sizes."""
    os.makedirs(out_dir, exist_ok=True)
    rng = seed_everything(seed)
    gen = torch.Generator().manual_seed(seed)
    policy = BfmPolicy(config.sizes, gen)
    if init_path is not None:
        load_checkpoint(init_path, policy.modules_dict())
    log_std = torch.full((ACTION_DIM,), float(np.log(config.ppo.action_std)))
    agent = _BfmAgent(policy, log_std)
    params = list(policy.parameters())
    optimizer = AdamOptimizer(params, lr=config.ppo.lr_init)

    wc = world_config or WorldConfig(stage=1, n_envs=config.n_envs,
                                     episode_seconds=config.episode_seconds)
    wc.stage = 1
    wc.n_envs = config.n_envs
    world = TrackingWorld(clips, wc, seed=seed)

    rows = []
    carry: dict = {}
    csv_path = os.path.join(out_dir, "train_log.csv")
    fields = ["iteration", "mean_step_reward", "episode_return", "episode_length",
              "policy_loss", "value_loss", "entropy", "kl", "clip_frac", "lr",
              "prediction", "commitment", "overlap", "triplet"]
    with open(csv_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for it in range(config.iterations):
            log_std.fill_(np.log(config.ppo.std_at(it, config.iterations)))
            buf, last_value, roll_stats = collect_bfm_rollout(
                world, policy, log_std, config.rollout_steps, rng, carry)
            buf.finish(last_value, config.ppo.gamma, config.ppo.lam)
            stats = ppo_update(buf, agent, optimizer, config.ppo, rng)
            row = {"iteration": it,
                   "mean_step_reward": roll_stats["mean_step_reward"],
                   "episode_return": roll_stats["episode_return"],
                   "episode_length": roll_stats["episode_length"],
                   "policy_loss": stats.policy_loss,
                   "value_loss": stats.value_loss,
                   "entropy": stats.entropy, "kl": stats.kl,
                   "clip_frac": stats.clip_frac, "lr": stats.lr}
            row.update({k: stats.aux.get(k, float("nan"))
                        for k in ("prediction", "commitment", "overlap", "triplet")})
            rows.append(row)
            writer.writerow(row)
            fh.flush()
            if stop_reward is not None and \
                    row["mean_step_reward"] >= stop_reward:
                break
    save_bfm(os.path.join(out_dir, "bfm"), policy,
             extra={"seed": seed, "iterations": len(rows)})
    return rows
