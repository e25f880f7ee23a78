"""Hierarchical control stack runner: frozen backbone at 50 Hz under a 10 Hz
latent planner and optional 10 Hz joint-space residual, with zero-order hold.

One `step_10hz` call advances the world by five decoder steps. The same runner
serves stage-2/3 training rollouts (exploration injected by the caller) and
deterministic evaluation (means everywhere).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .bfm import BfmPolicy
from .envs import TrackingWorld, squash_action
from .sim import ACTION_DIM, PROPRIO_DIM

RESIDUAL_SCALE = 3.0            # latent residual bound: tanh x 3
# joint-space residual bound in env units: (f_x, f_z, tau, 4 joint targets)
ADAPTOR_BOUNDS = np.array([30.0, 30.0, 10.0, 0.2, 0.2, 0.2, 0.2])

KEYPOINT_WINDOW_DIM = 60        # 10 frames x 3 keypoints x 2
OBJECT_WINDOW_DIM = 30          # 10 frames x (pos 2 + pitch)
OBJECT_STATE_DIM = 6

PLANNER_OBS_DIM = PROPRIO_DIM + KEYPOINT_WINDOW_DIM + 2 * 32
ADAPTOR_OBS_DIM = PROPRIO_DIM + KEYPOINT_WINDOW_DIM + OBJECT_WINDOW_DIM \
    + OBJECT_STATE_DIM


def latent_residual(u) -> torch.Tensor:
    """Bounded latent correction: ||z_res||_inf <= RESIDUAL_SCALE."""
    return RESIDUAL_SCALE * torch.tanh(torch.as_tensor(u))


def joint_residual(u) -> torch.Tensor:
    """Bounded env-unit action correction."""
    return torch.as_tensor(ADAPTOR_BOUNDS) * torch.tanh(torch.as_tensor(u))


@dataclass
class StepResult:
    """Diagnostics of one 10 Hz macro step over N envs."""

    planner_obs: np.ndarray | None      # (N, PLANNER_OBS_DIM)
    planner_mean: np.ndarray | None     # pre-tanh residual mean
    z_hat: np.ndarray                   # (N, L) latent prior
    z_prime: np.ndarray                 # (N, L) composed latent
    adaptor_obs: np.ndarray | None
    adaptor_mean: np.ndarray | None
    reward: np.ndarray                  # (N,) summed over alive inner steps
    done: np.ndarray                    # (N,) any inner step done
    terminated: np.ndarray              # (N,) failure (vs timeout) flag


class ControlStack:
    """Recurrent state + stepping logic for the (backbone, planner, adaptor)
    hierarchy. Components beyond the backbone are optional; absent components
    contribute exact zeros, so stage-k rollouts are bitwise reproducible by a
    stage-(k+1) stack with zeroed residuals."""

    def __init__(self, bfm: BfmPolicy, tracker=None, adaptor=None,
                 n_envs: int = 1, noisy_keypoints: bool = True):
        self.bfm = bfm
        self.tracker = tracker
        self.adaptor = adaptor
        self.n = n_envs
        self.noisy_keypoints = noisy_keypoints
        ldim = bfm.sizes.latent_dim
        self.h_bfm = torch.zeros(n_envs, bfm.sizes.gru_hidden)
        self.z_prime_prev = torch.zeros(n_envs, ldim)
        self.h_tracker = torch.zeros(
            n_envs, tracker.sizes.gru_hidden) if tracker is not None else None
        self.h_adaptor = torch.zeros(
            n_envs, adaptor.sizes.gru_hidden) if adaptor is not None else None

    def reset_ids(self, ids) -> None:
        ids = np.asarray(ids, dtype=int)
        if len(ids) == 0:
            return
        self.h_bfm[ids] = 0.0
        self.z_prime_prev[ids] = 0.0
        if self.h_tracker is not None:
            self.h_tracker[ids] = 0.0
        if self.h_adaptor is not None:
            self.h_adaptor[ids] = 0.0

    @torch.no_grad()
    def step_10hz(self, world: TrackingWorld,
                  tracker_noise: np.ndarray | None = None,
                  adaptor_noise: np.ndarray | None = None,
                  force_zero_prior: bool = False,
                  force_zero_residual: bool = False,
                  use_adaptor: bool = True,
                  recorder=None) -> StepResult:
        """Plan once, decode and step the world `highlevel_decimation` times.

        tracker_noise / adaptor_noise are additive pre-tanh exploration noise
        (training); None means deterministic mean. `recorder(world)` is called
        after every 50 Hz step.
        """
        n = self.n
        o = world.proprio()
        self.h_bfm = self.bfm.gru(torch.as_tensor(o), self.h_bfm)
        z_hat = self.bfm.predictor(
            torch.cat([self.h_bfm, self.z_prime_prev], dim=-1))
        if force_zero_prior:
            z_hat = torch.zeros_like(z_hat)

        planner_obs = planner_mean = None
        if self.tracker is not None:
            kp_win = world.keypoint_window_base(noisy=self.noisy_keypoints)
            planner_obs = np.concatenate(
                [o, kp_win, self.z_prime_prev.numpy(), z_hat.numpy()], axis=1)
            self.h_tracker = self.tracker.gru(
                torch.as_tensor(planner_obs), self.h_tracker)
            planner_mean = self.tracker.mlp(self.h_tracker)
            u_tr = planner_mean if tracker_noise is None \
                else planner_mean + torch.as_tensor(tracker_noise)
            z_res = latent_residual(u_tr)
            if force_zero_residual:
                z_res = torch.zeros_like(z_res)
            z_prime = z_hat + z_res
        else:
            z_prime = z_hat

        adaptor_obs = adaptor_mean = None
        delta = torch.zeros(n, ACTION_DIM)
        if self.adaptor is not None and use_adaptor:
            kp_win_a = world.keypoint_window_base(noisy=self.noisy_keypoints)
            adaptor_obs = np.concatenate(
                [o, kp_win_a, world.object_window_base(),
                 world.object_state_base()], axis=1)
            self.h_adaptor = self.adaptor.gru(
                torch.as_tensor(adaptor_obs), self.h_adaptor)
            adaptor_mean = self.adaptor.mlp(self.h_adaptor)
            u_ad = adaptor_mean if adaptor_noise is None \
                else adaptor_mean + torch.as_tensor(adaptor_noise)
            delta = joint_residual(u_ad)

        reward = np.zeros(n)
        done_any = np.zeros(n, dtype=bool)
        term_any = np.zeros(n, dtype=bool)
        alive = np.ones(n, dtype=bool)
        for k in range(world.sim.highlevel_decimation):
            if k > 0:
                o_k = world.proprio()
                self.h_bfm = self.bfm.gru(torch.as_tensor(o_k), self.h_bfm)
            u_dec = self.bfm.decoder(torch.cat([self.h_bfm, z_prime], dim=-1))
            a_env = squash_action(u_dec.numpy()) + delta.numpy()
            world.step_50hz(a_env)
            r, done, _ = world.reward_and_done()
            term = world.last_terminated
            reward += r * alive
            term_any |= term & alive
            done_any |= done
            alive &= ~done
            if recorder is not None:
                recorder(world)

        self.z_prime_prev = z_prime.clone()
        return StepResult(
            planner_obs=planner_obs,
            planner_mean=None if planner_mean is None else planner_mean.numpy(),
            z_hat=z_hat.numpy(), z_prime=z_prime.numpy(),
            adaptor_obs=adaptor_obs,
            adaptor_mean=None if adaptor_mean is None else adaptor_mean.numpy(),
            reward=reward, done=done_any, terminated=term_any)
