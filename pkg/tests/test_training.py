"""Training loops: log emission, checkpoint chaining across the three stages,
early-stop hooks, frozen-parameter enforcement, and input validation. All runs
use tiny smoke sizes."""

import csv
import dataclasses

import numpy as np
import pytest

from planarhoi.adaptor import (AdaptorSizes, AdaptorTrainConfig, load_adaptor,
                               train_adaptor)
from planarhoi.bfm import BfmSizes, BfmTrainConfig, load_bfm, train_bfm
from planarhoi.tracker import (TrackerSizes, TrackerTrainConfig, load_tracker,
                               train_tracker)


def _smoke_ppo(ppo):
    return dataclasses.replace(ppo, epochs=1, minibatches=2)


def _bfm_config():
    cfg = BfmTrainConfig(sizes=BfmSizes.smoke(), n_envs=4, rollout_steps=10,
                         iterations=2, episode_seconds=1.0)
    cfg.ppo = _smoke_ppo(cfg.ppo)
    return cfg


def _tracker_config():
    cfg = TrackerTrainConfig(sizes=TrackerSizes.smoke(), n_envs=4,
                             rollout_steps=6, iterations=2,
                             episode_seconds=1.0)
    cfg.ppo = _smoke_ppo(cfg.ppo)
    return cfg


def _adaptor_config():
    cfg = AdaptorTrainConfig(sizes=AdaptorSizes.smoke(), n_envs=4,
                             rollout_steps=6, iterations=2,
                             episode_seconds=1.0)
    cfg.ppo = _smoke_ppo(cfg.ppo)
    return cfg


@pytest.fixture(scope="module")
def stage1(tmp_path_factory, walk_clip):
    out = tmp_path_factory.mktemp("stage1")
    rows = train_bfm([walk_clip], _bfm_config(), seed=0, out_dir=out)
    return out, rows


@pytest.fixture(scope="module")
def stage2(tmp_path_factory, stage1, reach_clip):
    out = tmp_path_factory.mktemp("stage2")
    rows = train_tracker(stage1[0] / "bfm", [reach_clip], _tracker_config(),
                         seed=0, out_dir=out)
    return out, rows


def test_train_bfm_writes_log_and_checkpoint(stage1):
    out, rows = stage1
    assert len(rows) == 2
    with open(out / "train_log.csv") as fh:
        logged = list(csv.DictReader(fh))
    assert len(logged) == 2
    assert set(logged[0]) >= {"iteration", "mean_step_reward", "policy_loss",
                              "value_loss", "kl", "lr", "prediction",
                              "commitment", "overlap", "triplet"}
    for row in rows:
        assert np.isfinite(row["policy_loss"])
        assert np.isfinite(row["mean_step_reward"])
    policy, manifest = load_bfm(out / "bfm")
    assert manifest["kind"] == "bfm"
    assert manifest["seed"] == 0
    assert manifest["iterations"] == 2
    assert policy.sizes.gru_hidden == BfmSizes.smoke().gru_hidden


def test_train_bfm_stop_reward_breaks_early(tmp_path, walk_clip):
    rows = train_bfm([walk_clip], _bfm_config(), seed=1, out_dir=tmp_path,
                     stop_reward=-1e9)
    assert len(rows) == 1
    _, manifest = load_bfm(tmp_path / "bfm")
    assert manifest["iterations"] == 1


def test_train_bfm_deterministic(tmp_path, walk_clip):
    a = tmp_path / "a"
    b = tmp_path / "b"
    for d in (a, b):
        train_bfm([walk_clip], _bfm_config(), seed=5, out_dir=d)
    assert (a / "bfm.npz").read_bytes() == (b / "bfm.npz").read_bytes()
    assert (a / "train_log.csv").read_bytes() == \
        (b / "train_log.csv").read_bytes()


def test_train_bfm_warm_start_differs_from_cold(tmp_path, walk_clip, stage1):
    cfg = _bfm_config()
    cfg.iterations = 1
    cold = train_bfm([walk_clip], cfg, seed=7, out_dir=tmp_path / "cold")
    warm = train_bfm([walk_clip], cfg, seed=7, out_dir=tmp_path / "warm",
                     init_path=stage1[0] / "bfm")
    assert cold[0]["mean_step_reward"] != warm[0]["mean_step_reward"]


def test_train_tracker_chains_and_freezes(stage1, stage2):
    out, rows = stage2
    assert len(rows) == 2
    policy, manifest = load_tracker(out / "tracker")
    assert manifest["kind"] == "tracker"
    # the manifest pins the frozen backbone it was trained against
    bfm, _ = load_bfm(stage1[0] / "bfm")
    from planarhoi.tracker import frozen_checksums
    assert manifest["bfm_checksums"] == frozen_checksums(bfm)
    with open(out / "train_log.csv") as fh:
        logged = list(csv.DictReader(fh))
    assert len(logged) == 2
    assert "termination_rate" in logged[0]


def test_train_tracker_missing_backbone(tmp_path, reach_clip):
    with pytest.raises(FileNotFoundError, match="checkpoint"):
        train_tracker(tmp_path / "nope" / "bfm", [reach_clip],
                      _tracker_config(), seed=0, out_dir=tmp_path)


def test_train_tracker_stop_hook(tmp_path, stage1, reach_clip):
    seen = []

    def hook(policy, it, row):
        seen.append(it)
        return True

    rows = train_tracker(stage1[0] / "bfm", [reach_clip], _tracker_config(),
                         seed=2, out_dir=tmp_path, stop_hook=hook)
    assert seen == [0]
    assert len(rows) == 1


def test_train_adaptor_requires_object_clips(tmp_path, stage1, stage2,
                                             walk_clip):
    with pytest.raises(ValueError, match="object"):
        train_adaptor(stage1[0] / "bfm", stage2[0] / "tracker", [walk_clip],
                      _adaptor_config(), seed=0, out_dir=tmp_path)


def test_train_adaptor_chains_all_three_stages(tmp_path, stage1, stage2,
                                               carry_clip):
    rows = train_adaptor(stage1[0] / "bfm", stage2[0] / "tracker",
                         [carry_clip], _adaptor_config(), seed=0,
                         out_dir=tmp_path)
    assert len(rows) == 2
    policy, manifest = load_adaptor(tmp_path / "adaptor")
    assert manifest["kind"] == "adaptor"
    assert set(manifest["frozen_checksums"]) == {"bfm", "tracker"}
    # learnable exploration noise stays inside its clamp bounds
    std = policy.std().detach().numpy()
    assert np.all(std >= 0.01 - 1e-12) and np.all(std <= 2.0 + 1e-12)
    assert np.isfinite(rows[-1]["std_mean"])
