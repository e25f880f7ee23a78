"""Network building blocks against independent numpy reimplementations,
finite-difference gradient checks, and checkpoint round trips."""

import numpy as np
import pytest
import torch

from planarhoi.nets import (AdamOptimizer, GruCell, GruSpec, Mlp, MlpSpec,
                            load_checkpoint, params_checksum, save_checkpoint,
                            seed_everything, state_arrays)


def np_elu(x):
    return np.where(x > 0, x, np.expm1(x))


def np_mlp(arrays, x, spec):
    """Forward pass from raw state-dict arrays; independent of torch."""
    n_layers = len([k for k in arrays if k.endswith(".weight")])
    h = x
    for i in range(n_layers):
        w = arrays[f"layers.{i}.weight"]
        b = arrays[f"layers.{i}.bias"]
        h = h @ w.T + b
        if i < n_layers - 1:
            h = np_elu(h)
    if spec.output_activation == "tanh":
        h = np.tanh(h)
    return h


def np_gru(arrays, x, h):
    """Torch GRUCell semantics: r/z/n gate order, bias_ih + bias_hh."""
    w_ih = arrays["cell.weight_ih"]
    w_hh = arrays["cell.weight_hh"]
    b_ih = arrays["cell.bias_ih"]
    b_hh = arrays["cell.bias_hh"]
    gi = x @ w_ih.T + b_ih
    gh = h @ w_hh.T + b_hh
    hd = h.shape[-1]
    i_r, i_z, i_n = gi[..., :hd], gi[..., hd:2 * hd], gi[..., 2 * hd:]
    h_r, h_z, h_n = gh[..., :hd], gh[..., hd:2 * hd], gh[..., 2 * hd:]
    r = 1.0 / (1.0 + np.exp(-(i_r + h_r)))
    z = 1.0 / (1.0 + np.exp(-(i_z + h_z)))
    n = np.tanh(i_n + r * h_n)
    return (1.0 - z) * n + z * h


@pytest.mark.parametrize("out_act", ["linear", "tanh"])
def test_mlp_forward_matches_numpy(out_act):
    seed_everything(0)
    spec = MlpSpec(5, (8, 7), 3, output_activation=out_act)
    mlp = Mlp(spec)
    x = np.random.default_rng(1).normal(size=(6, 5))
    got = mlp(torch.as_tensor(x)).detach().numpy()
    want = np_mlp(state_arrays(mlp), x, spec)
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_gru_forward_matches_numpy():
    seed_everything(0)
    gru = GruCell(GruSpec(4, 6))
    gen = np.random.default_rng(2)
    x = gen.normal(size=(3, 4))
    h = gen.normal(size=(3, 6))
    got = gru(torch.as_tensor(x), torch.as_tensor(h)).detach().numpy()
    want = np_gru(state_arrays(gru), x, h)
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_mlp_gradients_match_finite_difference():
    seed_everything(3)
    mlp = Mlp(MlpSpec(4, (6,), 2))
    gen = np.random.default_rng(4)
    x = torch.as_tensor(gen.normal(size=(5, 4)))
    loss = mlp(x).pow(2).sum()
    loss.backward()
    eps = 1e-6
    checked = 0
    for p in mlp.parameters():
        flat = p.detach().numpy().ravel()
        gflat = p.grad.numpy().ravel()
        for idx in gen.choice(flat.size, size=min(10, flat.size),
                              replace=False):
            orig = flat[idx]
            flat[idx] = orig + eps
            lp = mlp(x).pow(2).sum().item()
            flat[idx] = orig - eps
            lm = mlp(x).pow(2).sum().item()
            flat[idx] = orig
            np.testing.assert_allclose(gflat[idx], (lp - lm) / (2 * eps),
                                       rtol=1e-5, atol=1e-7)
            checked += 1
    assert checked >= 20


def test_gru_hh_init_orthogonal():
    seed_everything(5)
    gru = GruCell(GruSpec(3, 8))
    for chunk in gru.cell.weight_hh.chunk(3, 0):
        prod = (chunk @ chunk.T).detach().numpy()
        np.testing.assert_allclose(prod, np.eye(8), atol=1e-10)


def test_mlp_rejects_bad_specs_and_inputs():
    with pytest.raises(ValueError):
        MlpSpec(0, (4,), 2)
    with pytest.raises(ValueError):
        MlpSpec(3, (4,), 2, activation="relu")
    with pytest.raises(ValueError):
        MlpSpec(3, (4,), 2, output_activation="sigmoid")
    mlp = Mlp(MlpSpec(3, (4,), 2))
    with pytest.raises(ValueError):
        mlp(torch.zeros(1, 5))


def test_adam_skips_nonfinite_gradients():
    seed_everything(6)
    mlp = Mlp(MlpSpec(2, (), 1))
    opt = AdamOptimizer(mlp.parameters(), lr=1e-2)
    before = state_arrays(mlp)
    for p in mlp.parameters():
        p.grad = torch.full_like(p, float("nan"))
    assert not opt.step()
    assert opt.skipped_steps == 1
    after = state_arrays(mlp)
    for k in before:
        np.testing.assert_array_equal(before[k], after[k])
    with pytest.raises(ValueError):
        AdamOptimizer(mlp.parameters(), lr=0.0)


def test_adam_lr_property_round_trip():
    mlp = Mlp(MlpSpec(2, (), 1))
    opt = AdamOptimizer(mlp.parameters(), lr=1e-3)
    assert opt.lr == 1e-3
    opt.lr = 5e-4
    assert opt.lr == 5e-4


def test_checkpoint_round_trip_bit_exact(tmp_path):
    seed_everything(7)
    a = Mlp(MlpSpec(4, (5,), 3))
    g = GruCell(GruSpec(3, 4))
    path = tmp_path / "ckpt"
    save_checkpoint(path, {"mlp": a, "gru": g}, {"note": "test"})
    seed_everything(8)
    a2 = Mlp(MlpSpec(4, (5,), 3))
    g2 = GruCell(GruSpec(3, 4))
    assert params_checksum(a2) != params_checksum(a)
    manifest = load_checkpoint(path, {"mlp": a2, "gru": g2})
    assert manifest["note"] == "test"
    assert params_checksum(a2) == params_checksum(a)
    assert params_checksum(g2) == params_checksum(g)


def test_checkpoint_files_byte_identical(tmp_path):
    seed_everything(9)
    mlp = Mlp(MlpSpec(4, (5,), 3))
    save_checkpoint(tmp_path / "a", {"mlp": mlp}, {"k": 1})
    save_checkpoint(tmp_path / "b", {"mlp": mlp}, {"k": 1})
    assert (tmp_path / "a.npz").read_bytes() == (tmp_path / "b.npz").read_bytes()
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_seeded_init_reproducible():
    seed_everything(11)
    a = Mlp(MlpSpec(4, (5,), 3))
    seed_everything(11)
    b = Mlp(MlpSpec(4, (5,), 3))
    assert params_checksum(a) == params_checksum(b)
