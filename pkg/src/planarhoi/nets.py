"""Small differentiable building blocks: MLP, GRU cell, Adam wrapper, checkpoints.

Torch (CPU, float64) supplies the tensor algebra and reverse-mode gradients;
this module pins the architectures, initialization, and serialization contracts
used by the training stack. Forward passes are pure functions of (params,
inputs, hidden), and checkpoints round-trip bit-exactly.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

torch.set_default_dtype(torch.float64)

FORMAT_VERSION = 1


def seed_everything(seed: int) -> np.random.Generator:
    """Seed torch and return a fresh numpy Generator; pins torch to one thread
    so reductions are bitwise reproducible."""
    torch.manual_seed(seed)
    torch.set_num_threads(1)
    return np.random.default_rng(seed)


@dataclass
class MlpSpec:
    in_dim: int
    widths: tuple
    out_dim: int
    activation: str = "elu"
    output_activation: str = "linear"   # or "tanh"

    def __post_init__(self):
        if self.in_dim <= 0 or self.out_dim <= 0 or len(self.widths) < 0:
            raise ValueError("bad MlpSpec dimensions")
        if self.activation != "elu":
            raise ValueError("only elu hidden activations are supported")
        if self.output_activation not in ("linear", "tanh"):
            raise ValueError("output_activation must be linear or tanh")


@dataclass
class GruSpec:
    in_dim: int
    hidden_dim: int = 256

    def __post_init__(self):
        if self.in_dim <= 0 or self.hidden_dim <= 0:
            raise ValueError("GruSpec dims must be positive")


def _init_linear(layer: nn.Linear, gen: torch.Generator | None = None) -> None:
    fan_in = layer.in_features
    bound = 1.0 / np.sqrt(fan_in)
    with torch.no_grad():
        layer.weight.uniform_(-bound, bound, generator=gen)
        layer.bias.zero_()


class Mlp(nn.Module):
    def __init__(self, spec: MlpSpec, gen: torch.Generator | None = None):
        super().__init__()
        self.spec = spec
        dims = [spec.in_dim, *spec.widths, spec.out_dim]
        self.layers = nn.ModuleList(
            nn.Linear(dims[i], dims[i + 1]) for i in range(len(dims) - 1))
        for layer in self.layers:
            _init_linear(layer, gen)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.spec.in_dim:
            raise ValueError(
                f"input dim {x.shape[-1]} does not match spec {self.spec.in_dim}")
        for layer in self.layers[:-1]:
            x = torch.nn.functional.elu(layer(x))
        x = self.layers[-1](x)
        if self.spec.output_activation == "tanh":
            x = torch.tanh(x)
        return x


class GruCell(nn.Module):
    """Standard GRU cell: r/z gates with sigmoid, tanh candidate,
    h' = (1 - z) * h_tilde + z * h."""

    def __init__(self, spec: GruSpec, gen: torch.Generator | None = None):
        super().__init__()
        self.spec = spec
        self.cell = nn.GRUCell(spec.in_dim, spec.hidden_dim)
        with torch.no_grad():
            bound = 1.0 / np.sqrt(spec.in_dim)
            self.cell.weight_ih.uniform_(-bound, bound, generator=gen)
            for chunk in self.cell.weight_hh.chunk(3, 0):
                nn.init.orthogonal_(chunk, generator=gen)
            self.cell.bias_ih.zero_()
            self.cell.bias_hh.zero_()

    def forward(self, x: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.spec.in_dim or h.shape[-1] != self.spec.hidden_dim:
            raise ValueError("gru input/hidden dims do not match spec")
        return self.cell(x, h)

    def initial_state(self, batch: int) -> torch.Tensor:
        return torch.zeros(batch, self.spec.hidden_dim)


def mlp_forward(mlp: Mlp, x: np.ndarray | torch.Tensor) -> torch.Tensor:
    if isinstance(x, np.ndarray):
        x = torch.as_tensor(x)
    return mlp(x)


def gru_step(gru: GruCell, x, h) -> torch.Tensor:
    if isinstance(x, np.ndarray):
        x = torch.as_tensor(x)
    if isinstance(h, np.ndarray):
        h = torch.as_tensor(h)
    return gru(x, h)


def backward(loss: torch.Tensor, parameters) -> None:
    """Reverse-mode gradients for `loss`; raises if any gradient is non-finite."""
    params = list(parameters)
    loss.backward()
    for p in params:
        if p.grad is not None and not torch.all(torch.isfinite(p.grad)):
            raise FloatingPointError("non-finite gradient encountered")


class AdamOptimizer:
    """Adam with bias correction; steps with non-finite gradients are skipped
    and counted rather than applied."""

    def __init__(self, parameters, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        if lr <= 0:
            raise ValueError("lr must be positive")
        self.params = list(parameters)
        self.opt = torch.optim.Adam(self.params, lr=lr, betas=betas, eps=eps)
        self.skipped_steps = 0

    @property
    def lr(self) -> float:
        return self.opt.param_groups[0]["lr"]

    @lr.setter
    def lr(self, value: float) -> None:
        for group in self.opt.param_groups:
            group["lr"] = value

    def step(self) -> bool:
        for p in self.params:
            if p.grad is not None and not torch.all(torch.isfinite(p.grad)):
                self.skipped_steps += 1
                self.opt.zero_grad(set_to_none=True)
                return False
        self.opt.step()
        return True

    def zero_grad(self) -> None:
        self.opt.zero_grad(set_to_none=True)


def state_arrays(module: nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}


def load_state_arrays(module: nn.Module, arrays: dict[str, np.ndarray]) -> None:
    sd = {k: torch.as_tensor(v) for k, v in arrays.items()}
    module.load_state_dict(sd)


def params_checksum(module: nn.Module) -> str:
    """SHA-256 over the exact parameter bytes, order-stable."""
    h = hashlib.sha256()
    for k in sorted(module.state_dict()):
        v = module.state_dict()[k]
        h.update(k.encode())
        h.update(v.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(path, modules: dict[str, nn.Module], manifest: dict) -> None:
    """Binary parameter blob (<path>.npz) plus a JSON manifest (<path>.json)."""
    path = str(path)
    arrays = {}
    shapes = {}
    for name, module in modules.items():
        for k, v in state_arrays(module).items():
            arrays[f"{name}/{k}"] = v
            shapes[f"{name}/{k}"] = list(v.shape)
    # hand-rolled npz with pinned zip timestamps: identical params must give
    # byte-identical files across runs
    with zipfile.ZipFile(path + ".npz", "w", zipfile.ZIP_STORED) as zf:
        for k in sorted(arrays):
            buf = io.BytesIO()
            np.save(buf, arrays[k])
            info = zipfile.ZipInfo(k + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, buf.getvalue())
    manifest = dict(manifest)
    manifest.setdefault("version", FORMAT_VERSION)
    manifest["shapes"] = shapes
    with open(path + ".json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def load_checkpoint(path, modules: dict[str, nn.Module]) -> dict:
    path = str(path)
    with np.load(path + ".npz") as data:
        for name, module in modules.items():
            prefix = name + "/"
            arrays = {k[len(prefix):]: data[k] for k in data.files
                      if k.startswith(prefix)}
            load_state_arrays(module, arrays)
    with open(path + ".json") as fh:
        return json.load(fh)
