"""
Multilayer-perceptron surrogate u_hat(t, x; theta) of the PDE solution.

Inputs are (t / time_scale, x / state_scale) concatenated; the output is a
scalar. Input gradients, input Hessians and parameter gradients are exact,
taken by torch autograd through the layer composition. The autograd graph
built while evaluating a loss is the tape that `parameter_gradient`
differentiates.
"""

from __future__ import annotations

import enum
import logging
import math
import struct
from pathlib import Path
from typing import Sequence, Tuple

import numpy as np
import torch
from torch import nn

from fbsdenet.errors import (
    CheckpointFormatError,
    EmptyTapeError,
    NumericalAbort,
    ShapeError,
    UnsupportedOperationError,
)
from fbsdenet.utils.hashing import crc32

logger = logging.getLogger(__name__)

DTYPE = torch.float64

CHECKPOINT_MAGIC = b"FBNN"
CHECKPOINT_VERSION = 1


class Activation(str, enum.Enum):
    TANH = "tanh"
    SINE = "sine"
    RELU = "relu"
    # affine layers only; meant for tests and manufactured problems
    IDENTITY = "identity"

    @property
    def tag(self) -> int:
        return _ACTIVATION_TAGS[self]

    @property
    def smooth(self) -> bool:
        return self is not Activation.RELU


_ACTIVATION_TAGS = {Activation.TANH: 0, Activation.SINE: 1, Activation.RELU: 2, Activation.IDENTITY: 3}


class _RightReLU(torch.autograd.Function):
    """ReLU whose derivative at the kink is the right derivative, 1."""

    @staticmethod
    def forward(ctx, inputs):
        ctx.save_for_backward(inputs)
        return inputs.clamp(min=0.0)

    @staticmethod
    def backward(ctx, grad_output):
        (inputs,) = ctx.saved_tensors
        return grad_output * (inputs >= 0.0).to(grad_output.dtype)


def _activate(activation: Activation, h: torch.Tensor) -> torch.Tensor:
    if activation is Activation.TANH:
        return torch.tanh(h)
    if activation is Activation.SINE:
        return torch.sin(h)
    if activation is Activation.RELU:
        return _RightReLU.apply(h)
    return h


class MlpSurrogate(nn.Module):
    def __init__(
        self,
        layer_dims: Sequence[int],
        activation: Activation = Activation.TANH,
        seed: int = 0,
        time_scale: float = 1.0,
        state_scale: float = 1.0,
    ):
        super().__init__()
        layer_dims = [int(n) for n in layer_dims]
        if len(layer_dims) < 2 or any(n < 1 for n in layer_dims):
            raise ShapeError(f"layer_dims must list at least input and output sizes, got {layer_dims}")
        if layer_dims[0] < 2:
            raise ShapeError("input size must be d + 1 >= 2 for (t, x)")
        if layer_dims[-1] != 1:
            raise ShapeError(f"output size must be 1, got {layer_dims[-1]}")
        if time_scale <= 0.0 or state_scale <= 0.0:
            raise ShapeError("input scales must be positive")
        self.layer_dims = tuple(layer_dims)
        self.activation = Activation(activation)
        self.time_scale = float(time_scale)
        self.state_scale = float(state_scale)
        self.layers = nn.ModuleList(
            nn.Linear(n_in, n_out, dtype=DTYPE) for n_in, n_out in zip(layer_dims[:-1], layer_dims[1:])
        )
        self.reset_parameters(seed)

    @property
    def dim(self) -> int:
        return self.layer_dims[0] - 1

    def reset_parameters(self, seed: int) -> None:
        """Fan-in scaled uniform weights U(-sqrt(3/fan_in), sqrt(3/fan_in)), zero biases."""
        generator = torch.Generator().manual_seed(int(seed) % 2**63)
        with torch.no_grad():
            for layer in self.layers:
                bound = math.sqrt(3.0 / layer.in_features)
                layer.weight.copy_(torch.rand(layer.weight.shape, generator=generator, dtype=DTYPE) * 2 * bound - bound)
                layer.bias.zero_()

    def forward(self, t: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        h = torch.cat([(t / self.time_scale).unsqueeze(-1), x / self.state_scale], dim=-1)
        for index, layer in enumerate(self.layers):
            h = layer(h)
            if index < len(self.layers) - 1:
                h = _activate(self.activation, h)
        return h.squeeze(-1)

    def same_architecture(self, other: MlpSurrogate) -> bool:
        return (
            self.layer_dims == other.layer_dims
            and self.activation is other.activation
            and self.time_scale == other.time_scale
            and self.state_scale == other.state_scale
        )


def as_batch(net: MlpSurrogate, t, x) -> Tuple[torch.Tensor, torch.Tensor, bool]:
    """Coerce (t, x) to batched tensors t (M,), x (M, d); flags a single-point call."""
    x = torch.as_tensor(x, dtype=DTYPE)
    single = x.ndim == 1
    if single:
        x = x.unsqueeze(0)
    if x.ndim != 2 or x.shape[1] != net.dim:
        raise ShapeError(f"state must have dimension {net.dim}, got shape {tuple(x.shape)}")
    t = torch.as_tensor(t, dtype=DTYPE)
    if t.ndim == 0:
        t = t.expand(x.shape[0])
    if t.shape != (x.shape[0],):
        raise ShapeError(f"times shape {tuple(t.shape)} does not match {x.shape[0]} states")
    return t, x, single


def forward(net: MlpSurrogate, t, x) -> torch.Tensor:
    t, x, single = as_batch(net, t, x)
    value = net(t, x)
    return value[0] if single else value


def _with_input_grad(tensor: torch.Tensor) -> torch.Tensor:
    if tensor.requires_grad:
        return tensor
    return tensor.detach().requires_grad_(True)


def input_gradient(net: MlpSurrogate, t, x, create_graph: bool = False) -> Tuple[torch.Tensor, torch.Tensor]:
    """Exact (du/dt, grad_x u); with create_graph the result stays on the tape."""
    t, x, single = as_batch(net, t, x)
    with torch.enable_grad():
        t = _with_input_grad(t)
        x = _with_input_grad(x)
        value = net(t, x)
        # retain: x may already sit on a training tape that is differentiated later
        du_dt, grad_x = torch.autograd.grad(
            value.sum(), (t, x), create_graph=create_graph, retain_graph=True, allow_unused=True
        )
    du_dt = torch.zeros_like(t) if du_dt is None else du_dt
    grad_x = torch.zeros_like(x) if grad_x is None else grad_x
    if not create_graph:
        du_dt, grad_x = du_dt.detach(), grad_x.detach()
    if single:
        return du_dt[0], grad_x[0]
    return du_dt, grad_x


def input_hessian(net: MlpSurrogate, t, x, create_graph: bool = False) -> torch.Tensor:
    """Exact spatial Hessian, shape (M, d, d), symmetrised."""
    if not net.activation.smooth:
        raise UnsupportedOperationError(f"Hessian needs a smooth activation, got {net.activation.value}")
    t, x, single = as_batch(net, t, x)
    with torch.enable_grad():
        t = _with_input_grad(t)
        x = _with_input_grad(x)
        value = net(t, x)
        (grad_x,) = torch.autograd.grad(value.sum(), x, create_graph=True)
        rows = []
        for i in range(net.dim):
            if grad_x.requires_grad:
                (row,) = torch.autograd.grad(
                    grad_x[:, i].sum(), x, retain_graph=True, create_graph=create_graph, allow_unused=True
                )
            else:
                row = None
            rows.append(torch.zeros_like(x) if row is None else row)
    hessian = torch.stack(rows, dim=1)
    hessian = 0.5 * (hessian + hessian.transpose(1, 2))
    if not create_graph:
        hessian = hessian.detach()
    return hessian[0] if single else hessian


def flat_parameters(net: MlpSurrogate) -> torch.Tensor:
    return torch.cat([p.detach().reshape(-1) for p in net.parameters()])


def parameter_gradient(net: MlpSurrogate, batch_loss: torch.Tensor) -> torch.Tensor:
    """Exact gradient of a recorded scalar with respect to all parameters, flattened."""
    if batch_loss.ndim != 0:
        raise ShapeError(f"loss must be a scalar, got shape {tuple(batch_loss.shape)}")
    if batch_loss.grad_fn is None:
        raise EmptyTapeError("loss was not recorded from any network evaluation")
    params = list(net.parameters())
    grads = torch.autograd.grad(batch_loss, params, allow_unused=True)
    return torch.cat([
        (torch.zeros_like(p) if g is None else g).reshape(-1) for p, g in zip(params, grads)
    ])


class AdamState:
    """
    Adam moments, step count and hyperparameters for one parameter list.

    Wraps torch.optim.Adam; `adam_step` is the only supported way to advance it.
    """

    def __init__(
        self,
        params: Sequence[nn.Parameter],
        learning_rate: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = list(params)
        self.learning_rate = learning_rate
        self.betas = (beta1, beta2)
        self.eps = eps
        self.step_count = 0
        self.optimizer = torch.optim.Adam(self.params, lr=learning_rate, betas=self.betas, eps=eps)

    @property
    def size(self) -> int:
        return sum(p.numel() for p in self.params)

    def moments(self) -> Tuple[torch.Tensor, torch.Tensor]:
        first, second = [], []
        for p in self.params:
            state = self.optimizer.state.get(p, {})
            first.append(state.get("exp_avg", torch.zeros_like(p)).reshape(-1))
            second.append(state.get("exp_avg_sq", torch.zeros_like(p)).reshape(-1))
        return torch.cat(first), torch.cat(second)


def adam_step(state: AdamState, params: Sequence[nn.Parameter], grads: torch.Tensor) -> torch.Tensor:
    """One Adam update of `params` from the flat gradient; returns the updated flat parameters."""
    params = list(params)
    if len(params) != len(state.params) or any(p is not q for p, q in zip(params, state.params)):
        raise ShapeError("parameters do not belong to this optimiser state")
    grads = torch.as_tensor(grads, dtype=DTYPE)
    if grads.shape != (state.size,):
        raise ShapeError(f"gradient has shape {tuple(grads.shape)}, expected ({state.size},)")
    if not torch.isfinite(grads).all():
        raise NumericalAbort("non-finite gradient passed to adam_step")
    offset = 0
    for p in params:
        count = p.numel()
        p.grad = grads[offset : offset + count].view_as(p).clone()
        offset += count
    state.optimizer.step()
    state.optimizer.zero_grad(set_to_none=True)
    state.step_count += 1
    return torch.cat([p.detach().reshape(-1) for p in params])


# Checkpoint layout (little-endian):
#   "FBNN" | u16 version | u32 layer count | u32 dims[count] | u8 activation tag
#   | f64 time_scale | f64 state_scale | f64 parameters | u32 CRC32 of all preceding bytes
# Parameters run layer by layer: weight (out, in) row-major, then bias.

def save_checkpoint(net: MlpSurrogate, path) -> Path:
    path = Path(path)
    header = CHECKPOINT_MAGIC + struct.pack("<HI", CHECKPOINT_VERSION, len(net.layer_dims))
    header += struct.pack(f"<{len(net.layer_dims)}I", *net.layer_dims)
    header += struct.pack("<Bdd", net.activation.tag, net.time_scale, net.state_scale)
    blocks = []
    for layer in net.layers:
        blocks.append(layer.weight.detach().numpy().astype("<f8").ravel(order="C"))
        blocks.append(layer.bias.detach().numpy().astype("<f8"))
    payload = header + np.concatenate(blocks).tobytes()
    path.write_bytes(payload + struct.pack("<I", crc32(payload)))
    logger.info("checkpoint saved path=%s parameters=%d", path, sum(b.size for b in blocks))
    return path


def load_checkpoint(path) -> MlpSurrogate:
    data = Path(path).read_bytes()
    if len(data) < 10 or data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path}: not a surrogate checkpoint (bad magic)")
    version, count = struct.unpack_from("<HI", data, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported checkpoint version {version}")
    offset = 10
    header_end = offset + 4 * count + 17
    if len(data) < header_end + 4:
        raise CheckpointFormatError(f"{path}: truncated header")
    dims = struct.unpack_from(f"<{count}I", data, offset)
    tag, time_scale, state_scale = struct.unpack_from("<Bdd", data, offset + 4 * count)
    n_params = sum(n_out * n_in + n_out for n_in, n_out in zip(dims[:-1], dims[1:]))
    expected = header_end + 8 * n_params + 4
    if len(data) != expected:
        raise CheckpointFormatError(f"{path}: expected {expected} bytes, found {len(data)}")
    (stored_crc,) = struct.unpack_from("<I", data, expected - 4)
    if crc32(data[: expected - 4]) != stored_crc:
        raise CheckpointFormatError(f"{path}: CRC mismatch")
    activation = next((a for a, t in _ACTIVATION_TAGS.items() if t == tag), None)
    if activation is None:
        raise CheckpointFormatError(f"{path}: unknown activation tag {tag}")
    net = MlpSurrogate(dims, activation=activation, time_scale=time_scale, state_scale=state_scale)
    values = np.frombuffer(data, dtype="<f8", count=n_params, offset=header_end)
    cursor = 0
    with torch.no_grad():
        for layer in net.layers:
            for p in (layer.weight, layer.bias):
                block = values[cursor : cursor + p.numel()].reshape(tuple(p.shape))
                p.copy_(torch.from_numpy(block.astype(np.float64)))
                cursor += p.numel()
    logger.info("checkpoint loaded path=%s layers=%s", path, list(dims))
    return net
