"""
Layer module for the differentiable building blocks shared by all networks.
Provides the layer-spec factory, shape-checked forward, a finite-difference
gradient checker and the versioned parameter-map checkpoint format.
"""

import os
import copy
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Union

import torch
from torch import nn

from .config import CHECKPOINT_FORMAT_VERSION
from .errors import ShapeError, DivergenceError, ParameterError, DataError

logger = logging.getLogger(__name__)

LAYER_KINDS = ("Conv1D", "FC", "BatchNorm", "ReLU", "Tanh", "Softmax", "LSTM", "BiLSTM", "Embedding")

# Kinds whose in/out feature sizes must be given
_SIZED_KINDS = ("Conv1D", "FC", "BatchNorm", "LSTM", "BiLSTM", "Embedding")


# =============================================================================
# INITIALIZED BUILDING BLOCKS
# =============================================================================

def conv1d(in_channels: int, out_channels: int, kernel_size: int = 1, padding: Optional[int] = None,
           dilation: int = 1, bias: bool = True) -> nn.Conv1d:
    """
    Conv1d with uniform Xavier weights and zero bias.

    Padding defaults to the "same" amount for odd kernels.
    """
    if padding is None:
        padding = dilation * (kernel_size - 1) // 2
    layer = nn.Conv1d(in_channels, out_channels, kernel_size, padding=padding, dilation=dilation, bias=bias)
    nn.init.xavier_uniform_(layer.weight)
    if bias:
        nn.init.zeros_(layer.bias)
    return layer


def linear(in_features: int, out_features: int, bias: bool = True) -> nn.Linear:
    """Linear layer with uniform Xavier weights and zero bias."""
    layer = nn.Linear(in_features, out_features, bias=bias)
    nn.init.xavier_uniform_(layer.weight)
    if bias:
        nn.init.zeros_(layer.bias)
    return layer


def init_recurrent(module: Union[nn.LSTM, nn.LSTMCell]) -> None:
    """Xavier input weights, orthogonal recurrent weights, zero biases."""
    for name, param in module.named_parameters():
        if "weight_ih" in name:
            nn.init.xavier_uniform_(param)
        elif "weight_hh" in name:
            # one orthogonal block per gate
            for gate in param.data.chunk(4, dim=0):
                nn.init.orthogonal_(gate)
        elif "bias" in name:
            nn.init.zeros_(param)


def lstm(input_size: int, hidden_size: int, bidirectional: bool = False) -> nn.LSTM:
    """Single-layer batch-first LSTM with the recurrent init applied."""
    layer = nn.LSTM(input_size, hidden_size, num_layers=1, batch_first=True, bidirectional=bidirectional)
    init_recurrent(layer)
    return layer


def lstm_cell(input_size: int, hidden_size: int) -> nn.LSTMCell:
    """LSTMCell with the recurrent init applied."""
    cell = nn.LSTMCell(input_size, hidden_size)
    init_recurrent(cell)
    return cell


def time_mask(lengths: torch.Tensor, max_len: int, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """(B, 1, max_len) mask, 1 on valid steps and 0 on padding."""
    steps = torch.arange(max_len, device=lengths.device)
    return (steps[None, :] < lengths[:, None]).unsqueeze(1).to(dtype)


def masked(x: torch.Tensor, mask: Optional[torch.Tensor]) -> torch.Tensor:
    """Zero the padded steps of a (B, C, T) tensor, so a conv sees what zero padding would give."""
    return x if mask is None else x * mask


class MaskedBatchNorm1d(nn.BatchNorm1d):
    """
    BatchNorm1d over (B, C, T) whose training statistics skip padded steps.

    Without a mask, or in eval mode, it is plain BatchNorm1d. The state
    dict layout is unchanged.
    """

    def forward(self, x: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        if mask is None or not self.training:
            return super().forward(x)

        count = mask.sum().clamp(min=1.0)
        mean = (x * mask).sum(dim=(0, 2)) / count
        var = ((x - mean[None, :, None]).pow(2) * mask).sum(dim=(0, 2)) / count
        if self.track_running_stats:
            with torch.no_grad():
                self.num_batches_tracked += 1
                momentum = self.momentum if self.momentum is not None else 1.0 / float(self.num_batches_tracked)
                unbiased = var * count / (count - 1).clamp(min=1.0)
                self.running_mean.mul_(1 - momentum).add_(momentum * mean)
                self.running_var.mul_(1 - momentum).add_(momentum * unbiased)

        y = (x - mean[None, :, None]) / torch.sqrt(var[None, :, None] + self.eps)
        if self.affine:
            y = y * self.weight[None, :, None] + self.bias[None, :, None]
        return y


def check_finite(tensor: torch.Tensor, where: str) -> torch.Tensor:
    """Raise DivergenceError if a tensor holds NaN or Inf."""
    if not torch.isfinite(tensor).all():
        raise DivergenceError(f"non-finite values in {where}")
    return tensor


# =============================================================================
# LAYER SPECS
# =============================================================================

@dataclass(frozen=True)
class LayerSpec:
    """
    Declarative description of one layer.

    ``in_features``/``out_features`` are channels for Conv1D and BatchNorm
    (out is ignored), sizes for FC, input/hidden size for LSTM and BiLSTM
    and vocabulary/embedding size for Embedding.
    """
    kind: str
    in_features: int = 0
    out_features: int = 0
    kernel_size: int = 1
    padding: int = 0
    dilation: int = 1
    bias: bool = True
    momentum: float = 0.1

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ParameterError(f"unknown layer kind {self.kind!r}; expected one of {LAYER_KINDS}")
        if self.kind in _SIZED_KINDS and self.in_features <= 0:
            raise ParameterError(f"{self.kind} needs in_features > 0")
        if self.kind in ("Conv1D", "FC", "LSTM", "BiLSTM", "Embedding") and self.out_features <= 0:
            raise ParameterError(f"{self.kind} needs out_features > 0")
        if self.kernel_size <= 0 or self.dilation <= 0 or self.padding < 0:
            raise ParameterError("kernel_size and dilation must be > 0, padding >= 0")


def build_layer(spec: LayerSpec) -> nn.Module:
    """
    Instantiate the torch module for a spec with the project's init scheme.

    Args:
        spec: Layer description

    Returns:
        Initialized nn.Module
    """
    kind = spec.kind
    if kind == "Conv1D":
        return conv1d(spec.in_features, spec.out_features, spec.kernel_size,
                      padding=spec.padding, dilation=spec.dilation, bias=spec.bias)
    if kind == "FC":
        return linear(spec.in_features, spec.out_features, bias=spec.bias)
    if kind == "BatchNorm":
        return nn.BatchNorm1d(spec.in_features, momentum=spec.momentum)
    if kind == "ReLU":
        return nn.ReLU()
    if kind == "Tanh":
        return nn.Tanh()
    if kind == "Softmax":
        return nn.Softmax(dim=-1)
    if kind in ("LSTM", "BiLSTM"):
        return lstm(spec.in_features, spec.out_features, bidirectional=(kind == "BiLSTM"))
    embedding = nn.Embedding(spec.in_features, spec.out_features)
    nn.init.xavier_uniform_(embedding.weight)
    return embedding


class Layer:
    """A spec together with its module; calling it runs the checked forward."""

    def __init__(self, spec: LayerSpec, module: Optional[nn.Module] = None):
        self.spec = spec
        self.module = module if module is not None else build_layer(spec)

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        return forward(self, x)

    def train(self, mode: bool = True) -> "Layer":
        self.module.train(mode)
        return self

    def eval(self) -> "Layer":
        return self.train(False)


def _expected_input_shape(spec: LayerSpec, x: torch.Tensor) -> Optional[tuple]:
    """Expected input shape (None = free axis) or None if x is compatible."""
    kind = spec.kind
    if kind == "Conv1D":
        if x.dim() not in (2, 3) or x.shape[-2] != spec.in_features:
            return (None, spec.in_features, None)
        span = spec.dilation * (spec.kernel_size - 1) + 1
        if x.shape[-1] + 2 * spec.padding < span:
            return (None, spec.in_features, span - 2 * spec.padding)
    elif kind == "BatchNorm":
        if x.dim() not in (2, 3) or x.shape[1] != spec.in_features:
            return (None, spec.in_features, None)
    elif kind == "FC":
        if x.dim() < 1 or x.shape[-1] != spec.in_features:
            return (None, spec.in_features)
    elif kind in ("LSTM", "BiLSTM"):
        if x.dim() not in (2, 3) or x.shape[-1] != spec.in_features:
            return (None, None, spec.in_features)
    elif kind == "Embedding":
        if x.dtype not in (torch.int32, torch.int64):
            return ("integer labels",)
        if x.numel() and (int(x.min()) < 0 or int(x.max()) >= spec.in_features):
            return (f"labels in [0, {spec.in_features})",)
    return None


def forward(layer: Layer, x: torch.Tensor) -> torch.Tensor:
    """
    Apply one layer with shape and finiteness checks.

    Conv1D takes (C, T) or (N, C, T); BatchNorm (N, C) or (N, C, T);
    LSTM/BiLSTM take (T, F) or (N, T, F) and return the output sequence;
    Softmax normalizes the last axis.

    Args:
        layer: Layer to apply
        x: Input tensor

    Returns:
        Output tensor

    Raises:
        ShapeError: Input incompatible with the layer (both shapes reported)
        DivergenceError: Output contains NaN or Inf
    """
    spec = layer.spec
    expected = _expected_input_shape(spec, x)
    if expected is not None:
        raise ShapeError(f"{spec.kind} input incompatible", expected, tuple(x.shape))

    if spec.kind in ("LSTM", "BiLSTM"):
        unbatched = x.dim() == 2
        out, _ = layer.module(x.unsqueeze(0) if unbatched else x)
        out = out.squeeze(0) if unbatched else out
    else:
        out = layer.module(x)
    return check_finite(out, spec.kind)


# =============================================================================
# GRADIENT CHECK
# =============================================================================

@dataclass
class GradCheckReport:
    """Outcome of a central finite-difference gradient check."""
    max_rel_error_params: float = 0.0
    max_rel_error_input: float = 0.0
    tol: float = 1e-3
    resampled: int = 0
    notes: list = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return max(self.max_rel_error_params, self.max_rel_error_input)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def _rel_error(analytic: torch.Tensor, numeric: torch.Tensor, floor: float = 1e-3) -> float:
    if analytic.numel() == 0:
        return 0.0
    denom = torch.maximum(torch.maximum(analytic.abs(), numeric.abs()), torch.full_like(analytic, floor))
    return float(((analytic - numeric).abs() / denom).max())


def grad_check(layer: Union[Layer, LayerSpec], x: torch.Tensor, eps: float = 1e-5,
               tol: float = 1e-3, seed: int = 0) -> GradCheckReport:
    """
    Compare autograd gradients against central finite differences.

    The check runs in float64 on a private copy of the layer. The scalar
    objective is the output projected onto a fixed random direction.
    Inputs sitting on the ReLU kink are redrawn and noted.

    Args:
        layer: Layer (or spec, built fresh) to check
        x: Probe input
        eps: Finite-difference step in (0, 1e-2]
        tol: Pass threshold for the max relative error
        seed: Seed for the projection direction and redraws

    Returns:
        GradCheckReport for parameters and (floating) inputs

    Raises:
        ParameterError: eps outside (0, 1e-2]
    """
    if not 0 < eps <= 1e-2:
        raise ParameterError(f"eps must be in (0, 1e-2], got {eps}")
    if isinstance(layer, LayerSpec):
        layer = Layer(layer)

    twin = Layer(layer.spec, copy.deepcopy(layer.module).double())
    twin.module.train(layer.module.training)
    generator = torch.Generator().manual_seed(seed)
    report = GradCheckReport(tol=tol)

    is_float = torch.is_floating_point(x)
    x = x.detach().double().clone() if is_float else x.detach().clone()

    if layer.spec.kind == "ReLU":
        near_kink = x.abs() <= 2 * eps
        while near_kink.any():
            count = int(near_kink.sum())
            report.resampled += count
            x[near_kink] = torch.randn(count, generator=generator, dtype=x.dtype)
            near_kink = x.abs() <= 2 * eps
        if report.resampled:
            report.notes.append(f"redrew {report.resampled} inputs sitting on the ReLU kink")

    with torch.no_grad():
        direction = torch.randn(forward(twin, x).shape, generator=generator, dtype=torch.float64)

    def objective() -> torch.Tensor:
        return (forward(twin, x) * direction).sum()

    params = [p for p in twin.module.parameters() if p.requires_grad]
    if is_float:
        x.requires_grad_(True)
    twin.module.zero_grad()
    objective().backward()
    analytic_params = [p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p) for p in params]
    analytic_input = x.grad.detach().clone() if is_float else None

    def numeric_grad(tensor: torch.Tensor) -> torch.Tensor:
        grad = torch.zeros_like(tensor)
        flat = tensor.data.view(-1)
        out = grad.view(-1)
        with torch.no_grad():
            for i in range(flat.numel()):
                original = float(flat[i])
                flat[i] = original + eps
                plus = float(objective())
                flat[i] = original - eps
                minus = float(objective())
                flat[i] = original
                out[i] = (plus - minus) / (2 * eps)
        return grad

    for param, analytic in zip(params, analytic_params):
        report.max_rel_error_params = max(report.max_rel_error_params,
                                          _rel_error(analytic, numeric_grad(param)))
    if is_float:
        x.requires_grad_(False)
        report.max_rel_error_input = _rel_error(analytic_input, numeric_grad(x))

    logger.debug(f"grad_check {layer.spec.kind}: params {report.max_rel_error_params:.2e}, "
                 f"input {report.max_rel_error_input:.2e}")
    return report


# =============================================================================
# CHECKPOINTS
# =============================================================================

def save_checkpoint(path: Union[str, Path], parameters: dict, meta: Optional[dict] = None) -> Path:
    """
    Write a named parameter map with shapes and a format-version header.

    The file is written next to its destination and moved into place so a
    crash never leaves a partial checkpoint.

    Args:
        path: Destination file
        parameters: name -> tensor (e.g. a state_dict)
        meta: Extra JSON-compatible metadata (config hash, seed, epoch...)

    Returns:
        Path written
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = {name: value.detach().cpu() for name, value in parameters.items()}
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "parameters": tensors,
        "shapes": {name: list(t.shape) for name, t in tensors.items()},
        "meta": meta or {},
    }
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)
    logger.info(f"Saved checkpoint {path} ({len(tensors)} tensors)")
    return path


def load_checkpoint(path: Union[str, Path]) -> dict:
    """
    Read a checkpoint written by save_checkpoint.

    Returns:
        Dict with "parameters", "shapes" and "meta"

    Raises:
        DataError: Missing file, wrong version or shape header mismatch
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("format_version") if isinstance(payload, dict) else None
    if version != CHECKPOINT_FORMAT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint format version {version}")
    for name, tensor in payload["parameters"].items():
        if list(tensor.shape) != list(payload["shapes"].get(name, [])):
            raise DataError(f"{path}: shape header mismatch for {name}")
    return payload


def apply_parameters(module: nn.Module, parameters: dict[str, Any], prefix: str = "") -> tuple[list, list]:
    """
    Copy a named parameter map into a module, non-strictly.

    Args:
        module: Target module
        parameters: name -> tensor
        prefix: Only names starting with this are used (prefix stripped)

    Returns:
        (missing names, unexpected names)

    Raises:
        ShapeError: A name matches but its shape does not
    """
    if prefix:
        parameters = {k[len(prefix):]: v for k, v in parameters.items() if k.startswith(prefix)}
    own = module.state_dict()
    for name, value in parameters.items():
        if name in own and tuple(own[name].shape) != tuple(value.shape):
            raise ShapeError(f"parameter {name}", tuple(own[name].shape), tuple(value.shape))
    result = module.load_state_dict(parameters, strict=False)
    return list(result.missing_keys), list(result.unexpected_keys)
