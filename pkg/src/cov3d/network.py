"""Configurable 3D residual classification network.

The topology mirrors an 18-layer video ResNet: a (3,7,7) stem convolution
with stride (1,2,2), four stages of basic residual blocks (stage 1 keeps
resolution, stages 2-4 halve every axis), global average pooling, then a
two-layer head with a ReLU and dropout in between. Dropout also follows each
stage. Widths, block counts, dropout rates and the head layout are all
configuration so the same code scales from desk-size to full-size models.

Checkpoints use a self-describing container (JSON header + named little-endian
float32 blobs) so round-trips are bit-exact and independent of the framework's
own serialization.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .errors import ConfigError, DataError, StateError

HEAD_MODES = ("covid_only", "severity_only", "dual")
CHECKPOINT_MAGIC = b"C3DCKPT1"
_STEM_DOWN = (1, 2, 2)
_N_STAGES = 4


@dataclass(frozen=True)
class NetworkConfig:
    input_dims: tuple[int, int, int]  # (D, H, W)
    stage_widths: tuple[int, int, int, int] = (64, 128, 256, 512)
    blocks_per_stage: tuple[int, int, int, int] = (2, 2, 2, 2)
    stage_dropout: tuple[float, float, float, float] = (0.1, 0.1, 0.1, 0.1)
    head_hidden: int = 128
    head_dropout: float = 0.5
    head_mode: str = "dual"

    def __post_init__(self):
        problems = []
        if len(self.input_dims) != 3:
            problems.append("input_dims: must be (D, H, W)")
        else:
            d, h, w = self.input_dims
            # stem halves H/W, stages 2-4 halve every axis
            if d < 8 or h < 16 or w < 16:
                problems.append(
                    f"input_dims: {d}x{h}x{w} too small for the downsampling ladder "
                    "(need at least 8x16x16)"
                )
        for name, values in (("stage_widths", self.stage_widths),
                             ("blocks_per_stage", self.blocks_per_stage)):
            if len(values) != _N_STAGES or any(v < 1 for v in values):
                problems.append(f"{name}: need {_N_STAGES} integers >= 1")
        if len(self.stage_dropout) != _N_STAGES or any(
            not (0.0 <= p < 1.0) for p in self.stage_dropout
        ):
            problems.append("stage_dropout: need 4 probabilities in [0, 1)")
        if self.head_hidden < 1:
            problems.append("head_hidden: must be >= 1")
        if not (0.0 <= self.head_dropout < 1.0):
            problems.append("head_dropout: must be in [0, 1)")
        if self.head_mode not in HEAD_MODES:
            problems.append(f"head_mode: unknown {self.head_mode!r}")
        if problems:
            raise ConfigError("; ".join(problems))

    @property
    def n_outputs(self) -> int:
        return {"covid_only": 1, "severity_only": 5, "dual": 6}[self.head_mode]

    @property
    def has_covid_head(self) -> bool:
        return self.head_mode in ("covid_only", "dual")

    @property
    def has_severity_head(self) -> bool:
        return self.head_mode in ("severity_only", "dual")

    def to_dict(self) -> dict:
        return {
            "input_dims": list(self.input_dims),
            "stage_widths": list(self.stage_widths),
            "blocks_per_stage": list(self.blocks_per_stage),
            "stage_dropout": list(self.stage_dropout),
            "head_hidden": self.head_hidden,
            "head_dropout": self.head_dropout,
            "head_mode": self.head_mode,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "NetworkConfig":
        return cls(
            input_dims=tuple(data["input_dims"]),
            stage_widths=tuple(data["stage_widths"]),
            blocks_per_stage=tuple(data["blocks_per_stage"]),
            stage_dropout=tuple(data["stage_dropout"]),
            head_hidden=int(data["head_hidden"]),
            head_dropout=float(data["head_dropout"]),
            head_mode=data["head_mode"],
        )


@dataclass
class HeadOutputs:
    """Batch-major head outputs: covid logits (N,1) and/or severity logits (N,5)."""

    x: torch.Tensor | None = None
    z: torch.Tensor | None = None


class BasicBlock3d(nn.Module):
    def __init__(self, c_in: int, c_out: int, stride: int):
        super().__init__()
        self.conv1 = nn.Conv3d(c_in, c_out, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm3d(c_out)
        self.conv2 = nn.Conv3d(c_out, c_out, 3, stride=1, padding=1, bias=False)
        self.bn2 = nn.BatchNorm3d(c_out)
        self.downsample = None
        if stride != 1 or c_in != c_out:
            self.downsample = nn.Sequential(
                nn.Conv3d(c_in, c_out, 1, stride=stride, bias=False),
                nn.BatchNorm3d(c_out),
            )

    def forward(self, x):
        identity = x if self.downsample is None else self.downsample(x)
        out = torch.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return torch.relu(out + identity)


class Cov3dNetwork(nn.Module):
    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        w = config.stage_widths
        self.stem = nn.Sequential(
            nn.Conv3d(1, w[0], (3, 7, 7), stride=_STEM_DOWN, padding=(1, 3, 3), bias=False),
            nn.BatchNorm3d(w[0]),
            nn.ReLU(inplace=True),
        )
        stages = []
        c_in = w[0]
        for i in range(_N_STAGES):
            blocks = []
            for b in range(config.blocks_per_stage[i]):
                stride = 2 if (i > 0 and b == 0) else 1
                blocks.append(BasicBlock3d(c_in, w[i], stride))
                c_in = w[i]
            blocks.append(nn.Dropout(config.stage_dropout[i]))
            stages.append(nn.Sequential(*blocks))
        self.stages = nn.Sequential(*stages)
        self.head = nn.Sequential(
            nn.Linear(w[-1], config.head_hidden),
            nn.ReLU(inplace=True),
            nn.Dropout(config.head_dropout),
            nn.Linear(config.head_hidden, config.n_outputs),
        )
        self._recorded: HeadOutputs | None = None

    def forward(self, volumes: torch.Tensor) -> HeadOutputs:
        if volumes.ndim != 5 or volumes.shape[1] != 1:
            raise DataError(f"shape error: expected (N, 1, D, H, W) input, got {tuple(volumes.shape)}")
        if tuple(volumes.shape[2:]) != tuple(self.config.input_dims):
            raise DataError(
                f"shape error: input dims {tuple(volumes.shape[2:])} do not match "
                f"configured {tuple(self.config.input_dims)}"
            )
        features = self.stages(self.stem(volumes))
        pooled = features.mean(dim=(2, 3, 4))
        out = self.head(pooled)
        if self.config.head_mode == "covid_only":
            return HeadOutputs(x=out)
        if self.config.head_mode == "severity_only":
            return HeadOutputs(z=out)
        return HeadOutputs(x=out[:, :1], z=out[:, 1:])

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def _deterministic_init(network: Cov3dNetwork, seed: int) -> None:
    gen = torch.Generator().manual_seed(int(seed))
    for module in network.modules():
        if isinstance(module, nn.Conv3d):
            fan_out = module.out_channels * math.prod(module.kernel_size)
            module.weight.data.normal_(0.0, math.sqrt(2.0 / fan_out), generator=gen)
        elif isinstance(module, nn.BatchNorm3d):
            module.weight.data.fill_(1.0)
            module.bias.data.zero_()
        elif isinstance(module, nn.Linear):
            fan_in = module.in_features
            module.weight.data.normal_(0.0, 1.0 / math.sqrt(fan_in), generator=gen)
            module.bias.data.zero_()
    # neutral start: zero logits, so p = 0.5 and the severity distribution is
    # uniform on the first forward pass
    final = network.head[-1]
    final.weight.data.zero_()
    final.bias.data.zero_()


def build_network(config: NetworkConfig, seed: int) -> Cov3dNetwork:
    """Construct and deterministically initialize a network for a fixed seed."""
    network = Cov3dNetwork(config)
    _deterministic_init(network, seed)
    return network


def _as_batch_tensor(volumes, dtype=torch.float32) -> torch.Tensor:
    if isinstance(volumes, torch.Tensor):
        batch = volumes
    elif isinstance(volumes, np.ndarray):
        batch = torch.from_numpy(np.ascontiguousarray(volumes))
    else:  # sequence of PreprocessedVolume or arrays
        arrays = [v.voxels if hasattr(v, "voxels") else np.asarray(v) for v in volumes]
        batch = torch.from_numpy(np.ascontiguousarray(np.stack(arrays, axis=0)))
    if batch.ndim == 4:
        batch = batch.unsqueeze(1)
    return batch.to(dtype)


def run_forward(network: Cov3dNetwork, volumes, mode: str = "eval") -> HeadOutputs:
    """Run a batch through the network.

    Eval mode is deterministic (dropout off, running statistics) and builds no
    autograd graph. Train mode records the outputs so ``run_backward`` can
    push upstream gradients through them.
    """
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode: expected 'train' or 'eval', got {mode!r}")
    batch = _as_batch_tensor(volumes)
    if mode == "train":
        network.train()
        outputs = network(batch)
        network._recorded = outputs
        return outputs
    network.eval()
    with torch.no_grad():
        return network(batch)


def run_backward(network: Cov3dNetwork, grad_x=None, grad_z=None) -> dict[str, torch.Tensor]:
    """Backpropagate upstream head gradients; returns per-parameter gradients.

    ``grad_x``/``grad_z`` match the shapes of the recorded head outputs.
    Requires a preceding train-mode forward; the recording is consumed.
    """
    recorded = network._recorded
    if recorded is None:
        raise StateError("state error: backward called without a recorded forward pass")
    network._recorded = None
    tensors, grads = [], []
    if recorded.x is not None and grad_x is not None:
        tensors.append(recorded.x)
        grads.append(torch.as_tensor(grad_x, dtype=recorded.x.dtype).reshape(recorded.x.shape))
    if recorded.z is not None and grad_z is not None:
        tensors.append(recorded.z)
        grads.append(torch.as_tensor(grad_z, dtype=recorded.z.dtype).reshape(recorded.z.shape))
    if not tensors:
        raise ConfigError("backward: no upstream gradients supplied for the recorded heads")
    network.zero_grad(set_to_none=True)
    torch.autograd.backward(tensors, grads)
    return {
        name: (param.grad.detach().clone() if param.grad is not None
               else torch.zeros_like(param))
        for name, param in network.named_parameters()
    }


def adapt_first_conv(weights):
    """Collapse a 3-channel stem filter to 1 channel by summing the channels."""
    is_torch = isinstance(weights, torch.Tensor)
    arr = weights if is_torch else np.asarray(weights)
    if arr.ndim != 5:
        raise DataError(f"shape error: expected a 5D conv filter, got ndim={arr.ndim}")
    if arr.shape[1] != 3:
        raise DataError(f"shape error: expected in_channels=3, got {arr.shape[1]}")
    if is_torch:
        return arr.sum(dim=1, keepdim=True)
    return arr.sum(axis=1, keepdims=True)


# --- checkpoint container ----------------------------------------------------

@dataclass
class CheckpointMeta:
    config: NetworkConfig
    seed: int
    epoch: int
    extra: dict = field(default_factory=dict)


def save_checkpoint(path, network: Cov3dNetwork, *, seed: int, epoch: int,
                    extra: dict | None = None) -> None:
    """Write config echo, named parameter/buffer blobs, seed and epoch."""
    state = network.state_dict()
    tensors = []
    blobs = []
    for name, tensor in state.items():
        t = tensor.detach().cpu()
        kind = "i64" if t.dtype in (torch.int64, torch.int32) else "f4"
        data = t.to(torch.float32).numpy().astype("<f4")
        tensors.append({"name": name, "shape": list(t.shape), "kind": kind})
        blobs.append(np.ascontiguousarray(data).tobytes())
    header = {
        "format": 1,
        "config": network.config.to_dict(),
        "seed": int(seed),
        "epoch": int(epoch),
        "extra": extra or {},
        "tensors": tensors,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<I", len(header_bytes)))
            fh.write(header_bytes)
            for blob in blobs:
                fh.write(blob)
        tmp.replace(path)
    except OSError as exc:
        tmp.unlink(missing_ok=True)
        raise DataError(f"i/o error: cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path) -> tuple[Cov3dNetwork, CheckpointMeta]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"i/o error: cannot read checkpoint {path}: {exc}") from exc
    if len(raw) < len(CHECKPOINT_MAGIC) + 4 or raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise DataError(f"format error: {path} is not a checkpoint file")
    offset = len(CHECKPOINT_MAGIC)
    (header_len,) = struct.unpack_from("<I", raw, offset)
    offset += 4
    try:
        header = json.loads(raw[offset:offset + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"format error: corrupt checkpoint header in {path}") from exc
    offset += header_len

    config = NetworkConfig.from_dict(header["config"])
    network = Cov3dNetwork(config)
    state = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        nbytes = count * 4
        if offset + nbytes > len(raw):
            raise DataError(f"length error: truncated checkpoint payload in {path}")
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(entry["shape"])
        offset += nbytes
        tensor = torch.from_numpy(arr.copy())
        if entry["kind"] == "i64":
            tensor = tensor.to(torch.int64)
        state[entry["name"]] = tensor
    if offset != len(raw):
        raise DataError(f"length error: {len(raw) - offset} trailing bytes in {path}")
    network.load_state_dict(state)
    meta = CheckpointMeta(config=config, seed=int(header["seed"]),
                          epoch=int(header["epoch"]), extra=header.get("extra", {}))
    return network, meta
