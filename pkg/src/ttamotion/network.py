"""Three-branch forecaster: primary forecasting, scramble detection, motion repair.

Every stream runs on seed-padded sequences of length ``L = T + horizon`` so
gated sharing messages line up element-wise between branches. Parameters are
partitioned by top-level module name:

``shared``     embeddings, per-branch backbone blocks and all gated sharing units
``pri_head``   forecasting block + output map
``aux1_head``  scramble classifier
``aux2_head``  repair block + output map
"""

from __future__ import annotations

import dataclasses
import zlib
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.func import functional_call

from .attention import LEAKY_SLOPE, BlockState, SparseRelayBlock, init_relays
from .motion import MotionSequence, SampleTask, ShapeError, SkeletonTopology, make_task

PARTITIONS = ("shared", "pri_head", "aux1_head", "aux2_head")


class ContractError(RuntimeError):
    """A disabled branch was asked for, or a required branch output is missing."""


class ConfigMismatch(ValueError):
    pass


@dataclass
class ModelConfig:
    n_joints: int = 17
    obs_len: int = 25
    horizon: int = 25
    channels: int = 64
    n_shared_blocks: int = 2
    heads: int = 8
    head_dim: int = 64
    corruption_ratio: float = 0.2
    gsu_enabled: bool = True
    aux1_enabled: bool = True
    aux2_enabled: bool = True
    scale_mode: str = "sqrt_d"
    # network inputs/outputs are in units of coord_scale mm
    coord_scale: float = 100.0
    aux1_hidden: tuple[int, ...] = (256, 128, 64)

    def __post_init__(self):
        self.aux1_hidden = tuple(int(h) for h in self.aux1_hidden)
        for name in ("n_joints", "obs_len", "horizon", "channels", "n_shared_blocks", "heads", "head_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.obs_len < 2:
            raise ValueError("obs_len must be >= 2 (scrambling needs two frames)")
        if not 0 <= self.corruption_ratio < 1:
            raise ValueError("corruption_ratio must lie in [0, 1)")
        if self.scale_mode not in ("sqrt_d", "d"):
            raise ValueError(f"scale_mode must be 'sqrt_d' or 'd', got {self.scale_mode!r}")
        if self.coord_scale <= 0:
            raise ValueError("coord_scale must be positive")

    @property
    def length(self) -> int:
        return self.obs_len + self.horizon

    @property
    def aux_branches(self) -> tuple[str, ...]:
        return tuple(b for b, on in (("aux1", self.aux1_enabled), ("aux2", self.aux2_enabled)) if on)

    @property
    def branches(self) -> tuple[str, ...]:
        return ("pri",) + self.aux_branches

    @classmethod
    def full_scale(cls, **overrides) -> "ModelConfig":
        return cls(**{"channels": 512, "n_shared_blocks": 9, "heads": 8, "head_dim": 64, **overrides})

    @classmethod
    def miniature(cls, **overrides) -> "ModelConfig":
        base = dict(n_joints=3, obs_len=4, horizon=2, channels=8, n_shared_blocks=1, heads=2, head_dim=4)
        return cls(**{**base, **overrides})

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["aux1_hidden"] = list(self.aux1_hidden)
        return d


def gsu_forward(c, h_prev, W, b, U, e):
    """Gated sharing message: ``sigmoid(W c + b) * leaky_relu(U c + e) + h_prev``.

    Works on plain C-vectors or any ``(..., C)`` batch.
    """
    c, h_prev = torch.as_tensor(c), torch.as_tensor(h_prev)
    if c.shape[-1] != W.shape[-1] or h_prev.shape[-1] != W.shape[0] or U.shape != W.shape:
        raise ShapeError(f"GSU shapes disagree: c {tuple(c.shape)}, h {tuple(h_prev.shape)}, W {tuple(W.shape)}")
    gate = torch.sigmoid(F.linear(c, W, b))
    return gate * F.leaky_relu(F.linear(c, U, e), LEAKY_SLOPE) + h_prev


class GatedSharingUnit(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.gate = nn.Linear(channels, channels)
        self.transform = nn.Linear(channels, channels)

    def forward(self, src: torch.Tensor, dst: torch.Tensor) -> torch.Tensor:
        return gsu_forward(src, dst, self.gate.weight, self.gate.bias, self.transform.weight, self.transform.bias)


class BranchEmbedding(nn.Module):
    """xyz -> C, plus learned per-joint and per-frame position embeddings."""

    def __init__(self, n_joints: int, length: int, channels: int):
        super().__init__()
        self.proj = nn.Linear(3, channels)
        self.joint_pos = nn.Parameter(torch.zeros(n_joints, channels))
        self.frame_pos = nn.Parameter(torch.zeros(length, channels))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.proj(x) + self.joint_pos + self.frame_pos[:, None, :]


class SharedTrunk(nn.Module):
    def __init__(self, cfg: ModelConfig, topo: SkeletonTopology):
        super().__init__()
        L, C = cfg.length, cfg.channels
        self.embed = nn.ModuleDict({b: BranchEmbedding(cfg.n_joints, L, C) for b in cfg.branches})
        self.blocks = nn.ModuleDict({
            b: nn.ModuleList(
                SparseRelayBlock(topo, L, C, cfg.heads, cfg.head_dim, cfg.scale_mode)
                for _ in range(cfg.n_shared_blocks)
            )
            for b in cfg.branches
        })
        self.gsu = None
        if cfg.gsu_enabled and cfg.aux_branches:
            self.gsu = nn.ModuleList(
                nn.ModuleDict({
                    name: GatedSharingUnit(C)
                    for aux in cfg.aux_branches
                    for name in (f"{aux}_to_pri", f"pri_to_{aux}")
                })
                for _ in range(cfg.n_shared_blocks)
            )

    def forward(self, inputs: dict[str, torch.Tensor]) -> dict[str, torch.Tensor]:
        states = {b: init_relays(self.embed[b](x)) for b, x in inputs.items()}
        for layer in range(len(next(iter(self.blocks.values())))):
            feats = {b: s.joint_features for b, s in states.items()}
            if self.gsu is not None:
                # messages read the pre-exchange features of every branch
                units = self.gsu[layer]
                new = dict(feats)
                for aux in feats:
                    if aux == "pri":
                        continue
                    new["pri"] = units[f"{aux}_to_pri"](feats[aux], new["pri"])
                    new[aux] = units[f"pri_to_{aux}"](feats["pri"], feats[aux])
                feats = new
            states = {
                b: self.blocks[b][layer](BlockState(feats[b], s.spatial_relay, s.temporal_relay))
                for b, s in states.items()
            }
        return {b: s.joint_features for b, s in states.items()}


class CoordinateHead(nn.Module):
    """Task-specific sparse-relay block followed by a C -> 3 map (zero initialised)."""

    def __init__(self, cfg: ModelConfig, topo: SkeletonTopology):
        super().__init__()
        self.block = SparseRelayBlock(topo, cfg.length, cfg.channels, cfg.heads, cfg.head_dim, cfg.scale_mode)
        self.out = nn.Linear(cfg.channels, 3)

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        return self.out(self.block(init_relays(feats)).joint_features)


class ScrambleHead(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        sizes = [cfg.length * cfg.n_joints * cfg.channels, *cfg.aux1_hidden, 1]
        self.fc = nn.ModuleList(nn.Linear(a, b) for a, b in zip(sizes[:-1], sizes[1:]))

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        h = feats.flatten(-3)
        for i, layer in enumerate(self.fc):
            h = layer(h)
            if i < len(self.fc) - 1:
                h = F.leaky_relu(h, LEAKY_SLOPE)
        return h.squeeze(-1)


@dataclass
class ForwardOutput:
    prediction: torch.Tensor
    scramble_logit: Optional[torch.Tensor] = None
    repaired: Optional[torch.Tensor] = None

    @property
    def scramble_prob(self) -> Optional[torch.Tensor]:
        return None if self.scramble_logit is None else torch.sigmoid(self.scramble_logit)

    def require(self, name: str) -> torch.Tensor:
        value = getattr(self, name)
        if value is None:
            raise ContractError(f"output {name!r} is not available: its branch is disabled")
        return value


class MotionTTANet(nn.Module):
    def __init__(self, cfg: ModelConfig, topo: SkeletonTopology):
        super().__init__()
        if topo.n_joints != cfg.n_joints:
            raise ShapeError(f"topology has {topo.n_joints} joints, config {cfg.n_joints}")
        self.cfg, self.topo = cfg, topo
        self.shared = SharedTrunk(cfg, topo)
        self.pri_head = CoordinateHead(cfg, topo)
        self.aux1_head = ScrambleHead(cfg) if cfg.aux1_enabled else None
        self.aux2_head = CoordinateHead(cfg, topo) if cfg.aux2_enabled else None

    def _pad(self, x: torch.Tensor) -> torch.Tensor:
        seed = x[..., -1:, :, :]
        return torch.cat([x, seed.expand(*x.shape[:-3], self.cfg.horizon, *x.shape[-2:])], dim=-3)

    def forward(self, observation, scrambled=None, corrupted=None) -> ForwardOutput:
        cfg = self.cfg
        if observation.shape[-3:] != (cfg.obs_len, cfg.n_joints, 3):
            raise ShapeError(f"observation shape {tuple(observation.shape)} does not match config")
        inputs = {"pri": observation}
        if cfg.aux1_enabled:
            if scrambled is None:
                raise ContractError("scrambled input required while aux1 is enabled")
            inputs["aux1"] = scrambled
        if cfg.aux2_enabled:
            if corrupted is None:
                raise ContractError("corrupted input required while aux2 is enabled")
            inputs["aux2"] = corrupted
        for name, x in inputs.items():
            if x.shape != observation.shape:
                raise ShapeError(f"{name} input shape {tuple(x.shape)} != observation {tuple(observation.shape)}")

        feats = self.shared({b: self._pad(x) / cfg.coord_scale for b, x in inputs.items()})
        pri = feats["pri"]
        offsets = self.pri_head(pri)[..., cfg.obs_len:, :, :] * cfg.coord_scale
        out = ForwardOutput(prediction=observation[..., -1:, :, :] + offsets)
        if cfg.aux1_enabled:
            out.scramble_logit = self.aux1_head(feats["aux1"] + pri)
        if cfg.aux2_enabled:
            fix = self.aux2_head(feats["aux2"] + pri)[..., : cfg.obs_len, :, :] * cfg.coord_scale
            out.repaired = corrupted + fix
        return out


# ---------------------------------------------------------------------------
# Parameter handling


def _stable_seed(seed: int, name: str) -> int:
    return (int(seed) * 1_000_003 + zlib.crc32(name.encode())) % (2**63)


@torch.no_grad()
def reset_parameters(model: MotionTTANet, seed: int = 0) -> None:
    """Initialise every parameter from a generator keyed by (seed, parameter name).

    Keying by name keeps a branch's initial weights identical across ablation
    variants that add or drop other branches.
    """
    for name, p in model.named_parameters():
        g = torch.Generator().manual_seed(_stable_seed(seed, name))
        if name.endswith(("joint_pos", "frame_pos")):
            p.copy_(torch.randn(p.shape, generator=g, dtype=torch.float64) * 0.02)
        elif name.startswith(("pri_head.out.", "aux2_head.out.")):
            p.zero_()
        else:
            fan_in = p.shape[-1] if p.ndim > 1 else _bias_fan_in(model, name)
            bound = 1.0 / np.sqrt(fan_in)
            p.copy_((torch.rand(p.shape, generator=g, dtype=torch.float64) * 2 - 1) * bound)


def _bias_fan_in(model: nn.Module, name: str) -> int:
    weight = dict(model.named_parameters())[name.rsplit(".", 1)[0] + ".weight"]
    return weight.shape[-1]


def build_model(cfg: ModelConfig, topo: SkeletonTopology, seed: int = 0, dtype=torch.float32) -> MotionTTANet:
    model = MotionTTANet(cfg, topo)
    reset_parameters(model, seed)
    return model.to(dtype)


def partition_of(name: str) -> str:
    head = name.split(".", 1)[0]
    if head not in PARTITIONS:
        raise KeyError(f"parameter {name!r} belongs to no partition")
    return head


def partition_names(model: nn.Module) -> dict[str, list[str]]:
    groups: dict[str, list[str]] = {p: [] for p in PARTITIONS}
    for name, _ in model.named_parameters():
        groups[partition_of(name)].append(name)
    return groups


def get_params(model: nn.Module) -> dict[str, torch.Tensor]:
    """Detached copies of all parameters, keyed by name (the ParamSet)."""
    return {k: v.detach().clone() for k, v in model.named_parameters()}


@torch.no_grad()
def set_params(model: nn.Module, params: dict[str, torch.Tensor]) -> None:
    own = dict(model.named_parameters())
    if own.keys() != params.keys():
        raise KeyError("parameter names differ from the model's")
    for k, v in params.items():
        own[k].copy_(v)


def forward_with(model: MotionTTANet, params: dict[str, torch.Tensor], *args) -> ForwardOutput:
    return functional_call(model, params, args)


def params_equal(a: dict[str, torch.Tensor], b: dict[str, torch.Tensor]) -> bool:
    return a.keys() == b.keys() and all(torch.equal(a[k], b[k]) for k in a)


# ---------------------------------------------------------------------------
# Task batching and inference


@dataclass
class TaskBatch:
    observation: torch.Tensor
    target: torch.Tensor
    scrambled: torch.Tensor
    scramble_label: torch.Tensor
    corrupted: torch.Tensor

    def inputs(self):
        return self.observation, self.scrambled, self.corrupted


def collate(tasks: list[SampleTask], dtype=torch.float32) -> TaskBatch:
    def stack(attr):
        return torch.as_tensor(np.stack([getattr(t, attr).frames for t in tasks]), dtype=dtype)

    return TaskBatch(
        observation=stack("observation"),
        target=stack("target"),
        scrambled=stack("scrambled"),
        scramble_label=torch.as_tensor([t.scramble_label for t in tasks], dtype=dtype),
        corrupted=stack("corrupted"),
    )


def model_forward(model: MotionTTANet, task: SampleTask, params=None) -> ForwardOutput:
    """Run one task (unbatched in, unbatched out)."""
    dtype = next(model.parameters()).dtype
    batch = collate([task], dtype)
    out = model(*batch.inputs()) if params is None else forward_with(model, params, *batch.inputs())
    return ForwardOutput(
        prediction=out.prediction[0],
        scramble_logit=None if out.scramble_logit is None else out.scramble_logit[0],
        repaired=None if out.repaired is None else out.repaired[0],
    )


def companions(observation: MotionSequence, cfg: ModelConfig, eval_seed: int) -> SampleTask:
    """Self-supervised companions of a bare observation; the target is a seed-pose placeholder."""
    rng = np.random.default_rng(eval_seed)
    placeholder = MotionSequence(np.repeat(observation.frames[-1:], cfg.horizon, axis=0), observation.fps)
    return make_task(observation, placeholder, rng, cfg.corruption_ratio)


@torch.no_grad()
def predict_primary(model: MotionTTANet, observation: MotionSequence, eval_seed: int = 0,
                    params=None) -> MotionSequence:
    if observation.n_frames != model.cfg.obs_len:
        raise ShapeError(f"observation has {observation.n_frames} frames, model expects {model.cfg.obs_len}")
    task = companions(observation, model.cfg, eval_seed)
    out = model_forward(model, task, params)
    return MotionSequence(out.prediction.double().numpy(), observation.fps)


# ---------------------------------------------------------------------------
# Checkpoints

CKPT_FORMAT = "ttamotion-ckpt-v1"


def save_checkpoint(path, model: MotionTTANet, meta: Optional[dict] = None) -> None:
    payload = {
        "format": CKPT_FORMAT,
        "config": model.cfg.to_dict(),
        "topology": [model.topo.n_joints, [list(b) for b in model.topo.bones]],
        "dtype": str(next(model.parameters()).dtype),
        "state": {k: v.detach().clone() for k, v in model.state_dict().items()},
        "meta": meta or {},
    }
    torch.save(payload, path)


def config_diff(a: ModelConfig, b: ModelConfig) -> dict[str, tuple]:
    da, db = a.to_dict(), b.to_dict()
    return {k: (da[k], db[k]) for k in da if da[k] != db[k]}


def load_checkpoint(path, expected: Optional[ModelConfig] = None) -> tuple[MotionTTANet, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("format") != CKPT_FORMAT:
        raise ValueError(f"{path}: not a {CKPT_FORMAT} checkpoint")
    cfg = ModelConfig(**payload["config"])
    if expected is not None:
        diff = config_diff(cfg, expected)
        if diff:
            lines = ", ".join(f"{k}: checkpoint={v[0]!r} requested={v[1]!r}" for k, v in diff.items())
            raise ConfigMismatch(f"model config mismatch ({lines})")
    n, bones = payload["topology"]
    topo = SkeletonTopology(n, tuple(tuple(b) for b in bones))
    model = MotionTTANet(cfg, topo)
    dtype = getattr(torch, payload["dtype"].replace("torch.", ""))
    model = model.to(dtype)
    model.load_state_dict(payload["state"])
    return model, payload["meta"]
