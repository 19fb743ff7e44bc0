"""Masked attention and the spatial / temporal sparse-relay blocks.

Feature layout inside a block: joint features ``(B, L, N, C)``, one spatial
relay per frame ``(B, L, C)`` and one temporal relay per joint trajectory
``(B, N, C)``. The relay token is always the last key column of a mask.
"""

from __future__ import annotations

import math
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .motion import ShapeError, SkeletonTopology

LEAKY_SLOPE = 0.2


class BlockState(NamedTuple):
    joint_features: torch.Tensor
    spatial_relay: torch.Tensor
    temporal_relay: torch.Tensor


def init_relays(joint_features: torch.Tensor) -> BlockState:
    """Relays start as mean-pooled features: over joints per frame, over frames per joint."""
    return BlockState(joint_features, joint_features.mean(dim=-2), joint_features.mean(dim=-3))


def attention_scale(head_dim: int, scale_mode: str = "sqrt_d") -> float:
    if scale_mode == "sqrt_d":
        return math.sqrt(head_dim)
    if scale_mode == "d":
        return float(head_dim)
    raise ValueError(f"unknown scale_mode {scale_mode!r}")


def masked_attention(
    queries: torch.Tensor,
    keys: torch.Tensor,
    values: torch.Tensor,
    mask: torch.Tensor,
    scale: float,
    return_weights: bool = False,
):
    """Softmax attention restricted to ``mask``.

    ``queries`` is ``(..., Q, d)``, ``keys``/``values`` are ``(..., K, d)`` and
    ``mask`` is a ``(Q, K)`` boolean array of permitted keys. Disallowed keys get
    a weight of exactly zero.
    """
    mask = torch.as_tensor(mask, dtype=torch.bool, device=queries.device)
    if scale <= 0:
        raise ValueError(f"scale must be positive, got {scale}")
    if mask.shape[-2:] != (queries.shape[-2], keys.shape[-2]):
        raise ShapeError(f"mask {tuple(mask.shape)} does not match Q={queries.shape[-2]}, K={keys.shape[-2]}")
    if not bool(mask.any(dim=-1).all()):
        raise ValueError("every query needs at least one permitted key")
    scores = queries @ keys.transpose(-1, -2) / scale
    scores = scores.masked_fill(~mask, float("-inf"))
    weights = torch.softmax(scores, dim=-1)
    out = weights @ values
    return (out, weights) if return_weights else out


def build_spatial_masks(topo: SkeletonTopology) -> tuple[torch.Tensor, torch.Tensor]:
    """Joint i sees itself, its skeletal neighbours and the relay; the relay sees everything."""
    n = topo.n_joints
    joint_mask = torch.zeros(n, n + 1, dtype=torch.bool)
    for i in range(n):
        joint_mask[i, i] = True
        for j in topo.neighbors[i]:
            joint_mask[i, j] = True
    joint_mask[:, n] = True
    relay_mask = torch.ones(1, n + 1, dtype=torch.bool)
    return joint_mask, relay_mask


def build_temporal_masks(length: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Frame i sees frames i-1, i, i+1 (clipped) and the relay; the relay sees everything."""
    if length < 1:
        raise ValueError(f"length must be >= 1, got {length}")
    idx = torch.arange(length)
    band = (idx[:, None] - idx[None, :]).abs() <= 1
    frame_mask = torch.cat([band, torch.ones(length, 1, dtype=torch.bool)], dim=1)
    relay_mask = torch.ones(1, length + 1, dtype=torch.bool)
    return frame_mask, relay_mask


class HeadProjections(nn.Module):
    """Per-head query/key/value maps C -> H*d plus the H*d -> C output projection."""

    def __init__(self, channels: int, heads: int, head_dim: int):
        super().__init__()
        self.heads, self.head_dim = heads, head_dim
        self.w_q = nn.Linear(channels, heads * head_dim, bias=False)
        self.w_k = nn.Linear(channels, heads * head_dim, bias=False)
        self.w_v = nn.Linear(channels, heads * head_dim, bias=False)
        self.w_o = nn.Linear(heads * head_dim, channels)

    def split(self, x: torch.Tensor) -> torch.Tensor:
        # (..., M, H*d) -> (..., H, M, d)
        return x.unflatten(-1, (self.heads, self.head_dim)).transpose(-2, -3)

    def merge(self, x: torch.Tensor) -> torch.Tensor:
        return self.w_o(x.transpose(-2, -3).flatten(-2))


class SparseRelayAttention(nn.Module):
    """Sparse node attention plus a relay attention along one token axis.

    Both sub-attentions read the same input: nodes attend to their masked
    neighbourhood and the relay, the relay attends to itself and all nodes.
    """

    def __init__(self, channels, heads, head_dim, node_mask, relay_mask, scale_mode="sqrt_d"):
        super().__init__()
        self.node = HeadProjections(channels, heads, head_dim)
        self.relay = HeadProjections(channels, heads, head_dim)
        self.register_buffer("node_mask", node_mask, persistent=False)
        self.register_buffer("relay_mask", relay_mask, persistent=False)
        self.scale = attention_scale(head_dim, scale_mode)

    def forward(self, nodes: torch.Tensor, relay: torch.Tensor, return_weights: bool = False):
        tokens = torch.cat([nodes, relay.unsqueeze(-2)], dim=-2)
        p = self.node
        out_n, w_n = masked_attention(
            p.split(p.w_q(nodes)), p.split(p.w_k(tokens)), p.split(p.w_v(tokens)),
            self.node_mask, self.scale, return_weights=True,
        )
        p = self.relay
        out_r, w_r = masked_attention(
            p.split(p.w_q(relay.unsqueeze(-2))), p.split(p.w_k(tokens)), p.split(p.w_v(tokens)),
            self.relay_mask, self.scale, return_weights=True,
        )
        new_nodes = self.node.merge(out_n)
        new_relay = self.relay.merge(out_r).squeeze(-2)
        if return_weights:
            return new_nodes, new_relay, (w_n, w_r)
        return new_nodes, new_relay


class SparseRelayBlock(nn.Module):
    """Residual block that sums a spatial and a temporal sparse-relay transformer."""

    def __init__(self, topo: SkeletonTopology, length: int, channels: int, heads: int = 8,
                 head_dim: int = 64, scale_mode: str = "sqrt_d"):
        super().__init__()
        self.n_joints, self.length, self.channels = topo.n_joints, length, channels
        self.spatial = SparseRelayAttention(channels, heads, head_dim, *build_spatial_masks(topo), scale_mode)
        self.temporal = SparseRelayAttention(channels, heads, head_dim, *build_temporal_masks(length), scale_mode)
        self.combine = nn.Linear(channels, channels)

    def _check(self, state: BlockState):
        x, s, r = state
        L, N, C = self.length, self.n_joints, self.channels
        if x.shape[-3:] != (L, N, C) or s.shape[-2:] != (L, C) or r.shape[-2:] != (N, C):
            raise ShapeError(
                f"block expects joints (..,{L},{N},{C}), relays (..,{L},{C}) / (..,{N},{C}); got "
                f"{tuple(x.shape)}, {tuple(s.shape)}, {tuple(r.shape)}"
            )

    def ssrt_forward(self, state: BlockState) -> BlockState:
        """Per frame: joints over (self, neighbours, relay); relay over all joints."""
        self._check(state)
        joints, relay = self.spatial(state.joint_features, state.spatial_relay)
        return BlockState(joints, relay, state.temporal_relay)

    def tsrt_forward(self, state: BlockState) -> BlockState:
        """Per joint trajectory: frames over the +-1 band and relay; relay over all frames."""
        self._check(state)
        traj = state.joint_features.transpose(-2, -3)  # (..., N, L, C)
        frames, relay = self.temporal(traj, state.temporal_relay)
        return BlockState(frames.transpose(-2, -3), state.spatial_relay, relay)

    def forward(self, state: BlockState) -> BlockState:
        s = self.ssrt_forward(state)
        t = self.tsrt_forward(state)
        mixed = F.leaky_relu(self.combine(s.joint_features + t.joint_features), LEAKY_SLOPE)
        return BlockState(
            state.joint_features + mixed,
            state.spatial_relay + s.spatial_relay,
            state.temporal_relay + t.temporal_relay,
        )


def block_forward(block: SparseRelayBlock, state: BlockState) -> BlockState:
    return block(state)


def ssrt_forward(block: SparseRelayBlock, state: BlockState) -> BlockState:
    return block.ssrt_forward(state)


def tsrt_forward(block: SparseRelayBlock, state: BlockState) -> BlockState:
    return block.tsrt_forward(state)
