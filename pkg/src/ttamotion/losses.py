"""Differentiable losses for the three branches (torch, batched over leading dims)."""

from __future__ import annotations

import torch
import torch.nn.functional as F

from .motion import ShapeError, SkeletonTopology
from .network import ContractError, ForwardOutput, ModelConfig, TaskBatch

PROB_FLOOR = 1e-12


def _same_shape(a: torch.Tensor, b: torch.Tensor):
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def mpjpe(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    _same_shape(pred, gt)
    return torch.linalg.vector_norm(pred - gt, dim=-1).mean()


def bone_length_loss(a: torch.Tensor, b: torch.Tensor, topo: SkeletonTopology) -> torch.Tensor:
    _same_shape(a, b)
    if not topo.bones:
        return a.new_zeros(())
    parents, children = list(topo.parents), list(topo.children)

    def lengths(x):
        return torch.linalg.vector_norm(x[..., children, :] - x[..., parents, :], dim=-1)

    return (lengths(a) - lengths(b)).abs().mean()


def loss_pri(pred, gt, topo: SkeletonTopology, eta: float = 0.04) -> torch.Tensor:
    return mpjpe(pred, gt) + eta * bone_length_loss(gt, pred, topo)


def loss_aux1(label, prob) -> torch.Tensor:
    """Binary cross-entropy on a probability, floored at 1e-12 inside the logs."""
    label, prob = (x if torch.is_tensor(x) else torch.as_tensor(x, dtype=torch.float64) for x in (label, prob))
    if torch.any((prob <= 0) | (prob >= 1)):
        raise ValueError("scramble probability must lie strictly inside (0, 1)")
    pos = torch.log(prob.clamp_min(PROB_FLOOR))
    neg = torch.log((1 - prob).clamp_min(PROB_FLOOR))
    return -(label * pos + (1 - label) * neg).mean()


def loss_aux1_logits(label, logit) -> torch.Tensor:
    """Same value as :func:`loss_aux1` on ``sigmoid(logit)``, without saturation."""
    return F.binary_cross_entropy_with_logits(logit, label.to(logit.dtype))


def loss_aux2(repaired, obs, topo: SkeletonTopology, mu: float = 0.04) -> torch.Tensor:
    return mpjpe(repaired, obs) + mu * bone_length_loss(obs, repaired, topo)


def loss_terms(out: ForwardOutput, batch: TaskBatch, topo: SkeletonTopology, cfg: ModelConfig,
               eta: float = 0.04, mu: float = 0.04) -> dict[str, torch.Tensor]:
    """Per-branch losses for the enabled branches; disabled ones are absent."""
    terms = {"pri": loss_pri(out.prediction, batch.target, topo, eta)}
    if cfg.aux1_enabled:
        terms["aux1"] = loss_aux1_logits(batch.scramble_label, out.require("scramble_logit"))
    if cfg.aux2_enabled:
        terms["aux2"] = loss_aux2(out.require("repaired"), batch.observation, topo, mu)
    return terms


def loss_joint(out: ForwardOutput, batch: TaskBatch, topo: SkeletonTopology, cfg: ModelConfig,
               eta: float = 0.04, mu: float = 0.04) -> torch.Tensor:
    terms = loss_terms(out, batch, topo, cfg, eta, mu)
    return sum(terms.values())


def aux_loss(out: ForwardOutput, batch: TaskBatch, topo: SkeletonTopology, cfg: ModelConfig,
             mu: float = 0.04) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Sum of the enabled auxiliary losses, plus the individual terms."""
    terms = {}
    if cfg.aux1_enabled:
        terms["aux1"] = loss_aux1_logits(batch.scramble_label, out.require("scramble_logit"))
    if cfg.aux2_enabled:
        terms["aux2"] = loss_aux2(out.require("repaired"), batch.observation, topo, mu)
    if not terms:
        raise ContractError("no auxiliary branch is enabled")
    return sum(terms.values()), terms
