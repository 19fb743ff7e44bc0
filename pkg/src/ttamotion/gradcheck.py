"""Central finite-difference checks of every loss against autograd, per parameter group."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import torch

from .losses import loss_terms
from .motion import MotionSequence, SkeletonTopology, make_task
from .network import PARTITIONS, ModelConfig, MotionTTANet, collate, forward_with, partition_of

LOSSES = ("pri", "aux1", "aux2", "joint")
# below this magnitude both derivatives count as zero
ABS_FLOOR = 1e-9
# central differences at step and step/2 disagreeing by more than this
# fraction mean the stencil straddles a non-smooth point
KINK_RATIO = 1e-6


def chain_topology(n: int) -> SkeletonTopology:
    return SkeletonTopology(n, tuple((j - 1, j) for j in range(1, n)))


def subgroup_of(name: str) -> str:
    """Finer grouping for the report, e.g. ``shared.blocks.aux1`` or ``pri_head.block``."""
    parts = name.split(".")
    depth = 3 if parts[0] == "shared" and parts[1] in ("embed", "blocks") else 2
    return ".".join(parts[:depth])


@torch.no_grad()
def randomize(model: MotionTTANet, seed: int, scale: float = 0.3) -> None:
    """Replace every parameter by N(0, scale^2 / fan_in) draws so no gradient path is trivially zero."""
    g = torch.Generator().manual_seed(seed)
    for name, p in model.named_parameters():
        fan_in = p.shape[-1] if p.ndim > 1 else 4
        p.copy_(torch.randn(p.shape, generator=g, dtype=torch.float64) * scale / np.sqrt(fan_in))


def random_batch(cfg: ModelConfig, seed: int, n_tasks: int = 2, dtype=torch.float64):
    rng = np.random.default_rng(seed)
    tasks = []
    for _ in range(n_tasks):
        frames = rng.normal(scale=200.0, size=(cfg.length, cfg.n_joints, 3))
        obs, target = MotionSequence(frames[: cfg.obs_len]), MotionSequence(frames[cfg.obs_len:])
        tasks.append(make_task(obs, target, rng, cfg.corruption_ratio))
    return collate(tasks, dtype)


def _norm(tensors: dict) -> float:
    return float(np.sqrt(sum(float((v ** 2).sum()) for v in tensors.values())))


def rel_err(a: float, b: float) -> float:
    denom = max(abs(a), abs(b))
    return 0.0 if denom < ABS_FLOOR else abs(a - b) / denom


@dataclass
class GradcheckReport:
    tolerance: float
    errors: dict = field(default_factory=dict)  # (loss, subgroup) -> max relative error
    skipped: int = 0  # probes discarded because they straddled a kink

    def by_partition(self) -> dict[str, float]:
        out = {}
        for (_, sub), err in self.errors.items():
            part = partition_of(sub + ".x")
            out[part] = max(out.get(part, 0.0), err)
        return out

    def offending(self) -> list[str]:
        return sorted({sub for (_, sub), e in self.errors.items() if not e <= self.tolerance})

    @property
    def ok(self) -> bool:
        return not self.offending()

    def lines(self) -> list[str]:
        out = [f"{sub:<28s} {loss:<6s} max_rel_err={err:.3e}" for (loss, sub), err in sorted(self.errors.items())]
        out += [f"partition {p:<12s} max_rel_err={e:.3e}" for p, e in sorted(self.by_partition().items())]
        out.append(f"probes skipped at non-smooth points: {self.skipped}")
        return out


def gradcheck_model(
    model: MotionTTANet,
    seed: int = 0,
    step: float = 1e-5,
    tolerance: float = 1e-4,
    n_dirs: int = 3,
    n_coords: int = 4,
    losses=LOSSES,
    eta: float = 0.04,
    mu: float = 0.04,
    grad_hook: Optional[Callable[[dict], dict]] = None,
) -> GradcheckReport:
    """Compare autograd with central differences for each (loss, parameter subgroup).

    Each subgroup is probed along ``n_dirs`` random unit directions and at its
    ``n_coords`` largest-gradient coordinates. Probes whose step straddles a
    LeakyReLU / abs kink are redrawn. The model must be float64.
    """
    cfg, topo = model.cfg, model.topo
    batch = random_batch(cfg, seed)
    params = {k: v.detach().clone() for k, v in model.named_parameters()}
    enabled = [l for l in losses if l in ("pri", "joint") or l in cfg.aux_branches]

    def loss_value(p, which):
        terms = loss_terms(forward_with(model, p, *batch.inputs()), batch, topo, cfg, eta, mu)
        return sum(terms.values()) if which == "joint" else terms[which]

    groups: dict[str, list[str]] = {}
    for name in params:
        groups.setdefault(subgroup_of(name), []).append(name)

    rng = np.random.default_rng(seed + 1)
    report = GradcheckReport(tolerance)
    for which in enabled:
        live = {k: v.clone().requires_grad_(True) for k, v in params.items()}
        grads = torch.autograd.grad(loss_value(live, which), list(live.values()), allow_unused=True)
        grads = {k: torch.zeros_like(params[k]) if g is None else g for k, g in zip(live, grads)}
        if grad_hook is not None:
            grads = grad_hook(grads)

        def fd(direction):
            """Central difference, or None when halving the step changes it (a kink in range)."""
            def at(sign):
                return {k: params[k] + sign * step * direction.get(k, 0) for k in params}
            with torch.no_grad():
                fp, hp, hm, fm = (loss_value(at(s), which).item() for s in (1, 0.5, -0.5, -1))
            full, half = (fp - fm) / (2 * step), (hp - hm) / step
            if abs(full - half) > KINK_RATIO * max(abs(full), abs(half), ABS_FLOOR):
                report.skipped += 1
                return None
            return full

        for sub, names in groups.items():
            worst = 0.0
            gnorm = _norm({k: grads[k] for k in names})
            done = 0
            for _ in range(4 * n_dirs):
                if done == n_dirs:
                    break
                # half gradient-aligned, half random: keeps the derivative well above roundoff
                r = {k: torch.as_tensor(rng.normal(size=params[k].shape), dtype=params[k].dtype) for k in names}
                rnorm = _norm(r)
                d = {k: r[k] / rnorm + (grads[k] / gnorm if gnorm > 0 else 0) for k in names}
                norm = _norm(d)
                d = {k: v / norm for k, v in d.items()}
                numeric = fd(d)
                if numeric is None:
                    continue
                worst = max(worst, rel_err(numeric, float(sum((grads[k] * d[k]).sum() for k in names))))
                done += 1
            flat = torch.cat([grads[k].flatten() for k in names])
            sizes = np.cumsum([0] + [params[k].numel() for k in names])
            done = 0
            for idx in torch.topk(flat.abs(), min(4 * n_coords, flat.numel())).indices.tolist():
                if done == n_coords:
                    break
                owner = int(np.searchsorted(sizes, idx, side="right") - 1)
                k = names[owner]
                onehot = torch.zeros_like(params[k]).flatten()
                onehot[idx - sizes[owner]] = 1.0
                numeric = fd({k: onehot.view_as(params[k])})
                if numeric is None:
                    continue
                worst = max(worst, rel_err(numeric, flat[idx].item()))
                done += 1
            report.errors[(which, sub)] = worst
    return report


def default_gradcheck(seed: int = 0, cfg: Optional[ModelConfig] = None, **kw) -> GradcheckReport:
    cfg = cfg or ModelConfig.miniature()
    model = MotionTTANet(cfg, chain_topology(cfg.n_joints)).double()
    randomize(model, seed)
    return gradcheck_model(model, seed=seed, **kw)


def partitions_covered(report: GradcheckReport, cfg: ModelConfig) -> set[str]:
    expected = {"shared", "pri_head"} | {f"{b}_head" for b in cfg.aux_branches}
    return expected & set(report.by_partition())


__all__ = ["gradcheck_model", "default_gradcheck", "GradcheckReport", "randomize", "chain_topology", "PARTITIONS"]
