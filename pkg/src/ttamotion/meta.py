"""Meta-auxiliary training and per-sequence test-time adaptation.

Parameters travel as ``{name: tensor}`` dicts and are evaluated through
``torch.func.functional_call`` so that adapted copies never touch the module.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from .losses import aux_loss, loss_pri
from .motion import MotionSequence, SampleTask, ShapeError
from .network import MotionTTANet, TaskBatch, collate, companions, forward_with
from .training import DivergenceError, batches, refresh_companions

log = logging.getLogger(__name__)


@dataclass
class MetaConfig:
    alpha: float = 2e-5
    beta: float = 2e-5
    inner_steps_train: int = 1
    tta_steps: int = 6
    meta_batch: int = 16
    order: str = "first"
    epochs: int = 1
    eta: float = 0.04
    mu: float = 0.04
    seed: int = 0
    # draw fresh companions before every test-time step instead of once per sequence
    resample_each_step: bool = False

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if self.tta_steps < 0 or self.inner_steps_train < 0 or self.epochs < 0:
            raise ValueError("step counts must be non-negative")
        if self.meta_batch < 1:
            raise ValueError("meta_batch must be positive")
        if self.order not in ("first", "exact"):
            raise ValueError(f"order must be 'first' or 'exact', got {self.order!r}")


@dataclass
class AdaptReport:
    """Auxiliary losses at the parameters reached after ``step`` updates (step 0 = start)."""

    steps: list[tuple[int, float, float]] = field(default_factory=list)

    @property
    def totals(self) -> list[float]:
        return [a1 + a2 for _, a1, a2 in self.steps]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "loss_aux1", "loss_aux2"])
        for s, a1, a2 in self.steps:
            w.writerow([s, repr(a1), repr(a2)])
        return buf.getvalue()


def _aux_terms(model, params, batch: TaskBatch, mu):
    out = forward_with(model, params, *batch.inputs())
    return aux_loss(out, batch, model.topo, model.cfg, mu)


def _record(report: Optional[AdaptReport], step: int, terms: dict[str, torch.Tensor]):
    if report is not None:
        report.steps.append((step, *(float(terms[k].detach()) if k in terms else 0.0 for k in ("aux1", "aux2"))))


def inner_adapt(
    model: MotionTTANet,
    params: dict[str, torch.Tensor],
    batch: TaskBatch,
    alpha: float,
    steps: int,
    mu: float = 0.04,
    create_graph: bool = False,
    report: Optional[AdaptReport] = None,
    batch_fn=None,
) -> dict[str, torch.Tensor]:
    """Plain gradient descent of the full ParamSet on the summed auxiliary losses.

    Returns a fresh dict; ``params`` is never modified. With ``create_graph`` the
    result stays differentiable w.r.t. the incoming tensors. ``batch_fn(step)``, if
    given, supplies the companions for each step (fresh draws per step).
    """
    if steps < 0:
        raise ValueError("steps must be non-negative")
    if create_graph:
        current = dict(params)
    else:
        current = {k: v.detach().clone().requires_grad_(True) for k, v in params.items()}
    if steps == 0 and report is None:
        return {k: v.detach().clone() for k, v in current.items()} if not create_graph else current

    names = list(current)
    for step in range(steps):
        b = batch_fn(step) if batch_fn is not None else batch
        total, terms = _aux_terms(model, current, b, mu)
        _record(report, step, terms)
        grads = torch.autograd.grad(total, [current[k] for k in names], create_graph=create_graph,
                                    allow_unused=True)
        if not all(g is None or bool(torch.isfinite(g).all()) for g in grads):
            raise DivergenceError(f"non-finite auxiliary gradient at inner step {step}",
                                  {"step": step, "losses": {k: float(v) for k, v in terms.items()}})
        updated = {}
        for k, g in zip(names, grads):
            p = current[k]
            if g is None:
                updated[k] = p
            elif create_graph:
                updated[k] = p - alpha * g
            else:
                updated[k] = (p.detach() - alpha * g).requires_grad_(True)
        current = updated

    if report is not None:
        b = batch_fn(steps) if batch_fn is not None else batch
        with torch.no_grad():
            _, terms = _aux_terms(model, current, b, mu)
        _record(report, steps, terms)
    if create_graph:
        return current
    return {k: v.detach() for k, v in current.items()}


def primary_loss_at(model, params, batch: TaskBatch, eta=0.04) -> torch.Tensor:
    out = forward_with(model, params, *batch.inputs())
    return loss_pri(out.prediction, batch.target, model.topo, eta)


def meta_gradient(model, params, batch: TaskBatch, cfg: MetaConfig, alpha=None, steps=None):
    """Gradient of the primary loss at the adapted parameters, w.r.t. ``params``.

    ``first`` order evaluates the gradient at the adapted point and treats the
    inner update as a constant shift; ``exact`` differentiates through it.
    """
    alpha = cfg.alpha if alpha is None else alpha
    steps = cfg.inner_steps_train if steps is None else steps
    names = list(params)
    if cfg.order == "exact":
        base = {k: v.detach().clone().requires_grad_(True) for k, v in params.items()}
        adapted = inner_adapt(model, base, batch, alpha, steps, cfg.mu, create_graph=True)
        loss = primary_loss_at(model, adapted, batch, cfg.eta)
        grads = torch.autograd.grad(loss, [base[k] for k in names], allow_unused=True)
    else:
        adapted = inner_adapt(model, params, batch, alpha, steps, cfg.mu)
        adapted = {k: v.requires_grad_(True) for k, v in adapted.items()}
        loss = primary_loss_at(model, adapted, batch, cfg.eta)
        grads = torch.autograd.grad(loss, [adapted[k] for k in names], allow_unused=True)
    out = {k: (torch.zeros_like(params[k]) if g is None else g) for k, g in zip(names, grads)}
    return out, loss.detach()


def meta_step(model, params, tasks: list[SampleTask], cfg: MetaConfig) -> tuple[dict, float]:
    """One outer update: ``psi <- psi - beta * sum_k grad L_pri(adapted_k)``."""
    dtype = next(iter(params.values())).dtype
    total = {k: torch.zeros_like(v) for k, v in params.items()}
    losses = []
    for task in tasks:
        g, loss = meta_gradient(model, params, collate([task], dtype), cfg)
        if not math.isfinite(float(loss)):
            raise DivergenceError("non-finite meta-loss", {"task": task.name, "loss": float(loss)})
        for k in total:
            total[k] += g[k]
        losses.append(float(loss))
    new = {k: params[k] - cfg.beta * total[k] for k in params}
    return new, float(np.mean(losses))


def meta_train(
    model: MotionTTANet,
    params: dict[str, torch.Tensor],
    tasks: list[SampleTask],
    cfg: MetaConfig,
    epochs: Optional[int] = None,
    resample_companions: bool = True,
) -> dict[str, torch.Tensor]:
    """Meta-auxiliary training starting from pre-trained ``params``; returns new params."""
    epochs = cfg.epochs if epochs is None else epochs
    rng = np.random.default_rng(cfg.seed)
    params = {k: v.detach().clone() for k, v in params.items()}
    for epoch in range(epochs):
        if resample_companions and epoch > 0:
            tasks = refresh_companions(tasks, rng, model.cfg.corruption_ratio)
        losses = []
        for idx in batches(len(tasks), cfg.meta_batch, rng):
            params, loss = meta_step(model, params, [tasks[i] for i in idx], cfg)
            losses.append(loss)
        if losses:
            log.info("meta epoch %d mean primary loss at adapted params %.4f", epoch, float(np.mean(losses)))
    return params


def tta_predict(
    model: MotionTTANet,
    params: dict[str, torch.Tensor],
    observation: MotionSequence,
    cfg: MetaConfig,
    eval_seed: int = 0,
    steps: Optional[int] = None,
    alpha: Optional[float] = None,
) -> tuple[MotionSequence, AdaptReport]:
    """Adapt a private copy of ``params`` to one observation, then forecast with it."""
    mcfg = model.cfg
    if observation.n_frames != mcfg.obs_len:
        raise ShapeError(f"observation has {observation.n_frames} frames, model expects {mcfg.obs_len}")
    steps = cfg.tta_steps if steps is None else steps
    alpha = cfg.alpha if alpha is None else alpha
    dtype = next(iter(params.values())).dtype
    task = companions(observation, mcfg, eval_seed)
    batch = collate([task], dtype)
    report = AdaptReport()
    batch_fn = None
    if cfg.resample_each_step:
        rng = np.random.default_rng([eval_seed, 1])

        def batch_fn(step):
            if step == 0:
                return batch
            return collate(refresh_companions([task], rng, mcfg.corruption_ratio), dtype)

    if steps > 0 and mcfg.aux_branches:
        adapted = inner_adapt(model, params, batch, alpha, steps, cfg.mu, report=report, batch_fn=batch_fn)
    else:
        adapted = params
    with torch.no_grad():
        out = forward_with(model, adapted, *batch.inputs())
    return MotionSequence(out.prediction[0].double().numpy(), observation.fps), report
