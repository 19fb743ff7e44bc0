"""Joint pre-training of all three branches with Adam and a stepped decay."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Optional, TextIO

import numpy as np
import torch

from .losses import loss_terms
from .motion import SampleTask, make_task
from .network import MotionTTANet, collate, get_params, set_params

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    def __init__(self, message: str, state: Optional[dict] = None):
        super().__init__(message)
        self.state = state or {}


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    decay_factor: float = 0.98
    decay_every: int = 2
    batch_size: int = 16
    epochs: int = 10
    eta: float = 0.04
    mu: float = 0.04
    seed: int = 0
    # redraw scramble/corruption companions every epoch
    resample_companions: bool = True
    max_steps: Optional[int] = None

    def __post_init__(self):
        if self.learning_rate < 0 or not 0 < self.decay_factor <= 1:
            raise ValueError("need learning_rate >= 0 and 0 < decay_factor <= 1")
        if self.batch_size < 1 or self.epochs < 0 or self.decay_every < 1:
            raise ValueError("batch_size, decay_every must be positive and epochs non-negative")

    def lr_at(self, epoch: int) -> float:
        return self.learning_rate * self.decay_factor ** (epoch // self.decay_every)


def refresh_companions(tasks: list[SampleTask], rng: np.random.Generator, ratio: float) -> list[SampleTask]:
    return [
        make_task(t.observation, t.target, rng, ratio, t.subject_id, t.category_id, t.name)
        for t in tasks
    ]


def batches(n: int, size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, size):
        yield order[start:start + size]


def check_finite(terms: dict[str, torch.Tensor], where: str, state: Callable[[], dict] = dict):
    """Raise DivergenceError if any loss term is NaN/inf; ``state()`` is only built on failure."""
    if not all(math.isfinite(float(v.detach())) for v in terms.values()):
        values = {k: float(v.detach()) for k, v in terms.items()}
        raise DivergenceError(f"non-finite loss at {where}: {values}", {**state(), "losses": values})


def pretrain(
    model: MotionTTANet,
    tasks: list[SampleTask],
    cfg: TrainConfig,
    log_file: Optional[TextIO] = None,
    on_step: Optional[Callable[[int, dict], None]] = None,
) -> dict[str, torch.Tensor]:
    """Minimise the joint objective in place on ``model``; returns the final ParamSet.

    One line per optimiser step is appended to ``log_file``:
    ``epoch<TAB>step<TAB>loss_pri<TAB>loss_aux1<TAB>loss_aux2<TAB>lr``.
    """
    if not tasks:
        raise ValueError("pretrain needs a non-empty dataset")
    rng = np.random.default_rng(cfg.seed)
    mcfg, topo = model.cfg, model.topo
    dtype = next(model.parameters()).dtype
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate, betas=(0.9, 0.999), eps=1e-8)
    step = 0
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        for group in opt.param_groups:
            group["lr"] = lr
        if cfg.resample_companions and epoch > 0:
            tasks = refresh_companions(tasks, rng, mcfg.corruption_ratio)
        sums: dict[str, float] = {}
        n_batches = 0
        for idx in batches(len(tasks), cfg.batch_size, rng):
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
            batch = collate([tasks[i] for i in idx], dtype)
            terms = loss_terms(model(*batch.inputs()), batch, topo, mcfg, cfg.eta, cfg.mu)
            check_finite(terms, f"epoch {epoch} step {step}",
                         lambda: {"epoch": epoch, "step": step, "params": get_params(model)})
            loss = sum(terms.values())
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            values = {k: float(v.detach()) for k, v in terms.items()}
            for k, v in values.items():
                sums[k] = sums.get(k, 0.0) + v
            n_batches += 1
            if log_file is not None:
                log_file.write(
                    f"{epoch}\t{step}\t{values.get('pri', float('nan'))!r}\t"
                    f"{values.get('aux1', float('nan'))!r}\t{values.get('aux2', float('nan'))!r}\t{lr!r}\n"
                )
            if on_step is not None:
                on_step(step, values)
            step += 1
        if n_batches:
            means = " ".join(f"{k}={v / n_batches:.4f}" for k, v in sums.items())
            log.info("epoch %d lr=%.6g %s", epoch, lr, means)
    return get_params(model)


def train_params(model: MotionTTANet, params: dict[str, torch.Tensor], tasks, cfg: TrainConfig, **kw):
    """Functional wrapper: load ``params`` into ``model``, pretrain, return new params."""
    set_params(model, params)
    return pretrain(model, tasks, cfg, **kw)
