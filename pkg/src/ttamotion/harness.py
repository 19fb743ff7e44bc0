"""Experimental splits, task loading and MPJPE evaluation at fixed horizons."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import torch

from .meta import MetaConfig, tta_predict
from .motion import (
    DatasetManifest,
    MotionSequence,
    SampleTask,
    make_task,
    mpjpe,
    mpjpe_per_frame,
    read_motion,
    round_half_up,
    split_sequence,
)
from .network import ModelConfig, MotionTTANet, predict_primary

DEFAULT_HORIZONS_MS = (80, 160, 320, 400, 1000)
SETUP_KINDS = ("i", "ii", "iii", "iv")


class HorizonRangeError(ValueError):
    pass


@dataclass
class SetupSpec:
    kind: str
    held_out_id: str

    def __post_init__(self):
        if self.kind not in SETUP_KINDS:
            raise ValueError(f"setup kind must be one of {SETUP_KINDS}, got {self.kind!r}")

    @property
    def by_subject(self) -> bool:
        return self.kind in ("i", "ii")


def build_setup_split(manifest: DatasetManifest, setup: SetupSpec) -> tuple[DatasetManifest, DatasetManifest]:
    """Hold out one subject (setups i, ii) or one category (iii, iv)."""
    col = 1 if setup.by_subject else 2
    ids = manifest.subjects() if setup.by_subject else manifest.categories()
    if setup.held_out_id not in ids:
        what = "subject" if setup.by_subject else "category"
        raise LookupError(f"unknown {what} {setup.held_out_id!r}; candidates: {', '.join(ids)}")
    test = [e for e in manifest.entries if e[col] == setup.held_out_id]
    train = [e for e in manifest.entries if e[col] != setup.held_out_id]
    return manifest.subset(train), manifest.subset(test)


def load_tasks(manifest: DatasetManifest, cfg: ModelConfig, seed: int = 0) -> list[SampleTask]:
    tasks = []
    for i, (path, subject, category) in enumerate(manifest.entries):
        obs, target = split_sequence(read_motion(manifest.resolve(path)), cfg.obs_len, cfg.horizon)
        rng = np.random.default_rng([seed, i])
        tasks.append(make_task(obs, target, rng, cfg.corruption_ratio, subject, category, path))
    return tasks


def horizon_frames(horizons_ms, fps: float, horizon: int) -> list[int]:
    """Map milliseconds to 1-based frame indices (round half up) and range-check them."""
    frames = []
    for ms in horizons_ms:
        f = round_half_up(ms * fps / 1000.0)
        if not 1 <= f <= horizon:
            raise HorizonRangeError(f"{ms} ms is frame {f} at {fps} fps, outside 1..{horizon}")
        frames.append(f)
    return frames


@dataclass
class EvalReport:
    horizons_ms: list
    rows: list = field(default_factory=list)            # (sequence, subject, category, {h: mpjpe})
    sequence_means: dict = field(default_factory=dict)  # sequence -> MPJPE over all forecast frames
    settings: dict = field(default_factory=dict)

    def _groups(self):
        groups = {("*", "*"): []}
        for r in self.rows:
            groups.setdefault(("*", r[2]), []).append(r)
            groups.setdefault((r[1], "*"), []).append(r)
            groups[("*", "*")].append(r)
        return groups

    def aggregates(self) -> dict[tuple[str, str], dict]:
        """Arithmetic means over member sequences, keyed by (subject, category); '*' = any."""
        out = {}
        for key, members in sorted(self._groups().items()):
            if not members:
                continue
            vals = {h: float(np.mean([m[3][h] for m in members])) for h in self.horizons_ms}
            vals["mean"] = float(np.mean([self.sequence_means[m[0]] for m in members]))
            out[key] = vals
        return out

    @property
    def mean_mpjpe(self) -> float:
        return float(np.mean(list(self.sequence_means.values())))

    def per_category(self) -> dict[str, float]:
        return {c: v["mean"] for (s, c), v in self.aggregates().items() if s == "*" and c != "*"}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["sequence", "subject", "category", "horizon_ms", "mpjpe_mm"])
        for seq, subj, cat, vals in self.rows:
            for h in self.horizons_ms:
                w.writerow([seq, subj, cat, h, repr(vals[h])])
        for (subj, cat), vals in self.aggregates().items():
            for h in [*self.horizons_ms, "mean"]:
                w.writerow(["*", subj, cat, h, repr(vals[h])])
        return buf.getvalue()

    def summary(self) -> dict:
        return {
            "settings": self.settings,
            "n_sequences": len(self.rows),
            "mean_mpjpe_mm": self.mean_mpjpe if self.rows else None,
            "aggregates": [
                {"subject": s, "category": c, **{str(k): v for k, v in vals.items()}}
                for (s, c), vals in self.aggregates().items()
            ],
        }

    def summary_json(self) -> str:
        return json.dumps(self.summary(), indent=2, sort_keys=True)


Predictor = Callable[[int, SampleTask], MotionSequence]


def evaluate(
    model: Optional[MotionTTANet],
    params: Optional[dict[str, torch.Tensor]],
    test: DatasetManifest | list[SampleTask],
    meta_cfg: MetaConfig,
    horizons_ms=DEFAULT_HORIZONS_MS,
    tta: bool = True,
    eval_seed: int = 0,
    steps: Optional[int] = None,
    predictor: Optional[Predictor] = None,
    model_cfg: Optional[ModelConfig] = None,
) -> EvalReport:
    """Forecast every test clip (optionally after test-time adaptation) and score it.

    Sequence ``i`` uses companions seeded by ``eval_seed + i``. ``predictor``
    replaces the model entirely (used for oracle checks).
    """
    cfg = model.cfg if model is not None else model_cfg
    tasks = load_tasks(test, cfg, eval_seed) if isinstance(test, DatasetManifest) else test
    steps = (meta_cfg.tta_steps if steps is None else steps) if tta else 0
    report = EvalReport(
        horizons_ms=list(horizons_ms),
        settings={"tta": bool(tta), "steps": steps, "alpha": meta_cfg.alpha, "eval_seed": eval_seed,
                  "resample_each_step": meta_cfg.resample_each_step, "horizons_ms": list(horizons_ms)},
    )
    if not tasks:
        return report
    frames = horizon_frames(horizons_ms, tasks[0].observation.fps, cfg.horizon)
    for i, task in enumerate(tasks):
        if predictor is not None:
            pred = predictor(i, task)
        elif steps > 0:
            pred, _ = tta_predict(model, params, task.observation, meta_cfg, eval_seed + i, steps=steps)
        else:
            pred = predict_primary(model, task.observation, eval_seed + i, params=params)
        per_frame = mpjpe_per_frame(pred, task.target)
        name = task.name or f"seq{i}"
        report.rows.append((name, task.subject_id, task.category_id,
                            {h: float(per_frame[f - 1]) for h, f in zip(horizons_ms, frames)}))
        report.sequence_means[name] = mpjpe(pred, task.target)
    return report
