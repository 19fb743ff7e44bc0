"""Command-line entry point: synth, pretrain, metatrain, eval, predict, gradcheck.

Exit codes: 0 success, 1 runtime failure (divergence, failed gradient check),
2 usage or validation error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Optional

import torch

from .gradcheck import chain_topology, gradcheck_model, partitions_covered, randomize
from .harness import SetupSpec, build_setup_split, evaluate, load_tasks
from .meta import MetaConfig, meta_train, tta_predict
from .motion import (
    DatasetManifest,
    FormatError,
    ShapeError,
    load_manifest,
    read_motion,
    read_skeleton,
    write_motion_file,
)
from .network import ConfigMismatch, ModelConfig, MotionTTANet, build_model, get_params, load_checkpoint, save_checkpoint, set_params
from .synth import SynthSpec, gen_synthetic
from .training import DivergenceError, TrainConfig, pretrain

log = logging.getLogger("ttamotion")

SECTIONS = {"model": ModelConfig, "train": TrainConfig, "meta": MetaConfig}


class UsageError(Exception):
    """Invalid input detected after argument parsing (exit code 2)."""


# ---------------------------------------------------------------------------
# RunConfig: key=value files mirroring the three config dataclasses


def _field_defaults(cls) -> dict:
    return {f.name: f.default for f in dataclasses.fields(cls)}


def _convert(raw: str, default, key: str):
    text = raw.strip()
    try:
        if isinstance(default, bool):
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if default is None:  # optional integer
            return None if text.lower() in ("", "none") else int(text)
        if isinstance(default, tuple):
            return tuple(int(t) for t in text.split(",") if t.strip())
        return type(default)(text)
    except ValueError:
        raise UsageError(f"bad value for {key}: {raw!r}") from None


def parse_assignments(lines, origin: str) -> dict[str, dict]:
    """Parse ``key=value`` lines into per-section overrides.

    A bare key applies to every section that has it; ``model.``, ``train.``
    or ``meta.`` prefixes target one section. Unknown keys are rejected.
    """
    out: dict[str, dict] = {s: {} for s in SECTIONS}
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{origin}:{n}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        section, _, name = key.rpartition(".")
        targets = [section] if section else [s for s, cls in SECTIONS.items() if name in _field_defaults(cls)]
        if section and (section not in SECTIONS or name not in _field_defaults(SECTIONS[section])):
            targets = []
        if not targets:
            raise UsageError(f"{origin}:{n}: unknown config key {key!r}")
        for s in targets:
            out[s][name] = _convert(value, _field_defaults(SECTIONS[s])[name], key)
    return out


def read_config_file(path: Optional[str]) -> dict[str, dict]:
    if path is None:
        return {s: {} for s in SECTIONS}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror or exc}") from None
    return parse_assignments(text.splitlines(), path)


def merge(*layers: dict[str, dict]) -> dict[str, dict]:
    out = {s: {} for s in SECTIONS}
    for layer in layers:
        for s in SECTIONS:
            out[s].update(layer.get(s, {}))
    return out


def flag_overrides(args, mapping: dict[str, str]) -> dict[str, dict]:
    """Turn set argparse flags into config assignments (``dest -> key``)."""
    lines = [f"{key}={getattr(args, dest)}" for dest, key in mapping.items() if getattr(args, dest, None) is not None]
    lines += list(getattr(args, "set", None) or [])
    return parse_assignments(lines, "command line")


def build_configs(values: dict[str, dict]) -> tuple[ModelConfig, TrainConfig, MetaConfig]:
    try:
        return ModelConfig(**values["model"]), TrainConfig(**values["train"]), MetaConfig(**values["meta"])
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from None


def resolved(model_cfg, train_cfg, meta_cfg) -> dict:
    return {"model": model_cfg.to_dict(), "train": dataclasses.asdict(train_cfg), "meta": dataclasses.asdict(meta_cfg)}


def log_resolved(command: str, config: dict, extra: Optional[dict] = None) -> None:
    payload = {"command": command, **(extra or {}), **config}
    log.info("resolved config: %s", json.dumps(payload, sort_keys=True))


# ---------------------------------------------------------------------------
# Shared helpers


def _load_data(path: str) -> DatasetManifest:
    try:
        manifest = load_manifest(path)
        read_skeleton(manifest.topology_path)
    except FileNotFoundError as exc:
        raise UsageError(f"not found: {exc.filename or path}") from None
    except FormatError as exc:
        raise UsageError(f"malformed dataset in {path}: {exc}") from None
    return manifest


def _split(manifest: DatasetManifest, args, side: str) -> DatasetManifest:
    if args.setup is None:
        if args.holdout is not None:
            raise UsageError("--holdout needs --setup")
        return manifest
    if args.holdout is None:
        raise UsageError("--setup needs --holdout")
    try:
        train, test = build_setup_split(manifest, SetupSpec(args.setup, args.holdout))
    except LookupError as exc:
        raise UsageError(str(exc.args[0])) from None
    return train if side == "train" else test


def _tasks(manifest, cfg: ModelConfig, seed: int):
    try:
        return load_tasks(manifest, cfg, seed)
    except (ShapeError, FormatError) as exc:
        raise UsageError(f"dataset does not fit the model config: {exc}") from None


def _model_values(manifest: DatasetManifest, values: dict[str, dict]) -> dict[str, dict]:
    topo = read_skeleton(manifest.topology_path)
    n = values["model"].get("n_joints")
    if n is not None and n != topo.n_joints:
        raise UsageError(f"config n_joints={n} but the skeleton has {topo.n_joints} joints")
    values["model"]["n_joints"] = topo.n_joints
    return values


def _load_ckpt(path: str, explicit_model: dict):
    """Load a checkpoint; explicitly requested model keys must match it."""
    try:
        model, meta = load_checkpoint(path)
    except FileNotFoundError:
        raise UsageError(f"checkpoint not found: {path}") from None
    except Exception as exc:  # torch.load raises assorted types on foreign files
        raise UsageError(f"cannot load checkpoint {path}: {exc}") from None
    requested = dataclasses.replace(model.cfg, **explicit_model) if explicit_model else model.cfg
    if requested != model.cfg:
        try:
            load_checkpoint(path, requested)
        except ConfigMismatch as exc:
            raise UsageError(str(exc)) from None
    return model, meta


def _dtype(name: str):
    return {"float32": torch.float32, "float64": torch.float64}[name]


# ---------------------------------------------------------------------------
# Commands


def cmd_synth(args) -> int:
    spec = SynthSpec(n_categories=args.categories, n_subjects=args.subjects, seqs_per_pair=args.seqs_per,
                     n_joints=args.joints, T=args.obs_len, horizon=args.horizon, fps=args.fps, seed=args.seed)
    log_resolved("synth", {"synth": dataclasses.asdict(spec)})
    try:
        manifest, files = gen_synthetic(spec, args.out)
    except OSError as exc:
        raise UsageError(f"cannot write to {args.out}: {exc.strerror or exc}") from None
    print(f"wrote {len(manifest.entries)} sequences to {args.out}")
    return 0


PRETRAIN_FLAGS = {"seed": "seed", "epochs": "train.epochs", "lr": "learning_rate", "batch_size": "batch_size",
                  "eta": "eta", "mu": "mu"}


def cmd_pretrain(args) -> int:
    manifest = _load_data(args.data)
    values = merge(read_config_file(args.config), flag_overrides(args, PRETRAIN_FLAGS))
    values = _model_values(manifest, values)
    model_cfg, train_cfg, meta_cfg = build_configs(values)
    config = resolved(model_cfg, train_cfg, meta_cfg)
    log_resolved("pretrain", config, {"data": args.data, "setup": args.setup, "holdout": args.holdout})
    tasks = _tasks(_split(manifest, args, "train"), model_cfg, train_cfg.seed)
    model = build_model(model_cfg, read_skeleton(manifest.topology_path), train_cfg.seed, _dtype(args.dtype))
    log_path = args.log or f"{args.out}.log"
    with open(log_path, "w") as fh:
        pretrain(model, tasks, train_cfg, log_file=fh)
    save_checkpoint(args.out, model, {"stage": "pretrain", "config": config})
    print(f"checkpoint {args.out}, log {log_path}")
    return 0


META_FLAGS = {"seed": "seed", "alpha": "alpha", "beta": "beta", "inner_steps": "inner_steps_train",
              "meta_batch": "meta_batch", "order": "order", "epochs": "meta.epochs"}


def cmd_metatrain(args) -> int:
    manifest = _load_data(args.data)
    values = merge(read_config_file(args.config), flag_overrides(args, META_FLAGS))
    model, _ = _load_ckpt(args.init, values["model"])
    values["model"] = model.cfg.to_dict()
    model_cfg, train_cfg, meta_cfg = build_configs(values)
    config = resolved(model_cfg, train_cfg, meta_cfg)
    log_resolved("metatrain", config, {"data": args.data, "init": args.init, "setup": args.setup,
                                       "holdout": args.holdout})
    tasks = _tasks(_split(manifest, args, "train"), model_cfg, meta_cfg.seed)
    params = meta_train(model, get_params(model), tasks, meta_cfg)
    set_params(model, params)
    save_checkpoint(args.out, model, {"stage": "metatrain", "config": config})
    print(f"checkpoint {args.out}")
    return 0


def _tta_steps(args, default: int) -> int:
    if args.no_tta:
        return 0
    if args.steps is not None:
        return args.steps
    return default if args.tta else 0


def cmd_eval(args) -> int:
    manifest = _load_data(args.data)
    values = merge(read_config_file(args.config), flag_overrides(args, {"alpha": "alpha", "resample": "resample_each_step"}))
    model, _ = _load_ckpt(args.ckpt, values["model"])
    values["model"] = model.cfg.to_dict()
    model_cfg, train_cfg, meta_cfg = build_configs(values)
    steps = _tta_steps(args, meta_cfg.tta_steps)
    log_resolved("eval", resolved(model_cfg, train_cfg, meta_cfg),
                 {"ckpt": args.ckpt, "setup": args.setup, "holdout": args.holdout, "steps": steps,
                  "eval_seed": args.eval_seed})
    test = _tasks(_split(manifest, args, "test"), model_cfg, args.eval_seed)
    horizons = [int(h) for h in args.horizons.split(",")]
    try:
        report = evaluate(model, get_params(model), test, meta_cfg, horizons, tta=steps > 0, steps=steps,
                          eval_seed=args.eval_seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    Path(args.out).write_text(report.to_csv())
    summary_path = args.summary or f"{args.out}.summary.json"
    Path(summary_path).write_text(report.summary_json())
    print(f"mean MPJPE {report.mean_mpjpe:.4f} mm over {len(report.rows)} sequences (I={steps}); {args.out}")
    return 0


def cmd_predict(args) -> int:
    values = merge(read_config_file(args.config), flag_overrides(args, {"alpha": "alpha"}))
    model, _ = _load_ckpt(args.ckpt, values["model"])
    values["model"] = model.cfg.to_dict()
    _, _, meta_cfg = build_configs(values)
    steps = _tta_steps(args, meta_cfg.tta_steps)
    try:
        seq = read_motion(args.input)
    except FileNotFoundError:
        raise UsageError(f"input not found: {args.input}") from None
    obs = seq.slice(seq.n_frames - model.cfg.obs_len, seq.n_frames) if seq.n_frames > model.cfg.obs_len else seq
    try:
        pred, report = tta_predict(model, get_params(model), obs, meta_cfg, args.eval_seed, steps=steps)
    except ShapeError as exc:
        raise UsageError(str(exc)) from None
    Path(args.out).write_bytes(write_motion_file(pred))
    if args.report:
        Path(args.report).write_text(report.to_csv())
    print(f"wrote {pred.n_frames} forecast frames to {args.out} (I={steps})")
    return 0


def _corrupt(grads: dict) -> dict:
    # negative control: perturb one gradient entry
    name = next(iter(grads))
    g = {k: v.clone() for k, v in grads.items()}
    g[name].view(-1)[0] += 1.0 + g[name].view(-1)[0].abs()
    return g


def cmd_gradcheck(args) -> int:
    values = merge({"model": dataclasses.asdict(ModelConfig.miniature())}, read_config_file(args.config),
                   flag_overrides(args, {}))
    model_cfg, train_cfg, _ = build_configs(values)
    log_resolved("gradcheck", {"model": model_cfg.to_dict()}, {"seed": args.seed, "step": args.step,
                                                              "tolerance": args.tolerance})
    model = MotionTTANet(model_cfg, chain_topology(model_cfg.n_joints)).double()
    randomize(model, args.seed)
    report = gradcheck_model(model, seed=args.seed, step=args.step, tolerance=args.tolerance,
                             eta=train_cfg.eta, mu=train_cfg.mu,
                             grad_hook=_corrupt if args.corrupt_gradient else None)
    for line in report.lines():
        print(line)
    missing = {"shared", "pri_head", *(f"{b}_head" for b in model_cfg.aux_branches)} - partitions_covered(report, model_cfg)
    if missing:
        print(f"FAIL: partitions not covered: {', '.join(sorted(missing))}")
        return 1
    if not report.ok:
        print(f"FAIL: relative error above {args.tolerance:g} in: {', '.join(report.offending())}")
        return 1
    print(f"OK: all groups within {args.tolerance:g}")
    return 0


# ---------------------------------------------------------------------------
# Parser


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {text}")
    return value


def _nonneg_int(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be non-negative, got {text}")
    return value


def _nonneg_float(text: str) -> float:
    value = float(text)
    if not value >= 0:
        raise argparse.ArgumentTypeError(f"must be non-negative, got {text}")
    return value


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=_positive_int, default=1,
                        help="torch intra-op threads; 1 gives bit-reproducible runs (default 1)")
    common.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    configured = argparse.ArgumentParser(add_help=False)
    configured.add_argument("--config", help="key=value run configuration file")
    configured.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")

    split = argparse.ArgumentParser(add_help=False)
    split.add_argument("--setup", choices=["i", "ii", "iii", "iv"])
    split.add_argument("--holdout", help="held-out subject or category id")

    tta = argparse.ArgumentParser(add_help=False)
    tta.add_argument("--tta", action="store_true", help="adapt each sequence before forecasting")
    tta.add_argument("--no-tta", action="store_true", help="base model only (same as --steps 0)")
    tta.add_argument("--steps", type=_nonneg_int, help="adaptation steps I (default 6 with --tta)")
    tta.add_argument("--alpha", type=_nonneg_float, help="adaptation rate")
    tta.add_argument("--eval-seed", type=int, default=0)

    parser = argparse.ArgumentParser(prog="ttamotion", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--categories", type=_positive_int, default=4)
    p.add_argument("--subjects", type=_positive_int, default=3)
    p.add_argument("--seqs-per", type=_positive_int, default=20)
    p.add_argument("--joints", type=_positive_int, default=17)
    p.add_argument("--obs-len", type=_positive_int, default=25)
    p.add_argument("--horizon", type=_positive_int, default=25)
    p.add_argument("--fps", type=float, default=25.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", parents=[common, configured, split], help="joint pre-training")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log", help="training log path (default <out>.log)")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=_nonneg_int)
    p.add_argument("--lr", type=_nonneg_float)
    p.add_argument("--batch-size", type=_positive_int)
    p.add_argument("--eta", type=_nonneg_float)
    p.add_argument("--mu", type=_nonneg_float)
    p.add_argument("--dtype", choices=["float32", "float64"], default="float32")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("metatrain", parents=[common, configured, split], help="meta-auxiliary training")
    p.add_argument("--data", required=True)
    p.add_argument("--init", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--alpha", type=_nonneg_float)
    p.add_argument("--beta", type=_nonneg_float)
    p.add_argument("--inner-steps", type=_nonneg_int)
    p.add_argument("--meta-batch", type=_positive_int)
    p.add_argument("--order", choices=["first", "exact"])
    p.add_argument("--epochs", type=_nonneg_int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_metatrain)

    p = sub.add_parser("eval", parents=[common, configured, split, tta], help="evaluate on a held-out split")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True, help="EvalReport CSV")
    p.add_argument("--summary", help="JSON summary path (default <out>.summary.json)")
    p.add_argument("--horizons", default="80,160,320,400,1000", help="comma-separated horizons in ms")
    p.add_argument("--resample", action="store_const", const=True,
                   help="fresh companions before every adaptation step")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", parents=[common, configured, tta], help="forecast one MSEQ file")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True, help="observation (last obs_len frames are used)")
    p.add_argument("--out", required=True)
    p.add_argument("--report", help="write the adaptation loss trajectory CSV here")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradcheck", parents=[common, configured], help="finite-difference gradient check")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--corrupt-gradient", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "tta", False) and getattr(args, "no_tta", False):
        parser.error("--tta and --no-tta are mutually exclusive")
    logging.basicConfig(level=args.log_level, stream=sys.stderr, force=True,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(args.threads)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return 1
    except (RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
