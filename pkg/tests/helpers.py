"""Shared fixtures for the test suite and the acceptance gate."""

import tempfile

import torch

from ttamotion.harness import SetupSpec, build_setup_split, evaluate, load_tasks
from ttamotion.losses import loss_joint
from ttamotion.meta import MetaConfig, meta_train
from ttamotion.motion import read_skeleton
from ttamotion.network import ModelConfig, build_model, collate
from ttamotion.synth import SynthSpec, gen_synthetic
from ttamotion.training import TrainConfig, pretrain

# 8 tasks memorised with a flat rate: every step is a full epoch here, so the
# per-epoch decay would otherwise shrink the rate to ~0 long before step 500
OVERFIT_TRAIN = TrainConfig(learning_rate=1e-2, decay_factor=1.0, batch_size=8, epochs=500,
                            resample_companions=False)


def synthetic_tasks(spec: SynthSpec, cfg: ModelConfig, seed: int = 0):
    with tempfile.TemporaryDirectory() as d:
        manifest, _ = gen_synthetic(spec, d)
        return read_skeleton(manifest.topology_path), load_tasks(manifest, cfg, seed)


def overfit_fixture(train: TrainConfig = OVERFIT_TRAIN, seed: int = 0):
    """Joint loss over the whole fixture before and after training, and the step count."""
    cfg = ModelConfig.miniature()
    spec = SynthSpec(n_categories=2, n_subjects=2, seqs_per_pair=2, n_joints=3, T=4, horizon=2, seed=seed)
    topo, tasks = synthetic_tasks(spec, cfg, seed)
    assert len(tasks) == 8
    model = build_model(cfg, topo, seed)
    batch = collate(tasks)

    def full_loss():
        with torch.no_grad():
            return loss_joint(model(*batch.inputs()), batch, topo, cfg).item()

    initial = full_loss()
    steps = []
    pretrain(model, tasks, train, on_step=lambda s, _: steps.append(s))
    return initial, full_loss(), len(steps)


# acceptance protocol: corpus size fixed by the criteria, width kept at miniature scale
PROTOCOL_SPEC = dict(n_categories=4, n_subjects=3, seqs_per_pair=20)
PROTOCOL_MODEL = dict(n_joints=17, channels=8, n_shared_blocks=1, heads=2, head_dim=4)
PROTOCOL_EPOCHS = 60


def tta_protocol(seed: int, steps=(0, 6), epochs: int = PROTOCOL_EPOCHS, **model_overrides) -> dict[int, float]:
    """Setup (iii) with the last category held out: pretrain, meta-train, then mean test MPJPE per step count."""
    cfg = ModelConfig(**{**PROTOCOL_MODEL, **model_overrides})
    meta_cfg = MetaConfig(seed=seed)
    with tempfile.TemporaryDirectory() as d:
        manifest, _ = gen_synthetic(SynthSpec(**PROTOCOL_SPEC, seed=seed), d)
        topo = read_skeleton(manifest.topology_path)
        train, test = build_setup_split(manifest, SetupSpec("iii", manifest.categories()[-1]))
        model = build_model(cfg, topo, seed)
        params = pretrain(model, load_tasks(train, cfg, seed), TrainConfig(epochs=epochs, seed=seed))
        params = meta_train(model, params, load_tasks(train, cfg, seed), meta_cfg)
        test_tasks = load_tasks(test, cfg, seed)
        return {i: evaluate(model, params, test_tasks, meta_cfg, tta=i > 0, steps=i, eval_seed=seed).mean_mpjpe
                for i in steps}
