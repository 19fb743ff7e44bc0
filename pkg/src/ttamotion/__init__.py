"""Test-time adaptive skeleton motion forecasting with meta-auxiliary learning."""

from .motion import (
    DatasetManifest,
    MotionSequence,
    SampleTask,
    SkeletonTopology,
    bone_length_loss,
    make_corrupted,
    make_scrambled,
    make_task,
    mpjpe,
    pad_with_seed,
    parse_motion_file,
    write_motion_file,
)
from .network import ModelConfig, MotionTTANet, build_model, predict_primary
from .training import TrainConfig, pretrain
from .meta import MetaConfig, inner_adapt, meta_train, tta_predict
from .synth import SynthSpec, gen_synthetic
from .harness import SetupSpec, build_setup_split, evaluate

__version__ = "0.1.0"
