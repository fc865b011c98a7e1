"""Tiny configurations shared by the training-level tests."""

from bidir_adapt.config import ExperimentConfig, TrainingSchedule
from bidir_adapt.metrics import SsimConfig
from bidir_adapt.models import ArchConfig

TINY_ARCH = ArchConfig(noise_dim=2, gen_features=4, gen_blocks=1, disc_features=(4, 4), clf_conv=(4, 4),
                       clf_hidden=(8,))

TINY_YAML = """\
setting: synthetic
synthetic_n: 48
synthetic_size: 8
val_size: 16
seed: 3
arch: {noise_dim: 2, gen_features: 4, gen_blocks: 1, disc_features: [4, 4], clf_conv: [4, 4], clf_hidden: [8]}
schedule: {epochs: 2, eta_activation_epoch: 1, batch_size: 8, checkpoint_every: 1, eval_every: 1}
ssim: {window: 3}
"""


def tiny_config(**schedule):
    sched = dict(epochs=2, eta_activation_epoch=1, batch_size=8, checkpoint_every=1, eval_every=1)
    sched.update(schedule)
    return ExperimentConfig(setting="synthetic", synthetic_n=48, synthetic_size=8, arch=TINY_ARCH,
                            schedule=TrainingSchedule(**sched), ssim=SsimConfig(window=3), val_size=16, seed=3)
