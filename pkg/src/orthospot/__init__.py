"""Joint keyword spotting and speaker verification with two GRU branches
whose weights are pushed toward mutual orthogonality."""

from .dataset import AudioClip, CorpusSplit, Quadruplet, build_split, make_synthetic, scan_gscd
from .evaluator import compute_eer, evaluate
from .frontend import FeatureConfig, mfcc
from .model import ModelConfig, forward, init_params, load_checkpoint, save_checkpoint
from .trainer import TrainConfig, fit

__version__ = "0.1.0"

__all__ = [
    "AudioClip", "CorpusSplit", "Quadruplet", "build_split", "make_synthetic", "scan_gscd",
    "compute_eer", "evaluate", "FeatureConfig", "mfcc", "ModelConfig", "forward", "init_params",
    "load_checkpoint", "save_checkpoint", "TrainConfig", "fit",
]
