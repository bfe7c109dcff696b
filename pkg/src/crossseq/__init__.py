"""Semi-supervised two-sequence segmentation with feature decomposition and mean-teacher CSE."""

from .cfd import CFD, Decomposition, LcscConfig, PredNet, decompose, decomposition_loss, pearson_cc, soft_threshold
from .config import DataConfig, ExperimentConfig, load_config
from .data import PhantomConfig, SlicePair, Volume, make_phantom, normalize, slice_pairs, split_dataset
from .model import CrossSeqNet
from .segnet import Prediction, SegNet, SegNetConfig

__version__ = "0.1.0"
