"""Multi-task cross-task semi-supervised segmentation of 3D volumes."""
from .errors import *  # noqa: F401,F403
from .volumes import BinaryMask, Case, PhantomSpec, Volume, make_phantom, normalize, resize, split_dataset
from .transforms import inverse_sdm, sdm
from .network import Discriminator, MTCTLNet, NetConfig, init_params
from .losses import LossWeights, total_loss
from .uncertainty import McConfig, certainty_mask, entropy_map, mc_sample
from .metrics import MetricReport, overlap_metrics, paired_test, ravd, surface_distances
from .trainer import TrainConfig, evaluate, fit, init_state, load_checkpoint, save_checkpoint, train_step

__version__ = "0.1.0"
