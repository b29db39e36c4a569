"""CovTANet: tri-level attention segmentation plus joint diagnosis and severity prediction for CT volumes."""
from .attention import TAU, ChannelAttention, PixelAttention, SpatialAttention, tau_mask
from .checkpoint import ParameterStore
from .data import (SynthConfig, VolumeSample, load_dataset, load_volume, make_folds, resample_indices,
                   resample_slices, save_volume, synth_dataset, synth_generate)
from .errors import (ConfigError, CorruptDataError, CovTANetError, DataError, DivergenceError, DomainError,
                     InvalidInputError, InvalidShapeError, MissingAnnotationError, NumericError, ValidationError)
from .gradcheck import grad_check
from .losses import LossConfig, binary_cross_entropy, focal_tversky, joint_loss, tversky_index
from .metrics import MetricsReport, aggregate, cls_scores, confusion, seg_scores
from .regional import RegionalExtractor
from .segnet import ABLATIONS, SegNetConfig, SegOutput, TASegNet
from .trainer import (CovTANet, TrainConfig, evaluate, learning_rate, load_model, run_cv, seed_everything,
                      train_joint, train_segmentation)
from .volumetric import JointClassifier, VolumetricPath

__version__ = "0.1.0"
