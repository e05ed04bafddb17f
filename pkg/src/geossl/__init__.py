"""Self-supervised representation learning by predicting geometric transformations."""

from .dataset import (CifarSplit, PretextDataset, build_pretext_random, build_pretext_separate, export_pretext,
                      load_cifar10, normalization_stats, pretext_batches)
from .downstream import DownstreamConfig, RunResult, augmentation_policy, evaluate, train_downstream
from .errors import (ConfigurationError, FormatError, GeosslError, IngestionError, InvalidArgumentError,
                     TrainingAbort)
from .estimators import GeometricTransform, PretextFeatureExtractor, ProbeClassifier
from .experiment import ExperimentConfig, load_config, run_experiment, run_sweep
from .geometry import (TransformSet, TransformSpec, affine_warp, apply_transform, apply_transform_batch,
                       make_transform_set, rotate_degrees, rotate_quarter, scale_about_center, shear, translate)
from .models import (BackboneSpec, Checkpoint, attach_pretext_head, attach_probe_head, build_backbone,
                     shape_trace)
from .optim import lr_schedule
from .pretext import PretextTrainConfig, pretext_loss, train_pretext
from .report import emit_curves, emit_table

__version__ = "0.1.0"
