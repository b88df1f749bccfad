"""Filtering autoencoder for structural anomaly detection.

Corruption synthesis, symmetric-noise reconstruction training, anomaly maps,
ROC evaluation and numerical checks of the small-noise loss expansion.
"""

from ._validation import ContractError, NumericalError
from .anomaly_map import (SmoothingSpec, anomap, delta, delta_gms, delta_mse, delta_ssim,
                          image_score, mean_filter, segment)
from .corruption import (CorruptionConfig, CorruptionError, TrainingPair, compose_corruption,
                         generate_blob_mask, generate_curve_mask, make_training_pair,
                         sample_texture)
from .estimator import FilteringAutoencoder
from .evaluation import (AblationReport, BenchmarkConfig, LabeledSample, MetricsReport,
                         UndefinedMetricError, ablation, auroc, evaluate, pixel_auroc,
                         synth_dataset)
from .imageio import read_pnm, write_pnm
from .network import (NetworkConfig, ParamVector, conv_autoencoder, dense_autoencoder,
                      forward, jacobian, laplacian, load_checkpoint, save_checkpoint)
from .training import (TrainSchedule, TrainState, TrainingDivergence, adam_step, gradient,
                       loss_dae, loss_fae, loss_weighted, train)

__version__ = "0.1.0"
