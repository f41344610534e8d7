"""Deep over-sampling: synthetic embedding targets from in-class deep-feature
neighbors for CNN training on class-imbalanced data."""
from .data_io import (Dataset, IdxFormatError, ImbalanceSpec, augment_mirror_rotate,
                      load_idx, make_imbalanced, make_imbalanced_gaussian,
                      make_imbalanced_random, save_idx, synth_blobs)
from .dualhead_net import (DataError, NetworkConfig, Parameters, backprop_mtl,
                           backprop_stl, classify, embed, init_params,
                           load_checkpoint, predict_proba, save_checkpoint, sgd_step)
from .evaluation import (MetricsReport, auprc, class_metrics, confusion_matrix,
                         evaluate_posteriors, in_class_variance, knn_classify,
                         logistic_probe)
from .numerics import DimensionError
from .overloading import (CapacityError, EmbeddingStore, build_weighted_set,
                          compute_embeddings, distance_matrix, select_neighbors)
from .trainer import TrainPlan, suggest_params, train_dos, train_stl

__version__ = "0.1.0"
