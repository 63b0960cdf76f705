"""hiermil: hierarchical attention MIL for volume-level quality classification.

A volume is a bag of axial slices; each sampled slice is a sub-bag of random
2D patches.  Gated-tanh attention pools patches into per-slice quality
predictions and distilled features, and a second attention tier pools those
into the volume-level prediction.  The package ships the model, three
comparison baselines under the same training harness, a synthetic phantom
dataset generator, metrics, attention-heatmap export, an analytic FLOP cost
model, and a CLI (``hiermil``).
"""

import os as _os

# The workload is many small GEMMs; BLAS thread pools lose more to sync than
# they gain, so default to one thread unless the user chose otherwise.  Only
# effective when numpy has not been imported yet.
_os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
_os.environ.setdefault("OMP_NUM_THREADS", "1")

from . import baselines, data, encoder, errors, evaluation, mil, models, nn, train
from .data import (Manifest, SubBagBatch, SynthConfig, Volume, binarize_score,
                   crop_subvolume, generate_synthetic_dataset, load_manifest,
                   load_volume, normalize_volume, sample_subbags, save_volume,
                   split_dataset)
from .encoder import EncoderConfig, build_encoder, build_encoder_3d, encode_batch
from .evaluation import (MetricReport, PatchRegime, VolumeRegime, accuracy, auroc,
                         compute_metrics, export_heatmap, f1, flop_cost)
from .mil import (AttentionParams, BagOutput, ClassifierParams, ForwardTrace,
                  ModelParams, SubBagOutput, attend_pool, attention_weights, bag_forward,
                  bag_loss, bce, compute_gradients, distill, hamil_forward,
                  init_model_params, joint_loss, subbag_forward, subbag_loss)
from .models import ModelSpec, build_harness
# the train() entry point stays on the submodule (hiermil.train.train) so the
# package attribute `train` keeps naming the module
from .train import (Checkpoint, TrainConfig, cosine_lr, evaluate_on_split,
                    harness_from_checkpoint, load_checkpoint, run_repeats,
                    save_checkpoint)

__version__ = "0.1.0"
