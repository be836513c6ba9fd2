"""Desk-scale GAN lab: consistency-regularized training on toy data."""

import os as _os

# The workloads here are many small matmuls; BLAS thread pools only add
# overhead. Effective only if numpy is not yet imported; user env wins.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    _os.environ.setdefault(_var, "1")

from .augment import AugmentationSpec, Step, apply_pipeline, cutout, \
    flip_horizontal, perturb_latent, shift
from .autodiff import (CheckReport, DomainError, Graph, GraphError,
                       GradientMap, ShapeError, Tensor, apply_primitive,
                       backward, finite_diff_check)
from .data import (DatasetSpec, PriorSpec, load_external, load_icrd,
                   sample_prior, sample_real, save_icrd)
from .losses import (LossBreakdown, base_losses, bcr_discriminator_terms,
                     consistency_l2, generator_loss, hinge_losses, ns_losses,
                     wgan_losses, zcr_terms)
from .metrics import (GaussianMoments, MetricsRecord,
                      artifact_patch_fraction, fit_moments, frechet_distance,
                      mode_coverage, random_feature_map)
from .models import (ModelParams, NetworkSpec, discriminator_forward,
                     generator_forward, init_params, spectral_normalize)
from .optim import AdamState, adam_step, init_adam
from .train import (DivergenceError, TrainConfig, TrainState,
                    discriminator_step, generator_step, load_checkpoint,
                    save_checkpoint, train_loop)

__version__ = "0.1.0"
