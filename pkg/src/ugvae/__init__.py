"""Unsupervised global VAE: mixture-structured local latents modulated by a
group-level global latent, trained by stochastic variational inference."""

from .data import Dataset, GroupBatch, load_idx, make_synthetic, mix_domains, random_groups, structured_groups
from .errors import (CapacityError, ContractError, FormatError, InfiniteDivergenceError,
                     TrainingDivergence)
from .eval import (classify_embeddings, cross_interpolation, embed_batches, pca_2d, posterior_beta,
                   sample_grid, write_csv, write_pgm_grid)
from .generative import GenerativeConfig, decode_x, prior_beta, prior_d, prior_z_given, sample_group
from .inference import GroupPosterior, beta_contribution, classify_d, encode_z, infer_group
from .nets import LossNode, NetworkBundle, gradient_check, init_bundle
from .numerics import (CategoricalDist, DiagGaussian, RngStream, gaussian_log_density,
                       kl_categorical, kl_gaussian_diag, product_of_diag_gaussians,
                       reparameterize, sample_categorical)
from .objective import ElboBreakdown, group_elbo, local_elbo, loss
from .trainer import Checkpoint, TrainConfig, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"
