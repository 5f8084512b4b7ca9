"""Contrastive-learning workbench: attention-fusion projection heads,
contrastive losses, and subspace-cluster geometry checks."""

from .autodiff import Tape, Var, finite_diff, grad
from .errors import (ConfigurationError, DegenerateInputError, FormatError,
                     FusionLabError, ShapeError, TapeError, TrainingDiverged,
                     UnsupportedError)
from .geometry import (AffinityRecord, ClusteredBatch, FusionBound,
                       IntegrityResult, SubspaceEnsemble, cluster_integrity,
                       construct_thm1_weights, fusion_iterate,
                       generate_ensemble, noise_bounds, rho_brute, rho_greedy,
                       sample_batch, sharpness)
from .heads import (FfnLayer, MultiHeadBlock, ProjectionHead, TransFusionBlock,
                    head_forward, init_head, load_head, multihead_forward,
                    save_head, transfusion_forward)
from .losses import (LossValue, TargetAffinity, adjacent_pairs, build_target,
                     g_normalize, jsd_loss, kl_softmax_loss, nt_xent)
from .pipeline import (Dataset, MetricsReport, RunConfig, augment,
                       block_alignment, encode, evaluate, load_mnist, train)
from .rng import Rng

__version__ = "0.1.0"
