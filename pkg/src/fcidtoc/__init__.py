"""Fine/coarse cross-modal disentangling with training-free codebook dimension selection."""

from .codebook import (
    Codebook,
    DimensionMask,
    DimensionScore,
    TOCSelector,
    average_similarity,
    load_codebook,
    per_dim_similarity,
    per_dim_variance,
    save_codebook,
    select_dims,
    toc_scores,
)
from .errors import FcidTocError, FormatError, NonFiniteError, ValidationError
from .evaluation import (
    ActivationStats,
    CmgResult,
    MaskedReconRow,
    VQAutoencoder,
    activation_stats,
    categorize,
    cmg_run,
    masked_recon_sweep,
    probe_disentanglement,
    retrieval_eval,
    similarity_report,
)
from .losses import club_estimate, cpc_loss, infonce_loss, total_loss
from .model import FCID, FcidModel, TrainConfig, train
from .quantizer import VectorQuantizer, mmema_update, quantize
from .synth import MultimodalDataset, SynthConfig, generate, split

__version__ = "0.1.0"
