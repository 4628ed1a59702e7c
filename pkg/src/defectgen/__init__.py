"""defectgen: mask-guided diffusion inpainting for few-shot defect synthesis.

The package synthesizes anomaly image + mask pairs on top of normal
images: a (toy-scale, fully verifiable) diffusion inpainting sampler
with perturbed prompt conditioning, localized in-mask noise injection,
semantic mask relocation, and feature-space quality metrics.
"""

__version__ = "0.1.0"

from .cama import (
    AlignResult,
    CandidateLine,
    KeypointTriple,
    PatchDescriptor,
    align,
    candidate_line,
    constrained_center,
    extract_keypoints,
    foreground_mask,
    relocate_mask,
    similarity_map,
)
from .config import PipelineConfig, load_config
from .dataset import DatasetLayout, augment_mask, ingest
from .denoiser import (
    AnalyticGaussianPredictor,
    ArchConfig,
    ConvDenoiser,
    InpaintCondition,
    LatentCodec,
    analytic_gaussian_backend,
    identity_codec,
    load_checkpoint,
    pool_codec,
    predict_noise,
    save_checkpoint,
    trainable_backend,
)
from .errors import (
    AlignmentError,
    CheckpointError,
    ConfigError,
    DataError,
    DefectgenError,
    DivergenceError,
    ParameterError,
    ShapeError,
)
from .metrics import FeatureConfig, FeatureSet, extract_features, ic_lpips, kid
from .pipeline import GenerationRecord, evaluate, generate, read_manifest, write_manifest
from .prompt import GppConfig, PromptEmbedding, init_embedding, perturb
from .sampler import SamplerState, ddim_step, forward_diffuse, mgni_step, sample_inpaint
from .schedule import (
    MgniConfig,
    NoiseSchedule,
    lambda_decay,
    make_linear_schedule,
    normalized_time,
)
from .trainer import (
    AnomalyExemplar,
    TrainConfig,
    gpp_loss,
    gpp_loss_and_grads,
    split_train_test,
    train,
)
