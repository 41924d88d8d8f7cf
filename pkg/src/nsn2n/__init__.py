"""Self-supervised denoising of slice volumes trained on neighbouring-slice pairs."""

from .errors import CorruptFileError, DivergedError, NSN2NError, UnsupportedVersionError
from .filters import LpfParams, lpf, median_filter, nlm_filter
from .metrics import MetricsReport, evaluate_volume, psnr, ssim
from .model import (
    AdamState,
    DenoiserModel,
    ModelConfig,
    adam_step,
    backward,
    forward,
    init_model,
    load_checkpoint,
    lr_schedule,
    save_checkpoint,
)
from .pairing import (
    DEFAULT_THRESHOLDS,
    WeightedPair,
    build_training_set,
    compute_weight_matrix,
    load_training_set,
    save_training_set,
    weight_diagnostics,
)
from .synth import NoiseSpec, PhantomSpec, add_noise, make_phantom
from .train import TrainConfig, TrainHistory, denoise_volume, ic_loss, rc_loss, recon_loss, total_loss, train
from .volume import Volume, load_volume, normalize, resample_slice, resample_volume, save_volume

__version__ = "0.1.0"
