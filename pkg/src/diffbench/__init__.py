"""Action-diffusion visuomotor policies with a desk-scale benchmark harness."""

from .data import EpisodeRecord, Normalizer, fit_normalizer, quat_to_rot6d, split_train_val
from .errors import ArchiveError, ConfigurationError, DomainError, ProtocolError
from .policy import DiffusionPolicy, ExecutionConfig, select_executed_slice
from .scheduler import NoiseSchedule, add_noise, build_schedule, denoise_step
from .unet import ConditionalUnet1d, DenoiserConfig, film_modulate, sinusoidal_embed
from .vision import EncoderRegime, ObservationEncoder, ObservationWindow, preprocess_frames

__all__ = [
    "ArchiveError", "ConfigurationError", "DomainError", "ProtocolError",
    "NoiseSchedule", "build_schedule", "add_noise", "denoise_step",
    "ConditionalUnet1d", "DenoiserConfig", "sinusoidal_embed", "film_modulate",
    "ObservationWindow", "ObservationEncoder", "EncoderRegime", "preprocess_frames",
    "DiffusionPolicy", "ExecutionConfig", "select_executed_slice",
    "EpisodeRecord", "Normalizer", "fit_normalizer", "quat_to_rot6d", "split_train_val",
]

__version__ = "0.1.0"
