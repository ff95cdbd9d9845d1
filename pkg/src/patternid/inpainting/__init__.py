from .losses import FeatureNet, LossBreakdown, LossNaNError, discriminator_loss, generator_loss
from .models import (ARCHS, ArchitectureConfig, InpaintingModel, build_model, composite, count_parameters,
                     forward_inpaint, load_checkpoint, model_input, save_checkpoint)
from .train import InpaintSchedule, TrainingLog, evaluate_generator, train_inpainting

__all__ = [
    "ARCHS", "ArchitectureConfig", "FeatureNet", "InpaintSchedule", "InpaintingModel", "LossBreakdown",
    "LossNaNError", "TrainingLog", "build_model", "composite", "count_parameters", "discriminator_loss",
    "evaluate_generator", "forward_inpaint", "generator_loss", "load_checkpoint", "model_input",
    "save_checkpoint", "train_inpainting",
]
