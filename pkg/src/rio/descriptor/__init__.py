"""Two-scale 3D patch descriptor: layers, model, triplet training."""

from .model import (DescriptorModel, default_arch, forward, init_model, load_model,
                    model_from_bytes, model_to_bytes, save_model, tiny_arch)
from .train import (TripletBatch, TripletLossConfig, backward, describe_keypoints, mean_loss,
                    train, triplet_loss)

__all__ = [
    "DescriptorModel", "default_arch", "tiny_arch", "init_model", "forward",
    "save_model", "load_model", "model_to_bytes", "model_from_bytes",
    "TripletLossConfig", "TripletBatch", "triplet_loss", "backward", "train",
    "mean_loss", "describe_keypoints",
]
