"""Masked-autoencoder laboratory with supervised attention-driven token masking."""

from .data import AugmentationRecord, ImageDataset, generate_synthetic_lesion_dataset, load_image_folder
from .masking import (MaskingRatios, MaskingWeights, TokenPartition, extract_masking_weights, partition,
                      random_partition, sample_indices)
from .metrics import FlopsReport, MaskPrecisionReport, count_flops, mask_precision
from .model import MaskedAutoencoderViT, PatchConfig, load_checkpoint, save_checkpoint
from .training import LossConfig, TrainRunConfig, evaluate, finetune, pretrain, update_masking_weights

__version__ = "0.1.0"
