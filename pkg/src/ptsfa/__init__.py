"""Point-cloud domain adaptation by progressive target-styled feature augmentation."""

from .datagen import PointCloudDataset, generate_domain, read_dataset, write_dataset
from .model import ModelParams, init_params
from .trainer import RunConfig, evaluate, spl_finetune, train

__version__ = "0.1.0"

__all__ = [
    "ModelParams",
    "PointCloudDataset",
    "RunConfig",
    "evaluate",
    "generate_domain",
    "init_params",
    "read_dataset",
    "spl_finetune",
    "train",
    "write_dataset",
]
