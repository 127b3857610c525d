from .dataset import IqaDataset
from .formats import (FormatError, load_checkpoint, load_dataset, load_trigger, save_checkpoint, save_dataset,
                      save_trigger)
from .synthetic import SynthConfig, gen_synthetic, mos_from_severity

__all__ = [
    "FormatError",
    "IqaDataset",
    "SynthConfig",
    "gen_synthetic",
    "load_checkpoint",
    "load_dataset",
    "load_trigger",
    "mos_from_severity",
    "save_checkpoint",
    "save_dataset",
    "save_trigger",
]
