"""Vision-language crop/weed segmentation: data tooling, model, training and experiments."""

from vlws.core import PALETTE, ClassPalette, SampleRecord, mask_to_onehot, validate_sample

__version__ = "0.1.0"

__all__ = ["PALETTE", "ClassPalette", "SampleRecord", "mask_to_onehot", "validate_sample"]
