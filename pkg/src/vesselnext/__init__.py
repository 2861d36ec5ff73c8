"""vesselnext: retinal vessel segmentation toolkit.

A hybrid convolution/attention U-Net with sub-sampled attention and
all-scale token fusion, plus the full fundus pipeline: preprocessing,
patch training, overlap-stitch inference, and vessel-specific metrics.
Everything runs on a small self-contained autodiff core.
"""

__version__ = "0.1.0"

from .core import Tape, Tensor, backward

__all__ = ["Tensor", "Tape", "backward", "__version__"]
