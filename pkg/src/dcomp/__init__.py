"""Self-supervised monocular depth completion, desk scale.

Subpackages follow the pipeline: ``tensor`` (autodiff engine), ``geometry``
(camera model and warping), ``layers`` (sparse and pixel-adaptive
convolutions), ``losses`` (training objective), ``pose`` (RANSAC-PnP),
``network`` (depth-completion model), ``training`` (optimizer and loop),
``data`` (datasets and synthetic scenes), ``evaluation`` (metrics), and
``cli`` (operator entry point).
"""

from .tensor import Tensor

__version__ = "0.1.0"

__all__ = ["Tensor", "__version__"]
