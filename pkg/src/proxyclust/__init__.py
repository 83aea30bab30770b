"""proxyclust: fine-grained image clustering via textual-condition distillation.

A frozen conditional denoiser is inverted per image: a shared extractor
maps a mid-block feature to a proxy embedding that, inserted into the
text-condition template, minimizes the (foreground-masked) denoising
loss.  Images are then grouped by clustering the proxies with a
neighborhood-consistency head.
"""

__version__ = "0.1.0"

from .config import RunConfig, toy_profile  # noqa: F401
from .kernels import BACKEND as KERNEL_BACKEND  # noqa: F401
