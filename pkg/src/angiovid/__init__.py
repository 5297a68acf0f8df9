"""Knowledge-mask-guided autoregressive fundus-to-angiography video generation, with evaluation and transfer probes."""

from .errors import AngioError

__version__ = "0.1.0"
__all__ = ["AngioError", "__version__"]
