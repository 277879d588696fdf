"""lungcad: two-stage lung-CT detection/diagnosis pipeline with
phantom-based verification.

Subpackages follow the pipeline order: volume -> augment/sampling ->
inference -> candidates -> nnet/mil -> metrics, with phantom supplying
synthetic ground truth and cli tying everything together.
"""

from ._kernels import HAVE_COMPILED

__version__ = "0.1.0"
__all__ = ["HAVE_COMPILED", "__version__"]
