"""Lesion classification from mammograms with recombined-image features.

The pipeline preprocesses annotated views into lesion patches
(:mod:`sdcnn.imagecore`), learns a shallow CNN that maps low-energy or FFDM images to
"virtual" recombined images (:mod:`sdcnn.shallow_cnn`, :mod:`sdcnn.synthesizer`),
extracts deep features with a residual network (:mod:`sdcnn.deep_features`) and
classifies cases with gradient-boosted trees (:mod:`sdcnn.gbt`) under
cross-validation (:mod:`sdcnn.evaluation`).

Tables exchanged between stages are checked with the :meth:`@argument() <argument>`
and :meth:`@result() <result>` decorators against the schemas in
:mod:`sdcnn.schemas`; what happens on a violation is set by :mod:`sdcnn.mode`.
"""

try:
    import pandera.pandas as pa
except ImportError:  # pragma: no cover
    import sys

    import pandera as pa  # type: ignore[no-redef]

    sys.modules["pandera.pandas"] = pa


from . import checks, errors, schemas
from .contract import argument, result
from .mode import Modes, as_mode, get_mode, raises, set_mode, silent

del pa

__version__ = "0.1.0"

__all__ = [
    "Modes",
    "argument",
    "as_mode",
    "checks",
    "errors",
    "get_mode",
    "raises",
    "result",
    "schemas",
    "set_mode",
    "silent",
]
