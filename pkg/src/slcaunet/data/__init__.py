"""Volume containers, SVOL I/O, synthetic phantoms and preprocessing."""
from .phantom import DEFAULT_INTENSITIES, PhantomError, PhantomSpec, generate_phantom
from .preprocess import normalize, split
from .svol import (
    BadMagicError,
    DtypeMismatchError,
    SvolError,
    TruncatedError,
    decode_svol,
    encode_svol,
    read_svol,
    write_svol,
)
from .volumes import (
    BACKGROUND,
    BRATS_TO_INTERNAL,
    EDEMA,
    ENHANCING,
    MODALITIES,
    NECROSIS,
    LabelVolume,
    MultiModalVolume,
    remap_labels,
)

__all__ = [
    "BACKGROUND", "BRATS_TO_INTERNAL", "BadMagicError", "DEFAULT_INTENSITIES", "DtypeMismatchError", "EDEMA",
    "ENHANCING", "LabelVolume", "MODALITIES", "MultiModalVolume", "NECROSIS", "PhantomError", "PhantomSpec",
    "SvolError", "TruncatedError", "decode_svol", "encode_svol", "generate_phantom", "normalize",
    "read_svol", "remap_labels", "split", "write_svol",
]
