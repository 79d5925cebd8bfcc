"""Self-similarity image codec built on Collage operators (soft partitioned IFS)."""
from .collage import (
    CollageCode,
    LipschitzReport,
    SolveConfig,
    apply_collage,
    ct_bound,
    decode,
    decode_magnified,
    lipschitz_bound,
)
from .encoders import (
    EncoderConfig,
    encode_blockwise,
    encode_collage,
    encode_collage_gd,
    encode_collage_ls,
    fractalize_encode,
)
from .pifs import PifsCode, decode_pifs, encode_pifs, ls_affine_match
from .raster import PartitionScheme, RasterImage, load_image, save_image

__version__ = "0.1.0"
