"""Learned image compression with a codec in the loop.

ComCNN shrinks an image to a half-resolution compact representation, a
block-DCT codec encodes it, and RecCNN restores the decoded, bicubic-upscaled
image. Both networks and their gradients are implemented directly on numpy.
"""

from .codec import Bitstream, bits_per_pixel, decode_image, encode_image
from .errors import ComrecError
from .metrics import psnr, ssim
from .models import ComCNN, RecCNN, pipeline_compress, pipeline_decompress
from .training import TrainConfig, algorithm1, desk_config, full_config

__all__ = [
    "Bitstream", "ComCNN", "ComrecError", "RecCNN", "TrainConfig", "algorithm1",
    "bits_per_pixel", "decode_image", "desk_config", "encode_image", "full_config",
    "pipeline_compress", "pipeline_decompress", "psnr", "ssim",
]
