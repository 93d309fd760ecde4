"""
Spectral-spatial feature extraction for HSI patches.

Two stages turn a batch of [k x k x B] HSI patches into [64 x k x k] feature
maps:

1. A Conv3D block: the patch gets a channel axis, goes through a 3x3x9 3-d
   convolution (padding 1x1x0, 8 output channels), batch norm and ReLU.  The
   spatial extents are kept, the spectral axis shrinks by 8.

2. A HetConv2D block: the 8 feature channels and the B-8 remaining bands are
   folded into 8*(B-8) channels (flat index c*(B-8)+d), and two convolutions
   run in parallel on them: a grouped 3x3 one (4 groups, padding 1) and a
   pointwise 1x1 one (padding 0).  Their outputs are summed, then batch
   normalized and passed through ReLU.

The pointwise branch uses padding 0: a 1x1 kernel with padding 1 would grow the
map by two pixels and the sum would not be defined.
"""

__author__ = 'MFT fusion developers'


# mft imports
from mfttensor import (ParamGroup, BatchNorm, ConfigError, DimensionError,
                       uniform_init, zeros, reshape, transpose, add, conv2d,
                       conv3d, batch_norm2d, batch_norm3d, relu, as_tensor)


__all__ = ('ExtractorParams', 'conv3d_block', 'hetconv2d_sum',
           'hetconv2d_block', 'extract_features',
           'CONV3D_CHANNELS', 'SPECTRAL_TAPS', 'HET_GROUPS')


CONV3D_CHANNELS = 8
"Output channels of the Conv3D block."

SPECTRAL_TAPS = 9
"Spectral extent of the Conv3D kernel."

HET_GROUPS = 4
"Groups of the HetConv2D grouped branch."


class ExtractorParams(ParamGroup):
    """
    Learnable tensors of both extraction blocks for 'bands' input bands and
    'width' output channels.
    """

    def __init__(self, bands, width, rng):
        if bands < SPECTRAL_TAPS:
            raise ConfigError("Need at least %d spectral bands, got %d." %
                              (SPECTRAL_TAPS, bands))
        taps = 3 * 3 * SPECTRAL_TAPS
        self.conv3d_weight = uniform_init(
            rng, (CONV3D_CHANNELS, 1, 3, 3, SPECTRAL_TAPS), taps)
        self.conv3d_bias = zeros(CONV3D_CHANNELS)
        self.bn3d = BatchNorm(CONV3D_CHANNELS)

        channels = CONV3D_CHANNELS * (bands - SPECTRAL_TAPS + 1)
        per_group = channels // HET_GROUPS
        self.het_group_weight = uniform_init(
            rng, (width, per_group, 3, 3), per_group * 9)
        self.het_group_bias = zeros(width)
        self.het_point_weight = uniform_init(rng, (width, channels, 1, 1),
                                             channels)
        self.het_point_bias = zeros(width)
        self.bn2d = BatchNorm(width)

        self._bands = bands

    bands = property(lambda self: self._bands)


def conv3d_block(x_h, p, training):
    """
    [N x k x k x B] patches to [N x 8 x k x k x (B-8)] features.
    """
    x_h = as_tensor(x_h)
    if x_h.ndim != 4 or x_h.shape[1] != x_h.shape[2]:
        raise DimensionError("Expected square [N x k x k x B] patches, got %s." %
                             list(x_h.shape))
    if x_h.shape[3] != p.bands:
        raise ConfigError("Patches have %d bands, the extractor expects %d." %
                          (x_h.shape[3], p.bands))
    x = reshape(x_h, (x_h.shape[0], 1) + x_h.shape[1:])
    x = conv3d(x, p.conv3d_weight, p.conv3d_bias, padding=(1, 1, 0))
    return relu(batch_norm3d(x, p.bn3d, training))

def _fold(x_in):
    "(N, 8, k, k, D) -> (N, 8*D, k, k), flat channel index c*D + d."
    n, c, h, w, d = x_in.shape
    x = transpose(x_in, (0, 1, 4, 2, 3))
    return reshape(x, (n, c * d, h, w))

def hetconv2d_sum(x_in, p):
    """
    The two parallel HetConv2D branches summed, before normalization.
    """
    x = _fold(as_tensor(x_in))
    grouped = conv2d(x, p.het_group_weight, p.het_group_bias,
                     groups=HET_GROUPS, padding=1)
    pointwise = conv2d(x, p.het_point_weight, p.het_point_bias,
                       groups=1, padding=0)
    return add(grouped, pointwise)

def hetconv2d_block(x_in, p, training):
    """
    [N x 8 x k x k x (B-8)] to [N x width x k x k].
    """
    return relu(batch_norm2d(hetconv2d_sum(x_in, p), p.bn2d, training))

def extract_features(x_h, p, training):
    return hetconv2d_block(conv3d_block(x_h, p, training), p, training)
