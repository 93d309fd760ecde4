"""
Tokenization: from feature maps to the token sequence the encoder reads.

Both modalities use the same soft selection.  A feature map is flattened
row-major over (height, width) into S rows of width c, then::

    A      = softmax over S of (X_flat . W_a)^T      [t x S]
    X_Wb   = X_flat . W_b                            [S x d]
    tokens = A . X_Wb                                [t x d]

so every token is a convex combination of the projected spatial rows.

The HSI features give t = n patch tokens.  The auxiliary patch (LiDAR, SAR,
DSM, MS) first goes through a 3x3 convolution, batch norm and GELU, then gives
the single CLS token.  Two variants exist for the auxiliary path: the pixel
tokenizer convolves to 1 channel, the channel tokenizer to d channels.

The sequence is [CLS, patch_1, ..., patch_n] plus learnable position
embeddings, followed by dropout.
"""

__author__ = 'MFT fusion developers'


# mft imports
from mfttensor import (ParamGroup, BatchNorm, ConfigError, DimensionError,
                       uniform_init, normal_init, zeros, as_tensor, reshape,
                       transpose, matmul, softmax, concat, add, conv2d,
                       batch_norm2d, gelu, dropout)


__all__ = ('HsiTokenizerParams', 'AuxTokenizerParams', 'SequenceParams',
           'TokenSequence', 'VARIANTS', 'soft_tokenize', 'hsi_tokenize',
           'aux_tokenize', 'assemble_sequence')


VARIANTS = ('pixel', 'channel')
"Auxiliary tokenizer variants."


class HsiTokenizerParams(ParamGroup):

    def __init__(self, width, tokens, rng):
        if tokens < 1:
            raise ConfigError("Need at least one HSI token, got %d." % tokens)
        self.W_aH = uniform_init(rng, (width, tokens), width)
        self.W_bH = uniform_init(rng, (width, width), width)


class AuxTokenizerParams(ParamGroup):
    """
    Convolution, batch norm and tokenizer weights of the auxiliary path.  The
    pixel variant convolves to 1 channel, the channel variant to 'width'.
    """

    def __init__(self, channels, width, variant, rng):
        if variant not in VARIANTS:
            raise ConfigError("Unknown tokenizer variant %r (expected one of %s)." %
                              (variant, ', '.join(VARIANTS)))
        if channels < 1:
            raise ConfigError("Auxiliary modality needs at least one channel.")
        cout = 1 if variant == 'pixel' else width
        self.conv_weight = uniform_init(rng, (cout, channels, 3, 3),
                                        channels * 9)
        self.conv_bias = zeros(cout)
        self.bn = BatchNorm(cout)
        self.W_aL = uniform_init(rng, (cout, 1), cout)
        self.W_bL = uniform_init(rng, (cout, width), cout)
        self._variant = variant

    variant = property(lambda self: self._variant)


class SequenceParams(ParamGroup):

    def __init__(self, tokens, width, dropout_rate, rng):
        self.pos_embed = normal_init(rng, (tokens + 1, width), 0.02)
        self._dropout_rate = dropout_rate

    dropout_rate = property(lambda self: self._dropout_rate)


class TokenSequence(object):
    """
    An assembled [N x (n+1) x d] sequence.  Row 0 of every sample is the CLS
    token, rows 1..n are the HSI patch tokens.
    """

    def __init__(self, tokens):
        self.tokens = tokens

    @property
    def shape(self):
        return self.tokens.shape

    def cls(self):
        return self.tokens.data[:, 0, :]

    def patches(self):
        return self.tokens.data[:, 1:, :]



def soft_tokenize(x_flat, w_a, w_b, with_attention=False):
    """
    Softmax-weighted selection of tokens from [N x S x c] rows.  Returns the
    [N x t x d] tokens, and the [N x t x S] attention if requested.
    """
    logits = transpose(matmul(x_flat, w_a), (0, 2, 1))
    attention = softmax(logits, axis=-1)
    tokens = matmul(attention, matmul(x_flat, w_b))
    if with_attention:
        return tokens, attention
    return tokens

def _flatten(feat):
    "[N x c x h x w] -> [N x (h*w) x c], row-major over (h, w)."
    n, c, h, w = feat.shape
    return transpose(reshape(feat, (n, c, h * w)), (0, 2, 1))

def hsi_tokenize(feat, p, with_attention=False):
    """
    [N x d x k x k] HSI features to [N x n x d] patch tokens.
    """
    feat = as_tensor(feat)
    if feat.ndim != 4 or feat.shape[1] != p.W_aH.shape[0]:
        raise DimensionError("HSI tokenizer of width %d given features %s." %
                             (p.W_aH.shape[0], list(feat.shape)))
    return soft_tokenize(_flatten(feat), p.W_aH, p.W_bH, with_attention)

def aux_tokenize(x_l, p, variant=None, training=False, with_attention=False):
    """
    [N x C x k x k] auxiliary patches to the [N x 1 x d] CLS token.
    """
    if variant is not None and variant != p.variant:
        raise ConfigError("Requested the %s tokenizer with %s tokenizer weights." %
                          (variant, p.variant))
    x_l = as_tensor(x_l)
    if x_l.ndim != 4 or x_l.shape[1] != p.conv_weight.shape[1]:
        raise DimensionError("Auxiliary tokenizer for %d channels given %s." %
                             (p.conv_weight.shape[1], list(x_l.shape)))
    x = conv2d(x_l, p.conv_weight, p.conv_bias, groups=1, padding=1)
    x = gelu(batch_norm2d(x, p.bn, training))
    return soft_tokenize(_flatten(x), p.W_aL, p.W_bL, with_attention)

def assemble_sequence(cls, patches, p, training=False, rng=None):
    """
    Concatenate CLS and patch tokens, add the position embeddings and apply
    dropout (train mode only).
    """
    cls, patches = as_tensor(cls), as_tensor(patches)
    if (cls.ndim != 3 or patches.ndim != 3 or cls.shape[1] != 1 or
        cls.shape[0] != patches.shape[0] or cls.shape[2] != patches.shape[2]):
        raise DimensionError("Cannot assemble CLS %s with patches %s." %
                             (list(cls.shape), list(patches.shape)))
    seq = concat((cls, patches), axis=1)
    if seq.shape[1:] != p.pos_embed.shape:
        raise DimensionError("Sequence %s does not match position embeddings %s." %
                             (list(seq.shape[1:]), list(p.pos_embed.shape)))
    seq = add(seq, p.pos_embed)
    return TokenSequence(dropout(seq, p.dropout_rate, training, rng))
