"""
The multimodal fusion transformer as a whole: configuration, the complete set
of learnable tensors, and the forward pass.

Usage::

    config = ModelConfig(bands=144, aux_channels=1, classes=15)
    params = init_params(config, seed=0)
    logits = mft_forward(x_h, x_l, params)

where x_h is a batch of [N x k x k x B] HSI patches and x_l the co-registered
[N x k x k x C] auxiliary patches.

Parameter names follow the attribute paths of MftParams, e.g.
'extractor.conv3d_weight' or 'blocks.0.W_q'; named_tensors() yields them in the
canonical order used by checkpoints.

The CLS token normally comes from the auxiliary modality.  With cls='learned'
it is a free learnable vector and the auxiliary input is ignored: this is the
HSI-only baseline.
"""

__author__ = 'MFT fusion developers'


# mft imports
from mfttensor import (ParamGroup, Rng, ConfigError, DimensionError,
                       normal_init, as_tensor, transpose, concat, scope)
from mftextract import (ExtractorParams, conv3d_block,
                        hetconv2d_block, CONV3D_CHANNELS, SPECTRAL_TAPS,
                        HET_GROUPS)
from mfttoken import (HsiTokenizerParams, AuxTokenizerParams, SequenceParams,
                      VARIANTS, hsi_tokenize, aux_tokenize, assemble_sequence)
from mftencoder import (EncoderBlockParams, ClassifierParams, encoder_block,
                        classify)


__all__ = ('ModelConfig', 'MftParams', 'LearnedClsParams', 'init_params',
           'count_parameters', 'mft_forward', 'addopts', 'fromopts',
           'MODALITIES', 'CLS_SOURCES')


MODALITIES = ('lidar', 'sar', 'dsm', 'msi')
CLS_SOURCES = ('aux', 'learned')

_STREAM_INIT = 0
"Rng key of the initialization substream."


class ModelConfig(object):
    """
    Architecture of one MFT instance.  Options are given as keywords; the ones
    not given take the class defaults below.
    """

    _def_patch = 11
    """Side of the square patches."""

    _def_tokens = 4
    """Number n of HSI patch tokens."""

    _def_heads = 8
    """Attention heads."""

    _def_depth = 1
    """Number of encoder blocks."""

    _def_embed_dim = 64
    """Token width."""

    _def_mlp_hidden = 256
    """Hidden width of the encoder MLP."""

    _def_tokenizer = 'channel'
    """Auxiliary tokenizer variant, 'pixel' or 'channel'."""

    _def_dropout = 0.1
    """Dropout rate of the sequence, attention and MLP."""

    _def_cls = 'aux'
    """Source of the CLS token: 'aux' or 'learned' (HSI-only baseline)."""

    _def_modality = 'lidar'
    """Name of the auxiliary modality, informational."""

    def __init__(self, bands, aux_channels, classes, **options):
        self.bands = int(bands)
        self.aux_channels = int(aux_channels)
        self.classes = int(classes)
        for name in ('patch', 'tokens', 'heads', 'depth', 'embed_dim',
                     'mlp_hidden', 'tokenizer', 'dropout', 'cls', 'modality'):
            setattr(self, name, options.pop(name, getattr(self, '_def_' + name)))
        if options:
            raise ConfigError("Unknown model options: %s." %
                              ', '.join(sorted(options)))
        self.validate()

    def validate(self):
        if self.bands < SPECTRAL_TAPS:
            raise ConfigError("Need at least %d bands, got %d." %
                              (SPECTRAL_TAPS, self.bands))
        if self.aux_channels < 1:
            raise ConfigError("Need at least one auxiliary channel.")
        if self.classes < 2:
            raise ConfigError("Need at least 2 classes, got %d." % self.classes)
        if self.patch < 3 or self.patch % 2 == 0:
            raise ConfigError("Patch size must be odd and at least 3, got %d." %
                              self.patch)
        if self.tokens < 1 or self.depth < 1:
            raise ConfigError("Tokens and depth must be positive.")
        if self.heads < 1 or self.embed_dim % self.heads:
            raise ConfigError("Embedding width %d is not divisible by %d heads." %
                              (self.embed_dim, self.heads))
        if self.tokenizer not in VARIANTS:
            raise ConfigError("Unknown tokenizer %r." % self.tokenizer)
        if self.cls not in CLS_SOURCES:
            raise ConfigError("Unknown CLS source %r." % self.cls)
        if self.modality not in MODALITIES:
            raise ConfigError("Unknown modality %r." % self.modality)
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("Dropout rate must be in [0, 1), got %r." %
                              self.dropout)

    def to_dict(self):
        return dict((name, getattr(self, name)) for name in
                    ('bands', 'aux_channels', 'classes', 'patch', 'tokens',
                     'heads', 'depth', 'embed_dim', 'mlp_hidden', 'tokenizer',
                     'dropout', 'cls', 'modality'))

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        return cls(d.pop('bands'), d.pop('aux_channels'), d.pop('classes'), **d)

    def __eq__(self, other):
        return isinstance(other, ModelConfig) and self.to_dict() == other.to_dict()

    def __repr__(self):
        return 'ModelConfig(%s)' % ', '.join(
            '%s=%r' % kv for kv in sorted(self.to_dict().items()))


class LearnedClsParams(ParamGroup):
    """
    A free CLS token, for the HSI-only baseline.
    """

    def __init__(self, width, rng):
        self.cls_token = normal_init(rng, (1, 1, width), 0.02)


class MftParams(ParamGroup):
    """
    Every learnable tensor of one MFT instance, in canonical order: extractor,
    HSI tokenizer, CLS source, sequence, encoder blocks, classifier.
    """

    def __init__(self, config, rng):
        d = config.embed_dim
        self.extractor = ExtractorParams(config.bands, d, rng.spawn(0))
        self.hsi_tokenizer = HsiTokenizerParams(d, config.tokens, rng.spawn(1))
        if config.cls == 'aux':
            self.aux_tokenizer = AuxTokenizerParams(
                config.aux_channels, d, config.tokenizer, rng.spawn(2))
        else:
            self.learned_cls = LearnedClsParams(d, rng.spawn(2))
        self.sequence = SequenceParams(config.tokens, d, config.dropout,
                                       rng.spawn(3))
        self.blocks = [EncoderBlockParams(d, config.heads, config.mlp_hidden,
                                          config.dropout, rng.spawn(4, i))
                       for i in range(config.depth)]
        self.classifier = ClassifierParams(d, config.classes, rng.spawn(5))
        self._config = config

    config = property(lambda self: self._config)


def init_params(config, seed):
    """
    Fresh parameters for 'config', fully determined by 'seed'.
    """
    return MftParams(config, Rng(seed, _STREAM_INIT))

def count_parameters(config):
    """
    Closed-form number of learnable scalars of 'config'.
    """
    d, b, n = config.embed_dim, config.bands, config.tokens
    c, k, hidden = config.aux_channels, config.classes, config.mlp_hidden
    folded = CONV3D_CHANNELS * (b - SPECTRAL_TAPS + 1)

    extractor = (CONV3D_CHANNELS * 3 * 3 * SPECTRAL_TAPS + CONV3D_CHANNELS
                 + 2 * CONV3D_CHANNELS
                 + d * (folded // HET_GROUPS) * 9 + d
                 + d * folded + d
                 + 2 * d)
    tokenizer = d * n + d * d
    if config.cls == 'learned':
        cls_source = d
    else:
        cout = 1 if config.tokenizer == 'pixel' else d
        cls_source = cout * c * 9 + cout + 2 * cout + cout + cout * d
    sequence = (n + 1) * d
    block = 4 * d * d + 2 * 2 * d + d * hidden + hidden + hidden * d + d
    classifier = 2 * d + d * k + k
    return (extractor + tokenizer + cls_source + sequence
            + config.depth * block + classifier)


def mft_forward(x_h, x_l, params, training=False, rng=None, trace=None):
    """
    Class logits [N x classes] for HSI patches 'x_h' [N x k x k x B] and
    auxiliary patches 'x_l' [N x k x k x C].  In train mode batch norm uses
    batch statistics and dropout draws from 'rng'.

    If 'trace' is a dict, it receives the intermediate tensors under the keys
    'conv3d', 'hetconv2d', 'patch_tokens', 'cls', 'sequence', 'blocks' and
    'attention' (one [N x h x 1 x n+1] array per block).
    """
    config = params.config
    x_h = as_tensor(x_h)
    if x_h.ndim != 4 or x_h.shape[1:] != (config.patch, config.patch,
                                          config.bands):
        raise DimensionError("Expected HSI patches [N x %d x %d x %d], got %s." %
                             (config.patch, config.patch, config.bands,
                              list(x_h.shape)))
    n = x_h.shape[0]
    if training and rng is None:
        rng = Rng(0)

    with scope('extractor'):
        x_in = conv3d_block(x_h, params.extractor, training)
        feat = hetconv2d_block(x_in, params.extractor, training)
    with scope('tokenizer'):
        patches = hsi_tokenize(feat, params.hsi_tokenizer)
        if config.cls == 'aux':
            x_l = as_tensor(x_l)
            if x_l.ndim != 4 or x_l.shape != (n, config.patch, config.patch,
                                              config.aux_channels):
                raise DimensionError(
                    "Expected auxiliary patches [%d x %d x %d x %d], got %s." %
                    (n, config.patch, config.patch, config.aux_channels,
                     list(x_l.shape)))
            cls = aux_tokenize(transpose(x_l, (0, 3, 1, 2)),
                               params.aux_tokenizer, training=training)
        else:
            cls = concat([params.learned_cls.cls_token] * n, axis=0)
        seq = assemble_sequence(cls, patches, params.sequence, training, rng)

    attention = []
    blocks = []
    x = seq.tokens
    for i, block in enumerate(params.blocks):
        with scope('encoder%d' % i):
            x = encoder_block(x, block, training, rng, attention)
        blocks.append(x)
    with scope('classifier'):
        logits = classify(x, params.classifier)

    if trace is not None:
        trace.update(conv3d=x_in, hetconv2d=feat, patch_tokens=patches,
                     cls=cls, sequence=seq.tokens, blocks=blocks,
                     attention=attention, logits=logits)
    return logits


#-------------------------------------------------------------------------------
# Support for initializing from the command-line.

def addopts(parser):
    """
    Add the architecture options on an argparse parser.
    """
    parser.add_argument('--tokenizer', choices=VARIANTS,
                        default=ModelConfig._def_tokenizer,
                        help="Auxiliary tokenizer variant")
    parser.add_argument('--tokens', type=int, default=ModelConfig._def_tokens,
                        help="Number of HSI patch tokens")
    parser.add_argument('--heads', type=int, default=ModelConfig._def_heads,
                        help="Attention heads")
    parser.add_argument('--depth', type=int, default=ModelConfig._def_depth,
                        help="Encoder blocks")
    parser.add_argument('--patch', type=int, default=ModelConfig._def_patch,
                        help="Patch side (odd)")
    parser.add_argument('--cls', choices=CLS_SOURCES,
                        default=ModelConfig._def_cls,
                        help="CLS token source; 'learned' is the HSI-only "
                        "baseline")

def fromopts(opts, scene):
    """
    Create the model configuration for 'scene' from parsed options.
    """
    return ModelConfig(scene.bands, scene.aux_channels, scene.classes,
                       patch=opts.patch, tokens=opts.tokens, heads=opts.heads,
                       depth=opts.depth, tokenizer=opts.tokenizer,
                       cls=opts.cls, modality=scene.modality)
