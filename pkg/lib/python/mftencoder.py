"""
Transformer encoder with multihead cross patch attention, and the classifier
head.

Only the CLS token asks questions.  For a sequence X of n+1 tokens::

    Q = X[0] . W_q            [1 x d]
    K = X . W_k, V = X . W_v  [(n+1) x d]

each of the h heads attends with Z = softmax(Q_h K_h^T / sqrt(d/h)), a
probability vector over the n+1 tokens, and the concatenated head outputs go
through the single projection W_l and dropout.  The result y'_cls is broadcast
and added to every row of the block input, then a pre-norm MLP residual
follows::

    y   = broadcast(mCrossPA(LN1(X))) + X
    out = y + MLP(LN2(y))

The classifier reads token row 0 of the last block, normalizes it and maps it
to class logits.
"""

__author__ = 'MFT fusion developers'


# stdlib imports
import math

# mft imports
from mfttensor import (ParamGroup, LayerNorm, ConfigError, DimensionError,
                       uniform_init, zeros, as_tensor, narrow, reshape,
                       transpose, matmul, softmax, scale, add, gelu, dropout,
                       scope)


__all__ = ('EncoderBlockParams', 'ClassifierParams', 'mcrosspa',
           'encoder_block', 'classify')


class EncoderBlockParams(ParamGroup):
    """
    Weights of one encoder block of width 'width' with 'heads' heads.
    """

    def __init__(self, width, heads, hidden, dropout_rate, rng):
        if heads < 1 or width % heads:
            raise ConfigError("Width %d is not divisible by %d heads." %
                              (width, heads))
        self.W_q = uniform_init(rng, (width, width), width)
        self.W_k = uniform_init(rng, (width, width), width)
        self.W_v = uniform_init(rng, (width, width), width)
        self.W_l = uniform_init(rng, (width, width), width)
        self.ln1 = LayerNorm(width)
        self.ln2 = LayerNorm(width)
        self.mlp_w1 = uniform_init(rng, (width, hidden), width)
        self.mlp_b1 = zeros(hidden)
        self.mlp_w2 = uniform_init(rng, (hidden, width), hidden)
        self.mlp_b2 = zeros(width)
        self._heads = heads
        self._dropout_rate = dropout_rate

    heads = property(lambda self: self._heads)
    dropout_rate = property(lambda self: self._dropout_rate)
    width = property(lambda self: self.W_q.shape[0])
    head_dim = property(lambda self: self.width // self._heads)


class ClassifierParams(ParamGroup):

    def __init__(self, width, classes, rng):
        if classes < 2:
            raise ConfigError("Need at least 2 classes, got %d." % classes)
        self.ln = LayerNorm(width)
        self.head_weight = uniform_init(rng, (width, classes), width)
        self.head_bias = zeros(classes)



def _split_heads(x, heads):
    "[N x T x d] -> [N x h x T x d/h]."
    n, t, d = x.shape
    return transpose(reshape(x, (n, t, heads, d // heads)), (0, 2, 1, 3))

def mcrosspa(seq, p, training=False, rng=None, attention=None):
    """
    Cross patch attention of the CLS row over the whole [N x T x d] sequence.
    Returns the [N x 1 x d] fused CLS token.  If 'attention' is a list, the
    [N x h x 1 x T] attention weights are appended to it.
    """
    seq = as_tensor(seq)
    if seq.ndim != 3 or seq.shape[2] != p.width:
        raise DimensionError("Attention of width %d given sequence %s." %
                             (p.width, list(seq.shape)))
    n, t, d = seq.shape
    with scope('attention'):
        q = _split_heads(matmul(narrow(seq, 1, 0, 1), p.W_q), p.heads)
        k = _split_heads(matmul(seq, p.W_k), p.heads)
        v = _split_heads(matmul(seq, p.W_v), p.heads)

        scores = scale(matmul(q, transpose(k, (0, 1, 3, 2))),
                       1.0 / math.sqrt(p.head_dim))
        z = softmax(scores, axis=-1)
        if attention is not None:
            attention.append(z.data)

        fused = reshape(transpose(matmul(z, v), (0, 2, 1, 3)), (n, 1, d))
        return dropout(matmul(fused, p.W_l), p.dropout_rate, training, rng)

def encoder_block(seq_in, p, training=False, rng=None, attention=None):
    """
    One pre-norm encoder block; the output has the shape of the input.
    """
    seq_in = as_tensor(seq_in)
    y = add(mcrosspa(p.ln1(seq_in), p, training, rng, attention), seq_in)
    with scope('mlp'):
        h = add(matmul(p.ln2(y), p.mlp_w1), p.mlp_b1)
        h = dropout(gelu(h), p.dropout_rate, training, rng)
        h = add(matmul(h, p.mlp_w2), p.mlp_b2)
        h = dropout(h, p.dropout_rate, training, rng)
    return add(y, h)

def classify(seq_out, p):
    """
    Class logits [N x classes] from token row 0.
    """
    seq_out = as_tensor(seq_out)
    n, _, d = seq_out.shape
    cls = reshape(narrow(seq_out, 1, 0, 1), (n, d))
    return add(matmul(p.ln(cls), p.head_weight), p.head_bias)
