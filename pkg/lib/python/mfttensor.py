"""
A minimal dense-tensor kernel with reverse-mode gradients, just enough for the
multimodal fusion transformer and nothing more.

Values are Tensor objects wrapping a contiguous row-major numpy array.  When a
Tape is active, every operation whose inputs require gradients appends a record
to it; Tape.backward() then replays the records in reverse order::

    with Tape() as tape:
        loss = mean(mul(x, x))
    tape.backward(loss)
    print(x.grad)

Precision
---------

Storage and compute are 32-bit.  The gradient verifier re-executes the graph in
64-bit by entering the precision() context, in which every operation casts its
operands to float64 before computing::

    with precision(np.float64):
        ...

Randomness
----------

All randomness flows through Rng objects.  An Rng is a seed plus a tuple of
integer keys; spawn() derives an independent substream, so that a given
(epoch, batch) always sees the same stream no matter what ran before it.

Scopes and faults
-----------------

Operations recorded inside ``with scope('attention'):`` carry that name.  A tape
created with ``Tape(faults=('attention',))`` corrupts the gradients it delivers
to the leaf tensors of matching records.  This exists only as a negative
control for the verifier.
"""

__author__ = 'MFT fusion developers'


# stdlib imports
import contextlib
import logging
import math
import threading

# numpy and scipy imports
import numpy as np
from scipy.special import erf


__all__ = ('Tensor', 'Tape', 'Rng', 'ParamGroup', 'BatchNorm', 'LayerNorm',
           'Error', 'DimensionError', 'GroupedConvError', 'ConfigError',
           'VerifierError',
           'as_tensor', 'precision', 'default_dtype', 'scope', 'no_record',
           'record', 'add', 'sub', 'mul', 'scale', 'reshape', 'transpose',
           'concat', 'narrow', 'sum', 'mean', 'matmul', 'softmax',
           'layer_norm', 'batch_norm2d', 'batch_norm3d', 'conv2d', 'conv3d',
           'relu', 'gelu', 'dropout', 'grad_check', 'check_gradients',
           'uniform_init', 'normal_init', 'zeros', 'ones')


log = logging.getLogger(__name__)


class Error(Exception):
    """
    Root of all the errors raised by the MFT modules.
    """

class DimensionError(Error):
    """
    Operand shapes do not agree.
    """

class GroupedConvError(DimensionError):
    """
    Channel counts are not divisible by the number of convolution groups.
    """

class ConfigError(Error):
    """
    An invalid or inconsistent configuration.
    """

class VerifierError(Error):
    """
    The gradient verifier met non-finite values.
    """



#-------------------------------------------------------------------------------
# Thread-confined state: active precision, tape stack and scope names.

_local = threading.local()

def _state():
    if not hasattr(_local, 'tapes'):
        _local.tapes = []
        _local.scopes = []
        _local.dtype = np.float32
    return _local

def default_dtype():
    """
    Returns the dtype operations currently compute in.
    """
    return _state().dtype

@contextlib.contextmanager
def precision(dtype):
    """
    Context in which tensors are created and operations computed in 'dtype'.
    """
    st = _state()
    saved = st.dtype
    st.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        st.dtype = saved

@contextlib.contextmanager
def scope(name):
    """
    Label the operations recorded inside this context with 'name'.  Scopes
    nest and are joined with '/'.
    """
    st = _state()
    st.scopes.append(name)
    try:
        yield
    finally:
        st.scopes.pop()

@contextlib.contextmanager
def no_record():
    """
    Suspend recording, even if a tape is active further up.
    """
    st = _state()
    st.tapes.append(None)
    try:
        yield
    finally:
        st.tapes.pop()

def _active_tape():
    tapes = _state().tapes
    return tapes[-1] if tapes else None



#-------------------------------------------------------------------------------

class Tensor(object):
    """
    A dense n-dimensional array of reals with an optional gradient.
    """

    def __init__(self, data, requires_grad=False, dtype=None):
        data = np.asarray(data, dtype=dtype or default_dtype())
        if not data.flags.c_contiguous:
            data = np.ascontiguousarray(data)
        self.data = data

        self.grad = None
        "Gradient array of the same shape, filled by Tape.backward()."

        self.requires_grad = bool(requires_grad)

        self.is_leaf = True
        "False for tensors produced by a recorded operation."

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self):
        return 'Tensor(shape=%s, dtype=%s%s)' % (
            list(self.shape), self.data.dtype.name,
            ', requires_grad' if self.requires_grad else '')

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(value):
    """
    Wrap arrays and scalars as constant tensors; tensors pass through.
    """
    if isinstance(value, Tensor):
        return value
    return Tensor(value)

def _arr(t):
    "Operand data in the active precision."
    return t.data.astype(default_dtype(), copy=False)



class _Record(object):
    "One recorded operation."

    __slots__ = ('output', 'inputs', 'backward', 'scope')

    def __init__(self, output, inputs, backward, scope):
        self.output = output
        self.inputs = inputs
        self.backward = backward
        self.scope = scope


class Tape(object):
    """
    An ordered list of recorded operations.  Use as a context manager to make it
    the active tape for the current thread.
    """

    def __init__(self, faults=()):
        self.records = []
        self.faults = frozenset(faults)
        "Scope names whose leaf gradients are deliberately corrupted."

    def __enter__(self):
        _state().tapes.append(self)
        return self

    def __exit__(self, exc_type, exc_value, traceback):
        tapes = _state().tapes
        assert tapes and tapes[-1] is self
        tapes.pop()

    def __len__(self):
        return len(self.records)

    def record(self, output, inputs, backward):
        self.records.append(
            _Record(output, inputs, backward, '/'.join(_state().scopes)))

    def _faulty(self, scopename):
        return bool(self.faults) and any(
            part in self.faults for part in scopename.split('/'))

    def backward(self, loss, grad=None):
        """
        Replay the records in reverse order, propagating d(loss)/d(output) back
        to every input that requires a gradient.  Tensors that were not
        produced by a record on this tape receive their gradient in '.grad'
        (previous contents are replaced).
        """
        if grad is None:
            grad = np.ones_like(loss.data)
        grads = {id(loss): grad}
        tensors = {id(loss): loss}

        for rec in reversed(self.records):
            gout = grads.pop(id(rec.output), None)
            if gout is None:
                continue
            gins = rec.backward(gout)
            corrupt = rec.scope and self._faulty(rec.scope)
            for t, g in zip(rec.inputs, gins):
                if g is None or not t.requires_grad:
                    continue
                if corrupt and t.is_leaf:
                    g = g * 0.5
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
                    tensors[key] = t

        for key, g in grads.items():
            t = tensors[key]
            t.grad = np.asarray(g, dtype=t.data.dtype).reshape(t.shape)


def record(data, inputs, backward):
    """
    Wrap 'data' as the output of a differentiable operation.  'backward' maps
    the output gradient to a tuple of input gradients (None for inputs that
    take no gradient).  Nothing is recorded when no tape is active or when no
    input requires a gradient.
    """
    out = Tensor(data, dtype=default_dtype())
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.is_leaf = False
        tape.record(out, tuple(inputs), backward)
    return out



#-------------------------------------------------------------------------------
# Elementwise and structural operations.

def _unbroadcast(g, shape):
    "Sum 'g' down to 'shape', undoing numpy broadcasting."
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    x, y = _arr(a), _arr(b)
    return record(x + y, (a, b),
                  lambda g: (_unbroadcast(g, x.shape), _unbroadcast(g, y.shape)))

def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    x, y = _arr(a), _arr(b)
    return record(x - y, (a, b),
                  lambda g: (_unbroadcast(g, x.shape), -_unbroadcast(g, y.shape)))

def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    x, y = _arr(a), _arr(b)
    return record(x * y, (a, b),
                  lambda g: (_unbroadcast(g * y, x.shape),
                             _unbroadcast(g * x, y.shape)))

def scale(a, factor):
    """
    Multiply by a constant scalar.
    """
    factor = float(factor)
    return record(_arr(a) * factor, (a,), lambda g: (g * factor,))

def reshape(a, shape):
    x = _arr(a)
    return record(x.reshape(shape), (a,), lambda g: (g.reshape(x.shape),))

def transpose(a, axes):
    """
    Permute the axes of 'a'.
    """
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return record(np.transpose(_arr(a), axes), (a,),
                  lambda g: (np.transpose(g, inverse),))

def concat(tensors, axis):
    tensors = tuple(as_tensor(t) for t in tensors)
    arrays = [_arr(t) for t in tensors]
    bounds = np.cumsum([x.shape[axis] for x in arrays])[:-1]
    return record(np.concatenate(arrays, axis=axis), tensors,
                  lambda g: tuple(np.split(g, bounds, axis=axis)))

def narrow(a, axis, start, length):
    """
    Slice [start, start + length) along 'axis'.
    """
    x = _arr(a)
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    def backward(g):
        gx = np.zeros_like(x)
        gx[index] = g
        return (gx,)
    return record(x[index], (a,), backward)

def sum(a, axis=None, keepdims=False):
    x = _arr(a)
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)
    return record(x.sum(axis=axis, keepdims=keepdims), (a,), backward)

def mean(a, axis=None, keepdims=False):
    x = _arr(a)
    count = x.size if axis is None else np.prod(
        [x.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum(a, axis, keepdims), 1.0 / count)


#-------------------------------------------------------------------------------
# Linear algebra and normalizations.

def matmul(a, b):
    """
    Matrix product over the last two axes, with numpy broadcasting over the
    leading ones.  Plain [m x k] . [k x p] is the common case.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError("Cannot multiply shapes %s and %s." %
                             (list(a.shape), list(b.shape)))
    x, y = _arr(a), _arr(b)
    def backward(g):
        return (_unbroadcast(np.matmul(g, np.swapaxes(y, -1, -2)), x.shape),
                _unbroadcast(np.matmul(np.swapaxes(x, -1, -2), g), y.shape))
    return record(np.matmul(x, y), (a, b), backward)

def softmax(a, axis=-1):
    """
    Max-shifted softmax along 'axis'.
    """
    a = as_tensor(a)
    if not -a.ndim <= axis < a.ndim:
        raise DimensionError("Softmax axis %d out of range for shape %s." %
                             (axis, list(a.shape)))
    x = _arr(a)
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)
    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)
    return record(y, (a,), backward)

def layer_norm(a, gamma, beta, eps=1e-5):
    """
    Normalize every last-axis slice to zero mean and unit (biased) variance,
    then apply the affine map.
    """
    if eps < 0:
        raise ConfigError("Layer norm eps must be nonnegative, got %r." % eps)
    a = as_tensor(a)
    d = a.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError("Layer norm of width %d given affine shapes %s, %s." %
                             (d, list(gamma.shape), list(beta.shape)))
    x, w = _arr(a), _arr(gamma)
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    def backward(g):
        gh = g * w
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(x.ndim - 1))
        return (gx, (g * xhat).sum(axis=lead), g.sum(axis=lead))
    return record(xhat * w + _arr(beta), (a, gamma, beta), backward)


def _batch_norm(a, bn, training, rank):
    a = as_tensor(a)
    if a.ndim != rank or a.shape[1] != bn.channels:
        raise DimensionError("Batch norm over %d channels given shape %s." %
                             (bn.channels, list(a.shape)))
    x = _arr(a)
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, -1) + (1,) * (x.ndim - 2)
    w = _arr(bn.weight).reshape(bshape)
    b = _arr(bn.bias).reshape(bshape)

    if training:
        count = x.size // x.shape[1]
        if count < 2:
            raise DimensionError(
                "Batch norm in train mode needs at least 2 values per channel, "
                "got shape %s." % list(a.shape))
        mu = x.mean(axis=axes, keepdims=True)
        var = x.var(axis=axes, keepdims=True)
        m = bn.momentum
        rm, rv = bn.running_mean.data, bn.running_var.data
        rm[...] = (1.0 - m) * rm + m * mu.reshape(-1)
        rv[...] = (1.0 - m) * rv + m * var.reshape(-1)
        bn.tracked.data[...] += 1
        inv = 1.0 / np.sqrt(var + bn.eps)
        xhat = (x - mu) * inv
        def backward(g):
            gh = g * w
            gx = inv * (gh - gh.mean(axis=axes, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=axes, keepdims=True))
            return (gx, (g * xhat).sum(axis=axes), g.sum(axis=axes))
    else:
        if not bn.tracked.data[0]:
            log.warning("Batch norm evaluated before any training step; "
                        "using default statistics (0, 1).")
        mu = bn.running_mean.data.astype(x.dtype).reshape(bshape)
        var = bn.running_var.data.astype(x.dtype).reshape(bshape)
        inv = 1.0 / np.sqrt(var + bn.eps)
        xhat = (x - mu) * inv
        def backward(g):
            return (g * w * inv, (g * xhat).sum(axis=axes), g.sum(axis=axes))

    return record(xhat * w + b, (a, bn.weight, bn.bias), backward)

def batch_norm2d(a, bn, training):
    """
    Batch normalization of an [N x C x H x W] input.  In train mode the batch
    statistics are used and the running statistics updated with momentum; in
    eval mode the running statistics are used.
    """
    return _batch_norm(a, bn, training, 4)

def batch_norm3d(a, bn, training):
    """
    Same as batch_norm2d() for an [N x C x H x W x D] input.
    """
    return _batch_norm(a, bn, training, 5)


#-------------------------------------------------------------------------------
# Convolutions (cross-correlation, stride 1).

def _correlate(x, w, groups, pads):
    """
    Grouped n-d cross-correlation.  'x' is [N x Cin x *S], 'w' is
    [Cout x Cin/g x *K].  Returns the output and a backward function.

    The kernel is applied one offset at a time as a batched matrix product
    over the groups; the summation order is fixed by the offset order.
    """
    nsp = x.ndim - 2
    N, cin = x.shape[:2]
    cout, kernel = w.shape[0], w.shape[2:]
    cg, og = cin // groups, cout // groups

    xp = np.pad(x, ((0, 0), (0, 0)) + tuple((p, p) for p in pads))
    oshape = tuple(n - k + 1 for n, k in zip(xp.shape[2:], kernel))
    xg = xp.reshape((N, groups, cg) + xp.shape[2:])
    wg = w.reshape((groups, og, cg) + kernel)
    wshape = (groups,) + (1,) * nsp + (cg, og)

    def window(off):
        return (Ellipsis,) + tuple(slice(o, o + n) for o, n in zip(off, oshape))

    def taps(off):
        return wg[(slice(None),) * 3 + off].transpose(0, 2, 1).reshape(wshape)

    out = np.zeros((groups, N) + oshape + (og,), dtype=x.dtype)
    for off in np.ndindex(*kernel):
        cols = np.moveaxis(xg[window(off)], (1, 2), (0, -1))
        out += np.matmul(cols, taps(off))
    out = np.moveaxis(out, (0, -1), (1, 2)).reshape((N, cout) + oshape)

    def backward(g):
        go = np.moveaxis(g.reshape((N, groups, og) + oshape), (1, 2), (0, -1))
        goflat = go.reshape(groups, -1, og)
        gxg = np.zeros_like(xg)
        gwg = np.zeros_like(wg)
        for off in np.ndindex(*kernel):
            win = window(off)
            cols = np.moveaxis(xg[win], (1, 2), (0, -1)).reshape(groups, -1, cg)
            gwg[(slice(None),) * 3 + off] = np.matmul(
                np.swapaxes(cols, 1, 2), goflat).transpose(0, 2, 1)
            gcols = np.matmul(go, np.swapaxes(taps(off), -1, -2))
            gxg[win] += np.moveaxis(gcols, (0, -1), (1, 2))
        gx = gxg.reshape(xp.shape)
        gx = gx[(slice(None), slice(None)) +
                tuple(slice(p, p + n) for p, n in zip(pads, x.shape[2:]))]
        return gx, gwg.reshape(w.shape)

    return out, backward

def _conv(a, weight, bias, groups, pads):
    a, weight = as_tensor(a), as_tensor(weight)
    x, w = _arr(a), _arr(weight)
    out, conv_backward = _correlate(x, w, groups, pads)
    bshape = (1, -1) + (1,) * (x.ndim - 2)
    inputs = (a, weight)
    if bias is not None:
        out = out + _arr(bias).reshape(bshape)
        inputs += (bias,)
    axes = (0,) + tuple(range(2, x.ndim))
    def backward(g):
        gx, gw = conv_backward(g)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=axes)
    return record(out, inputs, backward)

def conv2d(a, weight, bias=None, groups=1, padding=0):
    """
    Grouped 2-d cross-correlation with zero padding, stride 1.
    'a' is [N x Cin x H x W], 'weight' is [Cout x Cin/g x kh x kw].
    """
    if a.ndim != 4 or weight.ndim != 4:
        raise DimensionError("conv2d expects 4-d input and weight, got %s and %s." %
                             (list(a.shape), list(weight.shape)))
    cin, cout = a.shape[1], weight.shape[0]
    if groups < 1 or cin % groups or cout % groups:
        raise GroupedConvError(
            "Channels in=%d out=%d are not divisible by %d groups." %
            (cin, cout, groups))
    if weight.shape[1] != cin // groups:
        raise DimensionError("conv2d weight %s does not match %d input channels "
                             "in %d groups." % (list(weight.shape), cin, groups))
    _check_kernel(a.shape[2:], weight.shape[2:], (padding, padding))
    return _conv(a, weight, bias, groups, (padding, padding))

def conv3d(a, weight, bias=None, padding=(0, 0, 0)):
    """
    3-d cross-correlation with zero padding, stride 1.
    'a' is [N x Cin x H x W x D], 'weight' is [Cout x Cin x kh x kw x kd].
    """
    if a.ndim != 5 or weight.ndim != 5 or weight.shape[1] != a.shape[1]:
        raise DimensionError("conv3d cannot apply weight %s to input %s." %
                             (list(weight.shape), list(a.shape)))
    padding = tuple(padding)
    _check_kernel(a.shape[2:], weight.shape[2:], padding)
    return _conv(a, weight, bias, 1, padding)

def _check_kernel(spatial, kernel, pads):
    for n, k, p in zip(spatial, kernel, pads):
        if k > n + 2 * p:
            raise DimensionError(
                "Kernel %s is larger than the padded input %s." %
                (list(kernel), [s + 2 * q for s, q in zip(spatial, pads)]))


#-------------------------------------------------------------------------------
# Activations and dropout.

def relu(a):
    x = _arr(a)
    mask = x > 0
    return record(np.where(mask, x, 0), (a,), lambda g: (g * mask,))

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

def gelu(a):
    """
    Exact GELU, 0.5 x (1 + erf(x / sqrt 2)).
    """
    x = _arr(a)
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    def backward(g):
        return (g * (cdf + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)),)
    return record(x * cdf, (a,), backward)

def dropout(a, rate, training, rng):
    """
    Inverted dropout: in train mode zero each element with probability 'rate'
    and scale the survivors by 1/(1 - rate); identity otherwise.
    """
    if not 0.0 <= rate < 1.0:
        raise ConfigError("Dropout rate must be in [0, 1), got %r." % rate)
    a = as_tensor(a)
    if not training or rate == 0.0:
        return a
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    keep = keep.astype(default_dtype())
    return record(_arr(a) * keep, (a,), lambda g: (g * keep,))


#-------------------------------------------------------------------------------

class Rng(object):
    """
    Seeded, platform-independent random stream.  The stream is fully determined
    by (seed, keys); spawn() derives a keyed substream.
    """

    def __init__(self, seed, *keys):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.keys = tuple(int(k) for k in keys)
        seq = np.random.SeedSequence((self.seed,) + self.keys)
        self._gen = np.random.Generator(np.random.Philox(seq))

    def spawn(self, *keys):
        return Rng(self.seed, *(self.keys + keys))

    def random(self, shape=None):
        return self._gen.random(shape)

    def uniform(self, low, high, shape=None):
        return self._gen.uniform(low, high, shape)

    def normal(self, loc, scale, shape=None):
        return self._gen.normal(loc, scale, shape)

    def integers(self, low, high, shape=None):
        return self._gen.integers(low, high, shape)

    def permutation(self, n):
        return self._gen.permutation(n)

    def __repr__(self):
        return 'Rng(%d%s)' % (self.seed,
                              ''.join(', %d' % k for k in self.keys))


#-------------------------------------------------------------------------------
# Parameter containers.

def uniform_init(rng, shape, fan_in):
    """
    Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) learnable tensor.
    """
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, shape), requires_grad=True,
                  dtype=np.float32)

def normal_init(rng, shape, std):
    return Tensor(rng.normal(0.0, std, shape), requires_grad=True,
                  dtype=np.float32)

def zeros(shape, requires_grad=True):
    return Tensor(np.zeros(shape), requires_grad=requires_grad,
                  dtype=np.float32)

def ones(shape, requires_grad=True):
    return Tensor(np.ones(shape), requires_grad=requires_grad,
                  dtype=np.float32)


class ParamGroup(object):
    """
    Base class for containers of named tensors.  Learnable tensors (those that
    require a gradient) are parameters; the others are buffers.  Names are the
    attribute paths joined by dots, in attribute definition order, which is the
    canonical order of the whole model.
    """

    def _walk(self, prefix, learnable):
        for name, value in vars(self).items():
            if name.startswith('_'):
                continue
            path = prefix + name
            if isinstance(value, Tensor):
                if value.requires_grad == learnable:
                    yield path, value
            elif isinstance(value, ParamGroup):
                for item in value._walk(path + '.', learnable):
                    yield item
            elif isinstance(value, list):
                for i, sub_ in enumerate(value):
                    if isinstance(sub_, ParamGroup):
                        for item in sub_._walk('%s.%d.' % (path, i), learnable):
                            yield item

    def named_tensors(self, prefix=''):
        return self._walk(prefix, True)

    def named_buffers(self, prefix=''):
        return self._walk(prefix, False)

    def parameters(self):
        return [t for _, t in self.named_tensors()]

    def num_scalars(self):
        "Number of learnable scalars."
        return int(np.sum([t.size for t in self.parameters()], dtype=np.int64))

    def zero_grad(self):
        for t in self.parameters():
            t.grad = None


class BatchNorm(ParamGroup):
    """
    Affine parameters and running statistics of one batch normalization.
    """

    def __init__(self, channels, momentum=0.1, eps=1e-5):
        self.weight = ones(channels)
        self.bias = zeros(channels)
        self.running_mean = zeros(channels, requires_grad=False)
        self.running_var = ones(channels, requires_grad=False)
        self.tracked = zeros(1, requires_grad=False)
        "Number of train-mode batches seen; 0 means default statistics."

        self._channels = channels
        self._momentum = momentum
        self._eps = eps

    channels = property(lambda self: self._channels)
    momentum = property(lambda self: self._momentum)
    eps = property(lambda self: self._eps)


class LayerNorm(ParamGroup):
    """
    Affine parameters of one layer normalization.
    """

    def __init__(self, width, eps=1e-5):
        self.weight = ones(width)
        self.bias = zeros(width)
        self._eps = eps

    eps = property(lambda self: self._eps)

    def __call__(self, a):
        return layer_norm(a, self.weight, self.bias, self._eps)


#-------------------------------------------------------------------------------
# Finite-difference verifier.

_STEP = 1e-3
_TOLERANCE = 1e-4

def _relerr(a, n):
    return abs(a - n) / max(1.0, abs(a), abs(n))

def check_gradients(loss_fn, tensors, h=_STEP, elements=None, rng=None,
                    faults=(), tolerance=_TOLERANCE, buffers=()):
    """
    Compare the tape gradients of the scalar 'loss_fn()' with respect to each of
    'tensors' against central differences, everything in 64-bit.  'loss_fn'
    takes no argument and must read the tensors it depends on; their data is
    swapped for 64-bit copies for the duration of the check and restored
    afterwards.

    'elements' limits the check to that many elements per tensor, drawn from
    'rng'.  Where the central difference at 'h' disagrees by more than
    'tolerance' it is recomputed at h/10 and h/100 and the smallest error kept;
    a non-differentiable point (a ReLU kink) inside the difference interval
    otherwise raises a false alarm.

    'buffers' (batch normalization running statistics, typically) get back the
    values they had before the check.

    Returns the list of maximum relative errors |a-n|/max(1,|a|,|n|), one per
    tensor.
    """
    saved = [(t.data, t.requires_grad, t.grad) for t in tensors]
    kept = [b.data.copy() for b in buffers]
    try:
        with precision(np.float64):
            for t in tensors:
                t.data = t.data.astype(np.float64)
                t.requires_grad = True
                t.grad = None

            with Tape(faults=faults) as tape:
                loss = loss_fn()
            value = float(loss.data)
            if not math.isfinite(value):
                raise VerifierError("Loss is not finite: %r." % value)
            tape.backward(loss)

            def evaluate():
                with no_record():
                    v = float(loss_fn().data)
                if not math.isfinite(v):
                    raise VerifierError("Loss is not finite: %r." % v)
                return v

            errors = []
            for t in tensors:
                analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
                if not np.all(np.isfinite(analytic)):
                    raise VerifierError("Non-finite tape gradient of shape %s." %
                                        list(t.shape))
                flat = t.data.reshape(-1)
                indices = range(flat.size)
                if elements is not None and elements < flat.size:
                    indices = sorted(rng.permutation(flat.size)[:elements])
                worst = 0.0
                for i in indices:
                    a = float(analytic.reshape(-1)[i])
                    err = None
                    for step in (h, h / 10.0, h / 100.0):
                        orig = flat[i]
                        flat[i] = orig + step
                        fp = evaluate()
                        flat[i] = orig - step
                        fm = evaluate()
                        flat[i] = orig
                        e = _relerr(a, (fp - fm) / (2.0 * step))
                        err = e if err is None else min(err, e)
                        if err <= tolerance:
                            break
                    if step != h:
                        log.debug("Element %d of tensor %s checked at h=%g "
                                  "(error %.3e).", i, list(t.shape), step, err)
                    worst = max(worst, err)
                errors.append(worst)
            return errors
    finally:
        for t, (data, req, grad) in zip(tensors, saved):
            t.data, t.requires_grad, t.grad = data, req, grad
        for b, data in zip(buffers, kept):
            b.data = data

def grad_check(f, x, h=_STEP, elements=None, rng=None, faults=()):
    """
    Maximum relative error between the tape gradient of the scalar f(x) and
    central differences, in 64-bit.
    """
    return check_gradients(lambda: f(x), [x], h=h, elements=elements, rng=rng,
                           faults=faults)[0]
