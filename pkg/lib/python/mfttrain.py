"""
Training harness: cross-entropy loss, Adam with L2 weight decay, a step
learning-rate schedule, the epoch loop, evaluation and checkpoints.

Usage::

    config = ModelConfig(scene.bands, scene.aux_channels, scene.classes)
    tconfig = TrainConfig(epochs=200, seed=0)
    ckpt, records = train(scene, train_coords, config, tconfig)
    report = evaluate(ckpt, scene, test_coords)
    save_checkpoint(ckpt, 'run/')

Determinism
-----------

Every random draw comes from a substream of Rng(seed): the epoch shuffle from
(1, epoch), the dropout masks of a batch from (2, epoch, batch).  Together with
the checkpointed parameters, batch norm statistics and Adam moments this makes
a resumed run bit-identical to an uninterrupted one.

Checkpoint container
--------------------

A directory with 'model.json'::

    {"format": "MFTCKPT1", "model": {...}, "train": {...}, "data": {...},
     "epoch": <completed epochs>, "step": <Adam steps>,
     "tensors": [{"name": ..., "kind": "param|buffer|adam_m|adam_v",
                  "shape": [...], "offset": <byte offset>}, ...]}

and 'weights.f32', the little-endian float32 payload of all the tensors in
table order.  Parameters are listed in the canonical order of MftParams, then
the buffers (batch norm statistics), then the Adam moments.
"""

__author__ = 'MFT fusion developers'


# stdlib imports
import json
import logging
import math
import os

# numpy imports
import numpy as np

# mft imports
from mfttensor import (Error, ConfigError, DimensionError, Rng, Tape,
                       as_tensor, default_dtype, record, no_record)
from mftmodel import ModelConfig, MftParams, init_params, mft_forward
from mftdata import (DataError, FormatError, STREAM_SPLIT, extract_patches,
                     make_split)
from mftmetrics import (LabelError, ConfusionMatrix, compute_metrics,
                        summarize)


__all__ = ('TrainConfig', 'AdamState', 'Checkpoint', 'DivergenceError',
           'cross_entropy', 'adam_step', 'lr_at', 'train', 'predict',
           'evaluate', 'save_checkpoint', 'load_checkpoint', 'run_repeats',
           'addopts', 'fromopts', 'CHECKPOINT_FORMAT')


log = logging.getLogger(__name__)


CHECKPOINT_FORMAT = 'MFTCKPT1'

STREAM_SHUFFLE = 1
STREAM_DROPOUT = 2


class DivergenceError(Error):
    """
    A non-finite loss or gradient during training.
    """

    def __init__(self, message, epoch=None, batch=None, tensor=None):
        Error.__init__(self, message)
        self.epoch = epoch
        self.batch = batch
        self.tensor = tensor

    def __str__(self):
        where = []
        if self.epoch is not None:
            where.append('epoch %d' % self.epoch)
        if self.batch is not None:
            where.append('batch %d' % self.batch)
        msg = Error.__str__(self)
        return '%s (%s)' % (msg, ', '.join(where)) if where else msg


class TrainConfig(object):
    """
    Optimization settings.  Options are given as keywords.
    """

    _def_lr = 5e-4
    """Initial learning rate."""

    _def_weight_decay = 5e-3
    """L2 coefficient, added to the gradient."""

    _def_batch_train = 64
    _def_batch_eval = 500

    _def_epochs = 200
    """Number of epochs.  The full-scale protocol uses 500."""

    _def_step_size = 50
    """Epochs between learning rate decays."""

    _def_gamma = 0.9
    """Learning rate decay factor."""

    _def_seed = 0

    _def_beta1 = 0.9
    _def_beta2 = 0.999
    _def_adam_eps = 1e-8

    _def_save_every = 0
    """Save a checkpoint every that many epochs (0: only at the end)."""

    _def_eval_every = 0
    """Evaluate the test split every that many epochs (0: never)."""

    _names = ('lr', 'weight_decay', 'batch_train', 'batch_eval', 'epochs',
              'step_size', 'gamma', 'seed', 'beta1', 'beta2', 'adam_eps',
              'save_every', 'eval_every')

    def __init__(self, **options):
        for name in self._names:
            setattr(self, name, options.pop(name, getattr(self, '_def_' + name)))
        if options:
            raise ConfigError("Unknown training options: %s." %
                              ', '.join(sorted(options)))
        self.validate()

    def validate(self):
        if not self.lr > 0:
            raise ConfigError("Learning rate must be positive, got %r." % self.lr)
        if self.weight_decay < 0:
            raise ConfigError("Weight decay must be nonnegative.")
        if self.batch_train < 2 or self.batch_eval < 1:
            raise ConfigError("Training batches need at least 2 samples.")
        if self.epochs < 0 or self.step_size < 1:
            raise ConfigError("Invalid epochs %r or step size %r." %
                              (self.epochs, self.step_size))
        if not 0.0 < self.gamma < 1.0:
            raise ConfigError("Gamma must be in (0, 1), got %r." % self.gamma)
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("Adam betas must be in [0, 1).")
        if not self.adam_eps > 0:
            raise ConfigError("Adam epsilon must be positive.")
        if self.save_every < 0 or self.eval_every < 0:
            raise ConfigError("Save and eval periods must be nonnegative.")

    def to_dict(self):
        return dict((name, getattr(self, name)) for name in self._names)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def replace(self, **changes):
        d = self.to_dict()
        d.update(changes)
        return TrainConfig(**d)

    def __eq__(self, other):
        return isinstance(other, TrainConfig) and self.to_dict() == other.to_dict()

    def __repr__(self):
        return 'TrainConfig(%s)' % ', '.join(
            '%s=%r' % (n, getattr(self, n)) for n in self._names)



#-------------------------------------------------------------------------------

def cross_entropy(logits, labels):
    """
    Mean negative log-likelihood of the 0-based 'labels' under softmax(logits).
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError("Cross entropy of logits %s with labels %s." %
                             (list(logits.shape), list(labels.shape)))
    n, c = logits.shape
    bad = (labels < 0) | (labels >= c)
    if np.any(bad):
        raise LabelError("Label %d out of range [0, %d)." % (labels[bad][0], c))

    x = logits.data.astype(default_dtype(), copy=False)
    shifted = x - x.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def backward(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (g * p / n,)

    return record(np.asarray(loss), (logits,), backward)


class AdamState(object):
    """
    First and second moments per parameter name, and the step count.
    """

    def __init__(self):
        self.step = 0
        self.m = {}
        self.v = {}

    def moments(self, name, shape):
        if name not in self.m:
            self.m[name] = np.zeros(shape, dtype=np.float32)
            self.v[name] = np.zeros(shape, dtype=np.float32)
        return self.m[name], self.v[name]


def adam_step(params, state, cfg, lr=None, grads=None):
    """
    One Adam update of every parameter, with the weight decay coupled into the
    gradient.  Gradients come from 'grads' (a name -> array mapping) if given,
    from the tensors' .grad otherwise; a missing gradient counts as zero.
    """
    if lr is None:
        lr = cfg.lr
    named = list(params.named_tensors() if hasattr(params, 'named_tensors')
                 else params)
    gradients = []
    for name, p in named:
        g = grads.get(name) if grads is not None else p.grad
        g = (np.zeros(p.shape) if g is None
             else np.asarray(g, dtype=np.float64).reshape(p.shape))
        if not np.all(np.isfinite(g)):
            raise DivergenceError("Non-finite gradient for %s." % name,
                                  tensor=name)
        gradients.append(g)

    state.step += 1
    t = state.step
    b1, b2 = cfg.beta1, cfg.beta2
    for (name, p), g in zip(named, gradients):
        theta = p.data.astype(np.float64)
        g = g + cfg.weight_decay * theta
        m, v = state.moments(name, p.shape)
        m = b1 * m.astype(np.float64) + (1.0 - b1) * g
        v = b2 * v.astype(np.float64) + (1.0 - b2) * g * g
        mhat = m / (1.0 - b1 ** t)
        vhat = v / (1.0 - b2 ** t)
        p.data = (theta - lr * mhat / (np.sqrt(vhat) + cfg.adam_eps)).astype(
            np.float32)
        state.m[name] = m.astype(np.float32)
        state.v[name] = v.astype(np.float32)


def lr_at(epoch, cfg):
    if epoch < 0:
        raise ConfigError("Negative epoch %d." % epoch)
    return cfg.lr * cfg.gamma ** (epoch // cfg.step_size)


class Checkpoint(object):
    """
    Everything needed to evaluate a model or resume its training.
    """

    def __init__(self, params, train_config, adam=None, epoch=0, data=None):
        self.params = params
        self.train_config = train_config
        self.adam = adam if adam is not None else AdamState()
        self.epoch = epoch
        "Number of completed epochs."

        self.data = dict(data or {})
        "Description of the scene and split the model was trained on."

    config = property(lambda self: self.params.config)


def _batches(count, size):
    "Batch boundaries; the last batch may be partial."
    return [(lo, min(lo + size, count)) for lo in range(0, count, size)]


def train(scene, train_coords, config, tconfig, test_coords=None, resume=None,
          out=None, logfile=None, data=None):
    """
    Train an MFT on the patches at 'train_coords'.  Returns the final
    Checkpoint and the list of per-epoch log records
    {epoch, lr, train_loss[, eval_oa]}.

    'resume' continues from a Checkpoint of the same configuration.  If 'out'
    is given, checkpoints are written there every save_every epochs and at the
    end.  Log records are also written as JSON lines to 'logfile'.
    """
    if len(train_coords) == 0:
        raise DataError("Empty training split.")
    if resume is not None:
        if resume.config != config:
            raise ConfigError("Cannot resume %r as %r." % (resume.config, config))
        ckpt = resume
        ckpt.train_config = tconfig
    else:
        ckpt = Checkpoint(init_params(config, tconfig.seed), tconfig, data=data)
    params = ckpt.params

    batch = extract_patches(scene, train_coords, config.patch)
    evaluating = tconfig.eval_every and test_coords is not None and len(test_coords)
    if evaluating:
        test_batch = extract_patches(scene, test_coords, config.patch)

    root = Rng(tconfig.seed)
    records = []
    for epoch in range(ckpt.epoch, tconfig.epochs):
        lr = lr_at(epoch, tconfig)
        order = root.spawn(STREAM_SHUFFLE, epoch).permutation(len(batch))
        total = 0.0
        for b, (lo, hi) in enumerate(_batches(len(order), tconfig.batch_train)):
            sub = batch.take(order[lo:hi])
            params.zero_grad()
            with Tape() as tape:
                logits = mft_forward(sub.hsi_patches, sub.aux_patches, params,
                                     training=True,
                                     rng=root.spawn(STREAM_DROPOUT, epoch, b))
                loss = cross_entropy(logits, sub.labels)
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError("Loss is %r." % value, epoch, b)
            tape.backward(loss)
            try:
                adam_step(params, ckpt.adam, tconfig, lr)
            except DivergenceError as e:
                e.epoch, e.batch = epoch, b
                raise
            total += value * (hi - lo)
            log.debug("epoch %d batch %d loss %.6f", epoch, b, value)
        ckpt.epoch = epoch + 1

        rec = {'epoch': epoch, 'lr': lr, 'train_loss': total / len(batch)}
        if evaluating and ckpt.epoch % tconfig.eval_every == 0:
            preds = predict(params, test_batch, tconfig.batch_eval)
            rec['eval_oa'] = float(np.mean(preds == test_batch.labels))
        records.append(rec)
        log.info("epoch %d lr %.3g loss %.6f%s", epoch, lr, rec['train_loss'],
                 ' oa %.4f' % rec['eval_oa'] if 'eval_oa' in rec else '')
        if logfile is not None:
            logfile.write(json.dumps(rec) + '\n')
            logfile.flush()
        if out and tconfig.save_every and ckpt.epoch % tconfig.save_every == 0:
            save_checkpoint(ckpt, out)

    if out:
        save_checkpoint(ckpt, out)
    return ckpt, records


def predict(params, batch, batch_size=TrainConfig._def_batch_eval):
    """
    Argmax class indices of the patches in 'batch', in eval mode.
    """
    preds = np.empty(len(batch), dtype=np.int64)
    with no_record():
        for lo in range(0, len(batch), batch_size):
            hi = min(lo + batch_size, len(batch))
            logits = mft_forward(batch.hsi_patches[lo:hi],
                                 batch.aux_patches[lo:hi], params)
            preds[lo:hi] = np.argmax(logits.data, axis=1)
    return preds


def _check_compatible(config, scene):
    got = (scene.bands, scene.aux_channels, scene.classes)
    want = (config.bands, config.aux_channels, config.classes)
    if got != want:
        raise ConfigError("Model expects %d bands, %d auxiliary channels and %d "
                          "classes; the scene has %d, %d and %d." % (want + got))

def evaluate(model, scene, coords, batch_size=TrainConfig._def_batch_eval):
    """
    EvalReport of 'model' (a Checkpoint or MftParams) over 'coords'.
    """
    params = model.params if isinstance(model, Checkpoint) else model
    _check_compatible(params.config, scene)
    batch = extract_patches(scene, coords, params.config.patch)
    cm = ConfusionMatrix(scene.classes)
    if len(batch):
        cm.accumulate_many(batch.labels, predict(params, batch, batch_size))
    return compute_metrics(cm)



#-------------------------------------------------------------------------------
# Checkpoint container.

def _table(ckpt):
    "(name, kind, array) for every stored tensor, in table order."
    entries = [(name, 'param', t.data)
               for name, t in ckpt.params.named_tensors()]
    entries.extend((name, 'buffer', t.data)
                   for name, t in ckpt.params.named_buffers())
    for name, t in ckpt.params.named_tensors():
        if name in ckpt.adam.m:
            entries.append((name, 'adam_m', ckpt.adam.m[name]))
            entries.append((name, 'adam_v', ckpt.adam.v[name]))
    return entries

def save_checkpoint(ckpt, path):
    """
    Write 'ckpt' to the directory 'path' (created if needed).
    """
    os.makedirs(path, exist_ok=True)
    tensors = []
    offset = 0
    with open(os.path.join(path, 'weights.f32'), 'wb') as f:
        for name, kind, array in _table(ckpt):
            raw = np.ascontiguousarray(array).astype('<f4').tobytes()
            tensors.append({'name': name, 'kind': kind,
                            'shape': list(array.shape), 'offset': offset})
            f.write(raw)
            offset += len(raw)
    manifest = {'format': CHECKPOINT_FORMAT,
                'model': ckpt.config.to_dict(),
                'train': ckpt.train_config.to_dict(),
                'data': ckpt.data,
                'epoch': ckpt.epoch,
                'step': ckpt.adam.step,
                'tensors': tensors}
    with open(os.path.join(path, 'model.json'), 'w') as f:
        json.dump(manifest, f, indent=2)
        f.write('\n')
    log.info("Wrote checkpoint at epoch %d to %s", ckpt.epoch, path)

def load_checkpoint(path):
    """
    Read a checkpoint directory written by save_checkpoint().
    """
    try:
        with open(os.path.join(path, 'model.json')) as f:
            manifest = json.load(f)
        with open(os.path.join(path, 'weights.f32'), 'rb') as f:
            payload = f.read()
    except (IOError, ValueError) as e:
        raise FormatError("Cannot read checkpoint %s: %s" % (path, e))
    if manifest.get('format') != CHECKPOINT_FORMAT:
        raise FormatError("Bad checkpoint format %r in %s." %
                          (manifest.get('format'), path))

    try:
        config = ModelConfig.from_dict(manifest['model'])
        tconfig = TrainConfig.from_dict(manifest['train'])
        epoch, step = int(manifest['epoch']), int(manifest['step'])
        table = manifest['tensors']
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError("Incomplete checkpoint manifest in %s: %s" % (path, e))
    params = MftParams(config, Rng(0))
    adam = AdamState()
    adam.step = step
    params_by_name = dict(params.named_tensors())
    targets = {'param': params_by_name,
               'buffer': dict(params.named_buffers())}

    seen = set()
    for entry in table:
        name, kind = entry['name'], entry['kind']
        shape = tuple(entry['shape'])
        size = int(np.prod(shape)) * 4
        start = entry['offset']
        if start + size > len(payload):
            raise FormatError("Tensor %s needs bytes %d..%d, payload has %d." %
                              (name, start, start + size, len(payload)))
        array = np.frombuffer(payload, dtype='<f4', count=size // 4,
                              offset=start).reshape(shape).astype(np.float32)
        if kind in ('adam_m', 'adam_v'):
            if name not in params_by_name:
                raise FormatError("Adam moments for unknown tensor %s." % name)
            (adam.m if kind == 'adam_m' else adam.v)[name] = array
            continue
        t = targets.get(kind, {}).get(name)
        if t is None:
            raise FormatError("Unknown %s tensor %s in checkpoint." % (kind, name))
        if t.shape != shape:
            raise FormatError("Tensor %s has shape %s, expected %s." %
                              (name, list(shape), list(t.shape)))
        t.data = array
        seen.add((kind, name))
    missing = [n for kind in targets for n in targets[kind]
               if (kind, n) not in seen]
    if missing:
        raise FormatError("Checkpoint lacks tensors: %s." % ', '.join(missing))

    return Checkpoint(params, tconfig, adam, epoch, manifest.get('data'))



#-------------------------------------------------------------------------------

def run_repeats(scene, split, config, tconfig, repeats, resplit=False,
                out=None):
    """
    Train and evaluate 'repeats' times with seeds seed, seed+1, ...  The split
    is drawn once from the base seed unless 'resplit', in which case every
    repetition draws its own.  Returns the list of (checkpoint, records,
    report) and the mean/std summary.
    """
    runs = []
    for r in range(repeats):
        seed = tconfig.seed + r
        split_seed = seed if resplit else tconfig.seed
        train_coords, test_coords = make_split(scene, split,
                                               Rng(split_seed, STREAM_SPLIT))
        rconfig = tconfig.replace(seed=seed)
        rout = os.path.join(out, 'repeat%d' % r) if out else None
        logfile = None
        if rout:
            os.makedirs(rout, exist_ok=True)
            logfile = open(os.path.join(rout, 'log.jsonl'), 'w')
        try:
            ckpt, records = train(scene, train_coords, config, rconfig,
                                  test_coords, out=rout, logfile=logfile,
                                  data={'split': split, 'split_seed': split_seed})
        finally:
            if logfile is not None:
                logfile.close()
        report = evaluate(ckpt, scene, test_coords, rconfig.batch_eval)
        log.info("repeat %d: %r", r, report)
        if rout:
            with open(os.path.join(rout, 'report.json'), 'w') as f:
                f.write(report.to_json())
        runs.append((ckpt, records, report))
    return runs, summarize([report for _, _, report in runs])



#-------------------------------------------------------------------------------
# Support for initializing from the command-line.

def addopts(parser):
    """
    Add the optimization options on an argparse parser.
    """
    parser.add_argument('--epochs', type=int, default=TrainConfig._def_epochs,
                        help="Training epochs (the full protocol uses 500)")
    parser.add_argument('--lr', type=float, default=TrainConfig._def_lr,
                        help="Initial learning rate")
    parser.add_argument('--wd', type=float,
                        default=TrainConfig._def_weight_decay,
                        help="L2 weight decay")
    parser.add_argument('--seed', type=int, default=TrainConfig._def_seed,
                        help="Random seed")
    parser.add_argument('--batch', type=int,
                        default=TrainConfig._def_batch_train,
                        help="Training batch size")
    parser.add_argument('--step-size', type=int,
                        default=TrainConfig._def_step_size,
                        help="Epochs between learning rate decays")
    parser.add_argument('--gamma', type=float, default=TrainConfig._def_gamma,
                        help="Learning rate decay factor")
    parser.add_argument('--save-every', type=int, default=0,
                        help="Checkpoint period in epochs")
    parser.add_argument('--eval-every', type=int, default=0,
                        help="Test evaluation period in epochs")

def fromopts(opts):
    return TrainConfig(epochs=opts.epochs, lr=opts.lr, weight_decay=opts.wd,
                       seed=opts.seed, batch_train=opts.batch,
                       step_size=opts.step_size, gamma=opts.gamma,
                       save_every=opts.save_every, eval_every=opts.eval_every)
