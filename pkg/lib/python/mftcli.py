"""
Command-line interface to the whole workflow::

    mft synth --classes 4 --size 64x64 --bands 16 --aux-channels 1 -o scene/
    mft train --scene scene/ --split random:0.05 --epochs 200 -o run/
    mft eval --checkpoint run/ --scene scene/ --map run/map.ppm -o run/
    mft gradcheck --dims B=12,k=5,n=2
    mft inspect scene/
    mft replay run/manifest.json

Every command that writes files also writes 'manifest.json' in its output
directory: the command line and the resolved configuration.  'replay' re-runs
the recorded command line, which reproduces the outputs bit for bit.

Exit codes: 0 ok, 1 usage, 2 data or configuration, 3 divergence, 4 failed
gradient verification.

The environment variable MFT_THREADS caps the threads of the BLAS library.
"""

__author__ = 'MFT fusion developers'


# stdlib imports
import os, sys
import argparse
import json
import logging

if os.environ.get('MFT_THREADS'):
    for _var in ('OMP_NUM_THREADS', 'OPENBLAS_NUM_THREADS', 'MKL_NUM_THREADS'):
        os.environ[_var] = os.environ['MFT_THREADS']

# numpy imports
import numpy as np

# mft imports
from mfttensor import (Error, ConfigError, DimensionError, VerifierError, Rng,
                       Tensor, check_gradients, mul, scope, sum as tsum)
import mftmodel
from mftmodel import (ModelConfig, init_params, count_parameters, mft_forward)
from mftextract import conv3d_block, hetconv2d_block, SPECTRAL_TAPS
from mfttoken import hsi_tokenize, aux_tokenize, assemble_sequence
from mftencoder import encoder_block, classify
from mftdata import (DataError, SCENE_MAGIC, STREAM_SPLIT, STREAM_SCENE,
                     synth_scene, save_scene, load_scene, normalize_scene,
                     make_split, extract_patches, class_histogram,
                     labeled_coords, all_coords)
import mfttrain
from mfttrain import (DivergenceError, CHECKPOINT_FORMAT, train, evaluate,
                      predict, load_checkpoint, run_repeats)
from mftmetrics import (LabelError, PaletteError, EmptyEvaluationError,
                        render_map)


__all__ = ('main', 'UsageError', 'VerificationFailure', 'run_gradcheck',
           'write_manifest', 'EXIT_OK', 'EXIT_USAGE', 'EXIT_DATA',
           'EXIT_DIVERGENCE', 'EXIT_VERIFY', 'STAGES')


log = logging.getLogger(__name__)

RUN_FORMAT = 'MFTRUN1'

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGENCE, EXIT_VERIFY = range(5)


class UsageError(Error):
    """
    Invalid command-line usage.
    """

class VerificationFailure(Error):
    """
    Gradient verification found tensors over tolerance.
    """


class ArgumentParser(argparse.ArgumentParser):
    "A parser that raises UsageError instead of exiting."

    def error(self, message):
        raise UsageError(message)



#-------------------------------------------------------------------------------

def write_manifest(outdir, command, argv, **resolved):
    """
    Write the run manifest of 'command' into 'outdir'.
    """
    manifest = {'format': RUN_FORMAT,
                'command': command,
                'argv': list(argv),
                'formats': {'scene': SCENE_MAGIC,
                            'checkpoint': CHECKPOINT_FORMAT}}
    manifest.update(resolved)
    os.makedirs(outdir, exist_ok=True)
    with open(os.path.join(outdir, 'manifest.json'), 'w') as f:
        json.dump(manifest, f, indent=2)
        f.write('\n')

def _parse_size(text):
    try:
        rows, cols = (int(x) for x in text.lower().split('x'))
    except ValueError:
        raise UsageError("Invalid size %r (expected MxN)." % text)
    return rows, cols

def _load_scene(path):
    return normalize_scene(load_scene(path))


def cmd_synth(opts, argv):
    if opts.classes < 2:
        raise UsageError("--classes must be at least 2, got %d." % opts.classes)
    if opts.classes > 16:
        raise UsageError("--classes must be at most 16, got %d." % opts.classes)
    if opts.bands < SPECTRAL_TAPS:
        raise UsageError("--bands must be at least %d for the spectral "
                         "convolution, got %d." % (SPECTRAL_TAPS, opts.bands))
    if opts.aux_channels < 1:
        raise UsageError("--aux-channels must be at least 1, got %d." %
                         opts.aux_channels)
    rows, cols = _parse_size(opts.size)
    scene = synth_scene(opts.classes, rows, cols, opts.bands,
                        opts.aux_channels, Rng(opts.seed, STREAM_SCENE),
                        aux_informative=not opts.noise_aux,
                        modality=opts.modality)
    save_scene(scene, opts.output)
    write_manifest(opts.output, 'synth', argv,
                   scene={'M': rows, 'N': cols, 'B': opts.bands,
                          'C': opts.aux_channels, 'classes': opts.classes,
                          'modality': opts.modality, 'seed': opts.seed,
                          'aux_informative': not opts.noise_aux})
    for g, count in sorted(class_histogram(scene).items()):
        print('class %2d: %d pixels' % (g, count))
    return EXIT_OK


def cmd_train(opts, argv):
    scene = _load_scene(opts.scene)
    split = opts.split or ('disjoint' if scene.has_masks else 'random:0.05')
    if opts.resume:
        resume = load_checkpoint(opts.resume)
        config = resume.config
        tconfig = resume.train_config.replace(epochs=opts.epochs)
    else:
        resume = None
        config = mftmodel.fromopts(opts, scene)
        tconfig = mfttrain.fromopts(opts)
    write_manifest(opts.output, 'train', argv, model=config.to_dict(),
                   train=tconfig.to_dict(),
                   data={'scene': opts.scene, 'split': split,
                         'repeats': opts.repeats, 'resplit': opts.resplit})

    if opts.repeats > 1:
        if resume is not None:
            raise UsageError("--resume cannot be combined with --repeats.")
        runs, summary = run_repeats(scene, split, config, tconfig, opts.repeats,
                                    opts.resplit, opts.output)
        with open(os.path.join(opts.output, 'summary.json'), 'w') as f:
            json.dump(summary, f, indent=2)
            f.write('\n')
        print('OA %.4f +- %.4f  AA %.4f +- %.4f  kappa %.4f +- %.4f' % (
            summary['oa']['mean'], summary['oa']['std'],
            summary['aa']['mean'], summary['aa']['std'],
            summary['kappa']['mean'], summary['kappa']['std']))
        return EXIT_OK

    if resume is not None:
        data = resume.data
        split = data.get('split', split)
        split_seed = data.get('split_seed', tconfig.seed)
    else:
        split_seed = tconfig.seed
        data = {'scene': opts.scene, 'split': split, 'split_seed': split_seed}
    train_coords, test_coords = make_split(scene, split,
                                           Rng(split_seed, STREAM_SPLIT))
    mode = 'a' if resume is not None else 'w'
    with open(os.path.join(opts.output, 'log.jsonl'), mode) as logfile:
        ckpt, _ = train(scene, train_coords, config, tconfig, test_coords,
                        resume=resume, out=opts.output, logfile=logfile,
                        data=data)
    if len(test_coords):
        report = evaluate(ckpt, scene, test_coords, tconfig.batch_eval)
        with open(os.path.join(opts.output, 'report.json'), 'w') as f:
            f.write(report.to_json())
        print('OA %.4f  AA %.4f  kappa %.4f  (%d test samples)' % (
            report.oa, report.aa, report.kappa, report.samples))
    return EXIT_OK


def cmd_eval(opts, argv):
    ckpt = load_checkpoint(opts.checkpoint)
    scene = _load_scene(opts.scene)
    split = opts.split or ckpt.data.get('split') or 'disjoint'
    split_seed = ckpt.data.get('split_seed', ckpt.train_config.seed)
    _, test_coords = make_split(scene, split, Rng(split_seed, STREAM_SPLIT))
    report = evaluate(ckpt, scene, test_coords, ckpt.train_config.batch_eval)

    write_manifest(opts.output, 'eval', argv, model=ckpt.config.to_dict(),
                   data={'scene': opts.scene, 'split': split,
                         'split_seed': split_seed})
    with open(os.path.join(opts.output, 'report.json'), 'w') as f:
        f.write(report.to_json())
    print('OA %.4f  AA %.4f  kappa %.4f  (%d samples)' % (
        report.oa, report.aa, report.kappa, report.samples))

    if opts.map:
        coords = all_coords(scene) if opts.full else labeled_coords(scene)
        batch = extract_patches(scene, coords, ckpt.config.patch,
                                allow_background=opts.full)
        preds = predict(ckpt.params, batch, ckpt.train_config.batch_eval)
        with open(opts.map, 'wb') as f:
            f.write(render_map((scene.rows, scene.cols), coords, preds + 1))
    return EXIT_OK



#-------------------------------------------------------------------------------
# Gradient verification.

_TOY_DIMS = (('B', 12), ('C', 2), ('k', 5), ('n', 2), ('K', 3), ('d', 16),
             ('h', 4), ('depth', 1), ('N', 4))

def _parse_dims(text):
    dims = dict(_TOY_DIMS)
    for item in filter(None, (text or '').split(',')):
        key, _, value = item.partition('=')
        if key not in dims:
            raise UsageError("Unknown dimension %r (known: %s)." %
                             (key, ', '.join(k for k, _ in _TOY_DIMS)))
        try:
            dims[key] = int(value)
        except ValueError:
            raise UsageError("Invalid value for dimension %s: %r." % (key, value))
    return dims

STAGES = ('extractor', 'hsi_tokenizer', 'aux_tokenizer', 'sequence', 'encoder',
          'classifier', 'mft')
"Stage names accepted by run_gradcheck(); 'encoder' selects every block."

def _projection(out, weights):
    "Scalar loss sum(out * weights) with fixed weights."
    return tsum(mul(out, weights))

def _scoped(name, fn):
    "Run 'fn' with its operations recorded under scope 'name'."
    def loss_fn():
        with scope(name):
            return fn()
    return loss_fn

def run_gradcheck(dims, faults=(), elements=None, seed=0, tolerance=1e-4,
                  stages=None):
    """
    Verify the gradients of every parameterized stage and of the whole loss on
    a toy model of dimensions 'dims'.  Each stage runs under the scope the full
    model records it with, so 'faults' trip the stage as well as the 'mft'
    row.  'elements' samples that many elements per tensor; None checks every
    element.  'stages' restricts the check to some of STAGES.  Returns a list
    of rows (stage, [(tensor name, max relative error)]).
    """
    selected = set(stages or STAGES)
    unknown = selected - set(STAGES)
    if unknown:
        raise UsageError("Unknown stages: %s (known: %s)." %
                         (', '.join(sorted(unknown)), ', '.join(STAGES)))
    config = ModelConfig(dims['B'], dims['C'], dims['K'], patch=dims['k'],
                         tokens=dims['n'], heads=dims['h'], depth=dims['depth'],
                         embed_dim=dims['d'], mlp_hidden=2 * dims['d'],
                         dropout=0.0)
    params = init_params(config, seed)
    buffers = [t for _, t in params.named_buffers()]
    rng = Rng(seed, 7)
    n, k = dims['N'], dims['k']
    x_h = Tensor(rng.uniform(0.0, 1.0, (n, k, k, dims['B'])))
    x_l = Tensor(rng.uniform(0.0, 1.0, (n, k, k, dims['C'])))
    labels = rng.integers(0, dims['K'], n)

    # Intermediate inputs of each stage, from one train-mode forward.
    initial = [t.data.copy() for t in buffers]
    trace = {}
    mft_forward(x_h, x_l, params, training=True, rng=rng.spawn(0), trace=trace)
    for t, data in zip(buffers, initial):
        t.data = data
    feat = Tensor(trace['hetconv2d'].data)
    x_lc = Tensor(np.transpose(x_l.data, (0, 3, 1, 2)))
    cls = Tensor(trace['cls'].data)
    patches = Tensor(trace['patch_tokens'].data)
    seq = Tensor(trace['sequence'].data)
    out = Tensor(trace['blocks'][-1].data)

    def weights(shape):
        return Tensor(rng.normal(0.0, 1.0, shape))

    stages = []
    w = weights((n, dims['d'], k, k))
    stages.append(('extractor', 'extractor', [('x_h', x_h)] +
                   list(params.extractor.named_tensors('extractor.')),
                   lambda: _projection(hetconv2d_block(
                       conv3d_block(x_h, params.extractor, True),
                       params.extractor, True), w)))
    w_t = weights((n, dims['n'], dims['d']))
    stages.append(('hsi_tokenizer', 'tokenizer', [('features', feat)] +
                   list(params.hsi_tokenizer.named_tensors('hsi_tokenizer.')),
                   lambda: _projection(hsi_tokenize(feat, params.hsi_tokenizer),
                                       w_t)))
    w_c = weights((n, 1, dims['d']))
    stages.append(('aux_tokenizer', 'tokenizer', [('x_l', x_lc)] +
                   list(params.aux_tokenizer.named_tensors('aux_tokenizer.')),
                   lambda: _projection(aux_tokenize(x_lc, params.aux_tokenizer,
                                                    training=True), w_c)))
    w_s = weights((n, dims['n'] + 1, dims['d']))
    stages.append(('sequence', 'tokenizer', [('cls', cls), ('patches', patches)] +
                   list(params.sequence.named_tensors('sequence.')),
                   lambda: _projection(assemble_sequence(
                       cls, patches, params.sequence).tokens, w_s)))
    for i, block in enumerate(params.blocks):
        stages.append(('encoder%d' % i, 'encoder%d' % i, [('sequence', seq)] +
                       list(block.named_tensors('blocks.%d.' % i)),
                       lambda block=block: _projection(
                           encoder_block(seq, block), w_s)))
    w_k = weights((n, dims['K']))
    stages.append(('classifier', 'classifier', [('tokens', out)] +
                   list(params.classifier.named_tensors('classifier.')),
                   lambda: _projection(classify(out, params.classifier), w_k)))
    stages.append(('mft', None, list(params.named_tensors()),
                   lambda: mfttrain.cross_entropy(
                       mft_forward(x_h, x_l, params, training=True,
                                   rng=rng.spawn(0)), labels)))

    rows = []
    for name, scopename, named, loss_fn in stages:
        if name.rstrip('0123456789') not in selected:
            continue
        if scopename is not None:
            loss_fn = _scoped(scopename, loss_fn)
        errors = check_gradients(loss_fn, [t for _, t in named],
                                 elements=elements, rng=rng.spawn(1),
                                 faults=faults, tolerance=tolerance,
                                 buffers=buffers)
        rows.append((name, list(zip([tname for tname, _ in named], errors))))
    return rows


def cmd_gradcheck(opts, argv):
    dims = _parse_dims(opts.dims)
    if opts.elements is not None and opts.elements < 1:
        raise UsageError("--elements must be positive, got %d." % opts.elements)
    faults = (opts.break_,) if opts.break_ else ()
    print('gradcheck %s' % ' '.join('%s=%d' % (key, dims[key])
                                    for key, _ in _TOY_DIMS))
    rows = run_gradcheck(dims, faults, opts.elements, opts.seed,
                         opts.tolerance, opts.stage)
    failed = []
    for stage, errors in rows:
        worst = max(err for _, err in errors)
        status = 'ok' if worst <= opts.tolerance else 'FAIL'
        print('%-14s %-4s max error %.3e' % (stage, status, worst))
        failed.extend('%s:%s' % (stage, tname) for tname, err in errors
                      if err > opts.tolerance)
    if opts.output:
        write_manifest(opts.output, 'gradcheck', argv, dims=dims,
                       faults=list(faults), tolerance=opts.tolerance,
                       elements=opts.elements,
                       stages=opts.stage or list(STAGES))
        with open(os.path.join(opts.output, 'gradcheck.json'), 'w') as f:
            json.dump([{'stage': stage, 'errors': dict(errors)}
                       for stage, errors in rows], f, indent=2)
            f.write('\n')
    if failed:
        raise VerificationFailure("Gradients over %g: %s" %
                                  (opts.tolerance, ', '.join(failed)))
    return EXIT_OK



#-------------------------------------------------------------------------------

def cmd_inspect(opts, argv):
    path = opts.path
    if os.path.exists(os.path.join(path, 'header.json')):
        scene = load_scene(path)
        print('scene %s: %d x %d, %d bands, %d %s channels, %d classes%s' % (
            path, scene.rows, scene.cols, scene.bands, scene.aux_channels,
            scene.modality, scene.classes,
            ', with masks' if scene.has_masks else ''))
        for g, count in sorted(class_histogram(scene).items()):
            print('class %2d: %d pixels' % (g, count))
    elif os.path.exists(os.path.join(path, 'model.json')):
        ckpt = load_checkpoint(path)
        print('checkpoint %s: epoch %d, %d Adam steps' % (
            path, ckpt.epoch, ckpt.adam.step))
        print(repr(ckpt.config))
        for name, group in vars(ckpt.params).items():
            if name.startswith('_'):
                continue
            groups = group if isinstance(group, list) else [group]
            print('%-14s %10d' % (name, sum(g.num_scalars() for g in groups)))
        print('%-14s %10d' % ('total', count_parameters(ckpt.config)))
    else:
        raise DataError("%s is neither a scene nor a checkpoint." % path)
    return EXIT_OK


def cmd_replay(opts, argv):
    try:
        with open(opts.manifest) as f:
            manifest = json.load(f)
    except (IOError, ValueError) as e:
        raise DataError("Cannot read manifest %s: %s" % (opts.manifest, e))
    if manifest.get('format') != RUN_FORMAT:
        raise DataError("%s is not a run manifest." % opts.manifest)
    return run(manifest['argv'])



#-------------------------------------------------------------------------------

def make_parser():
    parser = ArgumentParser(prog='mft', description=__doc__.split('\n')[1])
    parser.add_argument('-v', '--verbose', action='store_true',
                        help="Log progress details")
    parser.add_argument('-q', '--quiet', action='store_true',
                        help="Log warnings and errors only")
    commands = parser.add_subparsers(dest='command')

    p = commands.add_parser('synth', help="Generate a synthetic scene")
    p.add_argument('--classes', type=int, default=4)
    p.add_argument('--size', default='64x64', help="Raster size MxN")
    p.add_argument('--bands', type=int, default=16)
    p.add_argument('--aux-channels', type=int, default=1)
    p.add_argument('--modality', choices=mftmodel.MODALITIES, default='lidar')
    p.add_argument('--noise-aux', action='store_true',
                   help="Make the auxiliary modality pure noise")
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('-o', '--output', required=True, help="Scene directory")
    p.set_defaults(func=cmd_synth)

    p = commands.add_parser('train', help="Train a model")
    p.add_argument('--scene', required=True)
    p.add_argument('--split', help="'disjoint' or 'random:<fraction>'")
    p.add_argument('--repeats', type=int, default=1)
    p.add_argument('--resplit', action='store_true',
                   help="Draw a new random split for every repetition")
    p.add_argument('--resume', help="Checkpoint directory to resume from")
    mftmodel.addopts(p)
    mfttrain.addopts(p)
    p.add_argument('-o', '--output', required=True, help="Run directory")
    p.set_defaults(func=cmd_train)

    p = commands.add_parser('eval', help="Evaluate a checkpoint")
    p.add_argument('--checkpoint', required=True)
    p.add_argument('--scene', required=True)
    p.add_argument('--split', help="Override the split of the checkpoint")
    p.add_argument('--map', help="Write a P6 classification map")
    p.add_argument('--full', action='store_true',
                   help="Map every pixel, not only the labeled ones")
    p.add_argument('-o', '--output', required=True, help="Report directory")
    p.set_defaults(func=cmd_eval)

    p = commands.add_parser('gradcheck', help="Verify gradients")
    p.add_argument('--dims', help="Toy dimensions, e.g. B=12,k=5,n=2")
    p.add_argument('--break', dest='break_', metavar='SCOPE',
                   choices=('attention', 'mlp', 'extractor', 'tokenizer',
                            'classifier'),
                   help="Corrupt the gradients of a scope (negative control)")
    p.add_argument('--elements', type=int,
                   help="Elements sampled per tensor (default: every element)")
    p.add_argument('--stage', action='append', choices=STAGES,
                   help="Check only this stage (repeatable)")
    p.add_argument('--tolerance', type=float, default=1e-4)
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('-o', '--output', help="Directory for the results")
    p.set_defaults(func=cmd_gradcheck)

    p = commands.add_parser('inspect', help="Describe a scene or checkpoint")
    p.add_argument('path')
    p.set_defaults(func=cmd_inspect)

    p = commands.add_parser('replay', help="Re-run a manifest")
    p.add_argument('manifest')
    p.set_defaults(func=cmd_replay)

    return parser


def run(argv):
    """
    Run one command line; errors propagate.
    """
    opts = make_parser().parse_args(argv)
    if opts.command is None:
        raise UsageError("No command given.")
    if opts.verbose:
        logging.getLogger().setLevel(logging.DEBUG)
    elif opts.quiet:
        logging.getLogger().setLevel(logging.WARNING)
    return opts.func(opts, argv)


def main(argv=None):
    """
    Entry point; returns the exit code.
    """
    if argv is None:
        argv = sys.argv[1:]
    if not logging.getLogger().handlers:
        logging.basicConfig(level=logging.INFO,
                            format='%(levelname)s: %(message)s')
    try:
        return run(argv)
    except UsageError as e:
        sys.stderr.write('mft: usage error: %s\n' % e)
        return EXIT_USAGE
    except DivergenceError as e:
        sys.stderr.write('mft: diverged: %s\n' % e)
        return EXIT_DIVERGENCE
    except (VerificationFailure, VerifierError) as e:
        sys.stderr.write('mft: %s\n' % e)
        return EXIT_VERIFY
    except (DataError, ConfigError, DimensionError, LabelError,
            PaletteError, EmptyEvaluationError) as e:
        sys.stderr.write('mft: %s\n' % e)
        return EXIT_DATA
    except OSError as e:
        log.error("I/O error: %s", e)
        return EXIT_DATA

if __name__ == '__main__':
    sys.exit(main())
