#!/usr/bin/env python

"""
Tests for the loss, the optimizer, the training loop and checkpoints.
"""

# stdlib imports
import io
import json
import math
import os
import shutil
import tempfile
import unittest

# numpy imports
import numpy as np
from numpy.testing import assert_allclose, assert_array_equal

# test imports
from mftsetup import *

# mft imports
from mfttensor import (Rng, Tensor, Tape, ConfigError, DimensionError,
                       check_gradients)
from mftdata import (DataError, FormatError, SceneBundle, STREAM_SPLIT,
                     class_histogram, split_random)
from mftmetrics import LabelError
from mftmodel import init_params, mft_forward
from mfttrain import *



def scene_config(**options):
    "Model configuration matching toy_scene()."
    return toy_config(aux_channels=1, classes=4, **options)

def toy_split(scene, seed=0, fraction=0.05):
    return split_random(scene, fraction, Rng(seed, STREAM_SPLIT))

def same_tensors(test, a, b):
    for (na, ta), (nb, tb) in zip(a.named_tensors(), b.named_tensors()):
        test.assertEqual(na, nb)
        assert_array_equal(ta.data, tb.data)
    for (na, ta), (nb, tb) in zip(a.named_buffers(), b.named_buffers()):
        test.assertEqual(na, nb)
        assert_array_equal(ta.data, tb.data)


class TestCrossEntropy(unittest.TestCase):

    def test_uniform(self):
        loss = cross_entropy(np.zeros((3, 4)), [0, 1, 3])
        self.assertAlmostEqual(loss.item(), math.log(4), places=6)

    def test_confident(self):
        logits = np.zeros((2, 3))
        logits[0, 1] = logits[1, 2] = 20.0
        self.assertLess(cross_entropy(logits, [1, 2]).item(), 1e-3)

    def test_reference(self):
        logits = Rng(0).normal(0.0, 3.0, (3, 5))
        labels = [4, 0, 2]
        expect = 0.0
        for row, y in zip(logits.tolist(), labels):
            top = max(row)
            expect -= row[y] - top - math.log(sum(math.exp(v - top) for v in row))
        expect /= 3
        got = cross_entropy(logits.astype(np.float32), labels).item()
        self.assertLess(abs(got - expect), 1e-6 * max(1.0, abs(expect)))

    def test_large_logits(self):
        logits = np.array([[1000.0, 0.0], [0.0, -1000.0]])
        self.assertTrue(math.isfinite(cross_entropy(logits, [1, 1]).item()))

    def test_errors(self):
        self.assertRaises(LabelError, cross_entropy, np.zeros((2, 3)), [0, 3])
        self.assertRaises(LabelError, cross_entropy, np.zeros((2, 3)), [-1, 0])
        self.assertRaises(DimensionError, cross_entropy, np.zeros((2, 3)), [0])

    def test_gradients(self):
        x = Tensor(Rng(1).normal(0.0, 1.0, (4, 3)))
        errors = check_gradients(lambda: cross_entropy(x, [0, 2, 1, 1]), [x])
        self.assertLess(max(errors), 1e-4)


class TestAdam(unittest.TestCase):

    def param(self, value, grad):
        t = Tensor(np.full((2,), value, np.float32), requires_grad=True)
        t.grad = np.full((2,), grad)
        return t

    def test_first_step(self):
        cfg = TrainConfig(weight_decay=0.0)
        t = self.param(0.5, 1.0)
        state = AdamState()
        adam_step([('w', t)], state, cfg)
        expect = np.float32(0.5 - cfg.lr / (1.0 + cfg.adam_eps))
        assert_allclose(t.data, expect, rtol=1e-7)
        self.assertEqual(state.step, 1)

    def test_zero_gradient(self):
        t = self.param(0.0, 0.0)
        adam_step([('w', t)], AdamState(), TrainConfig(weight_decay=0.0))
        assert_array_equal(t.data, 0.0)

    def test_two_steps(self):
        cfg = TrainConfig()
        theta0, grads = 0.3, [0.7, -0.2]
        t = Tensor(np.array([theta0], np.float32), requires_grad=True)
        state = AdamState()
        theta, m, v = float(np.float32(theta0)), 0.0, 0.0
        for step, g in enumerate(grads, 1):
            t.grad = np.array([g])
            adam_step([('w', t)], state, cfg)
            g = g + cfg.weight_decay * theta
            m = cfg.beta1 * m + (1 - cfg.beta1) * g
            v = cfg.beta2 * v + (1 - cfg.beta2) * g * g
            mhat = m / (1 - cfg.beta1 ** step)
            vhat = v / (1 - cfg.beta2 ** step)
            theta = float(np.float32(
                theta - cfg.lr * mhat / (math.sqrt(vhat) + cfg.adam_eps)))
        self.assertLess(abs(float(t.data[0]) - theta), 1e-7)

    def test_non_finite_gradient(self):
        a = self.param(0.0, 1.0)
        b = self.param(0.0, float('nan'))
        state = AdamState()
        try:
            adam_step([('a', a), ('b', b)], state, TrainConfig())
        except DivergenceError as e:
            self.assertEqual(e.tensor, 'b')
        else:
            self.fail("NaN gradient accepted")
        # Nothing is updated once a bad gradient is seen.
        assert_array_equal(a.data, 0.0)
        self.assertEqual(state.step, 0)


class TestSchedule(unittest.TestCase):

    def test_step_decay(self):
        cfg = TrainConfig()
        for epoch in (0, 1, 49):
            self.assertAlmostEqual(lr_at(epoch, cfg), 5e-4, places=15)
        self.assertAlmostEqual(lr_at(50, cfg), 4.5e-4, places=15)
        self.assertAlmostEqual(lr_at(100, cfg), 4.05e-4, places=15)
        self.assertRaises(ConfigError, lr_at, -1, cfg)

    def test_config(self):
        cfg = TrainConfig(epochs=3, lr=1e-3)
        self.assertEqual(TrainConfig.from_dict(cfg.to_dict()), cfg)
        self.assertEqual(cfg.replace(seed=4).seed, 4)
        self.assertRaises(ConfigError, TrainConfig, colour='red')
        self.assertRaises(ConfigError, TrainConfig, gamma=1.5)
        self.assertRaises(ConfigError, TrainConfig, batch_train=1)


class TestTrain(unittest.TestCase):

    def setUp(self):
        self.tmpdir = tempfile.mkdtemp()
        self.scene = toy_scene()
        self.train_coords, self.test_coords = toy_split(self.scene)

    def tearDown(self):
        shutil.rmtree(self.tmpdir)

    def test_zero_epochs(self):
        config = scene_config()
        ckpt, records = train(self.scene, self.train_coords, config,
                              TrainConfig(epochs=0, seed=3))
        self.assertEqual(records, [])
        self.assertEqual(ckpt.epoch, 0)
        same_tensors(self, ckpt.params, init_params(config, 3))

    def test_records(self):
        log = io.StringIO()
        ckpt, records = train(self.scene, self.train_coords, scene_config(),
                              TrainConfig(epochs=2, batch_train=16,
                                          eval_every=1),
                              self.test_coords, logfile=log)
        self.assertEqual([r['epoch'] for r in records], [0, 1])
        self.assertEqual(ckpt.epoch, 2)
        batches = -(-len(self.train_coords) // 16)
        self.assertEqual(ckpt.adam.step, 2 * batches)
        lines = [json.loads(line) for line in log.getvalue().splitlines()]
        self.assertEqual(lines, records)
        self.assertTrue(all(0.0 <= r['eval_oa'] <= 1.0 for r in records))

    def test_deterministic(self):
        tconfig = TrainConfig(epochs=2, batch_train=16)
        config = scene_config(dropout=0.2)
        a, ra = train(self.scene, self.train_coords, config, tconfig)
        b, rb = train(self.scene, self.train_coords, config, tconfig)
        same_tensors(self, a.params, b.params)
        self.assertEqual(ra, rb)

    def test_resume_is_bit_exact(self):
        config = scene_config(dropout=0.2)
        full = TrainConfig(epochs=4, batch_train=16, step_size=2)
        straight, records = train(self.scene, self.train_coords, config, full)

        path = os.path.join(self.tmpdir, 'ckpt')
        train(self.scene, self.train_coords, config, full.replace(epochs=2),
              out=path)
        resumed, tail = train(self.scene, self.train_coords, config, full,
                              resume=load_checkpoint(path))
        same_tensors(self, straight.params, resumed.params)
        self.assertEqual(straight.adam.step, resumed.adam.step)
        for name in straight.adam.m:
            assert_array_equal(straight.adam.m[name], resumed.adam.m[name])
            assert_array_equal(straight.adam.v[name], resumed.adam.v[name])
        self.assertEqual(records[2:], tail)

    def test_resume_other_config(self):
        ckpt, _ = train(self.scene, self.train_coords, scene_config(),
                        TrainConfig(epochs=0))
        self.assertRaises(ConfigError, train, self.scene, self.train_coords,
                          scene_config(depth=2), TrainConfig(epochs=1),
                          resume=ckpt)

    def test_one_step_reduces_loss(self):
        config = scene_config()
        params = init_params(config, 0)
        x_h, x_l, labels = toy_inputs(config, n=8)
        labels = labels % config.classes

        def loss_value():
            return cross_entropy(mft_forward(x_h, x_l, params, True),
                                 labels)

        with Tape() as tape:
            loss = loss_value()
        before = loss.item()
        tape.backward(loss)
        adam_step(params, AdamState(), TrainConfig(lr=1e-5, weight_decay=0.0))
        self.assertLess(loss_value().item(), before)

    def test_divergence(self):
        hsi = self.scene.hsi.copy()
        hsi[:] = np.nan
        scene = SceneBundle(hsi, self.scene.aux, self.scene.labels)
        try:
            train(scene, self.train_coords, scene_config(),
                  TrainConfig(epochs=1))
        except DivergenceError as e:
            self.assertEqual((e.epoch, e.batch), (0, 0))
            self.assertTrue('epoch 0' in str(e))
        else:
            self.fail("NaN input trained")

    def test_empty_split(self):
        self.assertRaises(DataError, train, self.scene, np.zeros((0, 2), int),
                          scene_config(), TrainConfig(epochs=1))


class TestEvaluate(unittest.TestCase):

    def test_constant_prediction(self):
        scene = toy_scene()
        config = scene_config()
        params = init_params(config, 0)
        for name, t in params.named_tensors():
            if name.startswith('classifier.'):
                t.data[...] = 0
        head = dict(params.named_tensors())['classifier.head_bias']
        head.data[0] = 1.0
        _, test = toy_split(scene)
        report = evaluate(params, scene, test)
        hist = class_histogram(scene, test)
        self.assertAlmostEqual(report.oa, hist[1] / float(len(test)), places=12)
        self.assertAlmostEqual(report.aa, 1.0 / 4, places=12)
        self.assertEqual(report.to_json(), evaluate(params, scene, test).to_json())

    def test_batch_size_irrelevant(self):
        scene = toy_scene()
        params = init_params(scene_config(), 1)
        _, test = toy_split(scene)
        a = evaluate(params, scene, test, batch_size=7)
        b = evaluate(params, scene, test, batch_size=500)
        self.assertEqual(a.to_json(), b.to_json())

    def test_mismatch(self):
        params = init_params(toy_config(), 0)
        scene = toy_scene()
        self.assertRaises(ConfigError, evaluate, params, scene,
                          toy_split(scene)[1])


class TestCheckpoint(unittest.TestCase):

    def setUp(self):
        self.tmpdir = tempfile.mkdtemp()
        self.path = os.path.join(self.tmpdir, 'ckpt')
        scene = toy_scene()
        self.ckpt, _ = train(scene, toy_split(scene)[0], scene_config(),
                             TrainConfig(epochs=1, batch_train=32),
                             data={'split': 'random:0.05'})

    def tearDown(self):
        shutil.rmtree(self.tmpdir)

    def test_round_trip(self):
        save_checkpoint(self.ckpt, self.path)
        loaded = load_checkpoint(self.path)
        same_tensors(self, self.ckpt.params, loaded.params)
        self.assertEqual(loaded.config, self.ckpt.config)
        self.assertEqual(loaded.train_config, self.ckpt.train_config)
        self.assertEqual((loaded.epoch, loaded.adam.step),
                         (1, self.ckpt.adam.step))
        self.assertEqual(loaded.data, {'split': 'random:0.05'})
        self.assertEqual(sorted(loaded.adam.m), sorted(self.ckpt.adam.m))

    def test_manifest(self):
        save_checkpoint(self.ckpt, self.path)
        manifest = json.load(open(os.path.join(self.path, 'model.json')))
        self.assertEqual(manifest['format'], 'MFTCKPT1')
        kinds = set(t['kind'] for t in manifest['tensors'])
        self.assertEqual(kinds, set(['param', 'buffer', 'adam_m', 'adam_v']))
        size = os.path.getsize(os.path.join(self.path, 'weights.f32'))
        last = manifest['tensors'][-1]
        self.assertEqual(size, last['offset'] + 4 * int(np.prod(last['shape'])))

    def test_truncated(self):
        save_checkpoint(self.ckpt, self.path)
        fn = os.path.join(self.path, 'weights.f32')
        data = open(fn, 'rb').read()
        open(fn, 'wb').write(data[:len(data) // 2])
        self.assertRaises(FormatError, load_checkpoint, self.path)

    def test_bad_format(self):
        save_checkpoint(self.ckpt, self.path)
        fn = os.path.join(self.path, 'model.json')
        manifest = json.load(open(fn))
        manifest['format'] = 'MFTCKPT0'
        json.dump(manifest, open(fn, 'w'))
        self.assertRaises(FormatError, load_checkpoint, self.path)

    def test_unknown_tensor(self):
        save_checkpoint(self.ckpt, self.path)
        fn = os.path.join(self.path, 'model.json')
        manifest = json.load(open(fn))
        manifest['tensors'][0]['name'] = 'extractor.nothing'
        json.dump(manifest, open(fn, 'w'))
        self.assertRaises(FormatError, load_checkpoint, self.path)

    def test_missing(self):
        self.assertRaises(FormatError, load_checkpoint, self.path)


class TestRepeats(unittest.TestCase):

    def setUp(self):
        self.tmpdir = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.tmpdir)

    def test_summary(self):
        scene = toy_scene()
        runs, summary = run_repeats(scene, 'random:0.05', scene_config(),
                                    TrainConfig(epochs=1, batch_train=32), 2,
                                    out=self.tmpdir)
        self.assertEqual(len(runs), 2)
        self.assertEqual(summary['repeats'], 2)
        oas = [report.oa for _, _, report in runs]
        self.assertAlmostEqual(summary['oa']['mean'], np.mean(oas), places=12)
        self.assertAlmostEqual(summary['oa']['std'], np.std(oas), places=12)
        for r in range(2):
            rdir = os.path.join(self.tmpdir, 'repeat%d' % r)
            for fn in ('log.jsonl', 'report.json', 'model.json'):
                self.assertTrue(os.path.exists(os.path.join(rdir, fn)))
        self.assertEqual(runs[1][0].train_config.seed, 1)


@unittest.skipUnless(SLOW, "set MFT_SLOW=1 for the convergence tests")
class TestConvergence(unittest.TestCase):
    """
    End-to-end learning on 4-class 64 x 64 synthetic scenes with 16 bands, one
    auxiliary channel and the default model.
    """

    def scene(self, **kwds):
        return synth_scene(4, 64, 64, 16, 1, Rng(0, STREAM_SCENE), **kwds)

    def test_loss_decreases(self):
        scene = self.scene(confusable=False)
        train_coords, _ = toy_split(scene, fraction=0.3)
        decreasing = 0
        for seed in range(3):
            _, records = train(scene, train_coords, ModelConfig(16, 1, 4),
                               TrainConfig(epochs=5, seed=seed))
            losses = [r['train_loss'] for r in records]
            if all(b < a for a, b in zip(losses, losses[1:])):
                decreasing += 1
        self.assertGreaterEqual(decreasing, 2)

    def test_default_model_learns(self):
        runs, _ = run_repeats(self.scene(), 'random:0.05',
                              ModelConfig(16, 1, 4), TrainConfig(epochs=200),
                              3, resplit=True)
        self.assertGreaterEqual(np.mean([r.oa for _, _, r in runs]), 0.95)

    def test_informative_aux_helps(self):
        oa = {}
        for informative in (True, False):
            runs, _ = run_repeats(self.scene(aux_informative=informative),
                                  'random:0.05', ModelConfig(16, 1, 4),
                                  TrainConfig(epochs=200), 5, resplit=True)
            oa[informative] = np.mean([r.oa for _, _, r in runs])
        self.assertGreaterEqual(oa[True], oa[False])


if __name__ == '__main__':
    unittest.main()
