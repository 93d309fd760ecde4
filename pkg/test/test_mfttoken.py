#!/usr/bin/env python

"""
Tests for the HSI and auxiliary tokenizers and the sequence assembly.
"""

# stdlib imports
import unittest

# numpy and scipy imports
import numpy as np
from numpy.testing import assert_allclose, assert_array_equal
from scipy.special import erf

# test imports
from mftsetup import *

# mft imports
from mfttensor import (Rng, Tensor, ConfigError, DimensionError, precision,
                       check_gradients, mul, sum as tsum)
from mfttoken import *



def flatten(feat):
    n, c, h, w = feat.shape
    return np.transpose(feat.reshape(n, c, h * w), (0, 2, 1))


class TestHsiTokenizer(unittest.TestCase):

    def test_dense_oracle(self):
        for i in range(50):
            rng = Rng(10, i)
            p = HsiTokenizerParams(8, 3, rng.spawn(0))
            feat = rng.normal(0.0, 1.0, (2, 8, 5, 5))
            with precision(np.float64):
                got = hsi_tokenize(Tensor(feat), p).data
            expect = dense_tokenize(flatten(feat), p.W_aH.data, p.W_bH.data)
            assert_allclose(got, expect, atol=1e-6)

    def test_attention_is_convex(self):
        p = HsiTokenizerParams(8, 4, Rng(0))
        feat = Rng(1).normal(0.0, 1.0, (3, 8, 5, 5))
        tokens, attention = hsi_tokenize(feat, p, with_attention=True)
        self.assertEqual(tokens.shape, (3, 4, 8))
        self.assertEqual(attention.shape, (3, 4, 25))
        assert_allclose(attention.data.sum(axis=-1), np.ones((3, 4)), atol=1e-6)

    def test_zero_logits_uniform(self):
        p = HsiTokenizerParams(8, 3, Rng(0))
        p.W_aH.data[...] = 0.0
        feat = Rng(3).normal(0.0, 1.0, (2, 8, 5, 5))
        with precision(np.float64):
            tokens, attention = hsi_tokenize(Tensor(feat), p,
                                             with_attention=True)
        assert_allclose(attention.data, np.full((2, 3, 25), 1.0 / 25),
                        atol=1e-12)
        mean = (flatten(feat) @ p.W_bH.data.astype(np.float64)).mean(axis=1)
        for t in range(3):
            assert_allclose(tokens.data[:, t], mean, atol=1e-10)

    def test_spatial_permutation(self):
        p = HsiTokenizerParams(8, 3, Rng(0))
        feat = Rng(4).normal(0.0, 1.0, (2, 8, 5, 5))
        perm = Rng(5).permutation(25)
        shuffled = feat.reshape(2, 8, 25)[:, :, perm].reshape(2, 8, 5, 5)
        with precision(np.float64):
            a = hsi_tokenize(Tensor(feat), p).data
            b = hsi_tokenize(Tensor(shuffled), p).data
        assert_allclose(a, b, atol=1e-12)

    def test_width_mismatch(self):
        p = HsiTokenizerParams(8, 4, Rng(0))
        self.assertRaises(DimensionError, hsi_tokenize,
                          np.zeros((1, 6, 5, 5)), p)


class TestAuxTokenizer(unittest.TestCase):

    def features(self, x, p):
        "conv 3x3 p1, batch norm with default statistics, GELU; flattened."
        y = naive_conv2d(x, p.conv_weight.data, p.conv_bias.data, 1, 1)
        y = y / np.sqrt(1.0 + 1e-5)
        y = y * p.bn.weight.data.reshape(1, -1, 1, 1) + \
            p.bn.bias.data.reshape(1, -1, 1, 1)
        return flatten(0.5 * y * (1.0 + erf(y / np.sqrt(2.0))))

    def oracle(self, x, p):
        return dense_tokenize(self.features(x, p), p.W_aL.data, p.W_bL.data)

    def test_dense_oracle(self):
        for variant in VARIANTS:
            for i in range(50):
                rng = Rng(20, i)
                p = AuxTokenizerParams(2, 8, variant, rng.spawn(0))
                x = rng.uniform(0.0, 1.0, (2, 2, 5, 5))
                with precision(np.float64):
                    got = aux_tokenize(Tensor(x), p, variant).data
                self.assertEqual(got.shape, (2, 1, 8))
                assert_allclose(got, self.oracle(x, p), atol=1e-6)

    def test_variant_shapes(self):
        pixel = AuxTokenizerParams(1, 16, 'pixel', Rng(0))
        channel = AuxTokenizerParams(1, 16, 'channel', Rng(0))
        self.assertEqual(pixel.conv_weight.shape, (1, 1, 3, 3))
        self.assertEqual(pixel.W_bL.shape, (1, 16))
        self.assertEqual(channel.conv_weight.shape, (16, 1, 3, 3))
        self.assertEqual(channel.W_aL.shape, (16, 1))

    def test_channel_counts(self):
        for channels in (1, 4, 8):
            for variant in VARIANTS:
                p = AuxTokenizerParams(channels, 8, variant, Rng(channels))
                x = Rng(6).uniform(0.0, 1.0, (2, channels, 5, 5))
                self.assertEqual(aux_tokenize(x, p, training=True).shape,
                                 (2, 1, 8))

    def test_pixel_zero_logits(self):
        p = AuxTokenizerParams(2, 8, 'pixel', Rng(0))
        p.W_aL.data[...] = 0.0
        x = Rng(7).uniform(0.0, 1.0, (3, 2, 5, 5))
        with precision(np.float64):
            got = aux_tokenize(Tensor(x), p).data
        x_wb = self.features(x, p) @ p.W_bL.data.astype(np.float64)
        assert_allclose(got[:, 0], x_wb.mean(axis=1), atol=1e-10)

    def test_errors(self):
        p = AuxTokenizerParams(1, 8, 'pixel', Rng(0))
        self.assertRaises(ConfigError, aux_tokenize, np.zeros((1, 1, 5, 5)), p,
                          'channel')
        self.assertRaises(DimensionError, aux_tokenize, np.zeros((1, 3, 5, 5)), p)
        self.assertRaises(ConfigError, AuxTokenizerParams, 1, 8, 'voxel', Rng(0))

    def test_gradients(self):
        p = AuxTokenizerParams(2, 8, 'channel', Rng(0))
        x = Tensor(Rng(1).uniform(0.0, 1.0, (3, 2, 5, 5)))
        r = Tensor(Rng(2).normal(0.0, 1.0, (3, 1, 8)))
        errors = check_gradients(
            lambda: tsum(mul(aux_tokenize(x, p, training=True), r)),
            [x] + p.parameters(), elements=6, rng=Rng(3))
        self.assertLess(max(errors), 1e-4)


class TestSequence(unittest.TestCase):

    def test_assemble(self):
        p = SequenceParams(4, 8, 0.1, Rng(0))
        cls = Rng(1).normal(0.0, 1.0, (2, 1, 8))
        patches = Rng(2).normal(0.0, 1.0, (2, 4, 8))
        seq = assemble_sequence(cls, patches, p)
        self.assertEqual(seq.shape, (2, 5, 8))
        assert_allclose(seq.cls(), cls[:, 0] + p.pos_embed.data[0], rtol=1e-5,
                        atol=1e-6)
        assert_allclose(seq.patches(), patches + p.pos_embed.data[1:], rtol=1e-5,
                        atol=1e-6)

    def test_zero_embedding_concatenates(self):
        p = SequenceParams(3, 8, 0.1, Rng(0))
        p.pos_embed.data[...] = 0.0
        cls = Rng(1).normal(0.0, 1.0, (2, 1, 8)).astype(np.float32)
        patches = Rng(2).normal(0.0, 1.0, (2, 3, 8)).astype(np.float32)
        seq = assemble_sequence(cls, patches, p)
        assert_array_equal(seq.tokens.data,
                           np.concatenate([cls, patches], axis=1))

    def test_dropout_fraction(self):
        p = SequenceParams(4, 40, 0.1, Rng(0))
        seq = assemble_sequence(np.ones((50, 1, 40)), np.ones((50, 4, 40)), p,
                                True, Rng(8))
        self.assertEqual(seq.tokens.data.size, 10000)
        dropped = (seq.tokens.data == 0).mean()
        self.assertTrue(0.08 <= dropped <= 0.12, dropped)

    def test_dropout_in_train_mode_only(self):
        p = SequenceParams(2, 8, 0.5, Rng(0))
        cls = np.ones((4, 1, 8))
        patches = np.ones((4, 2, 8))
        a = assemble_sequence(cls, patches, p).tokens.data
        b = assemble_sequence(cls, patches, p, True, Rng(5)).tokens.data
        self.assertTrue(np.all(a != 0))
        self.assertTrue(np.any(b == 0))

    def test_mismatch(self):
        p = SequenceParams(4, 8, 0.0, Rng(0))
        self.assertRaises(DimensionError, assemble_sequence,
                          np.zeros((2, 1, 8)), np.zeros((2, 3, 8)), p)
        self.assertRaises(DimensionError, assemble_sequence,
                          np.zeros((2, 1, 8)), np.zeros((3, 4, 8)), p)


if __name__ == '__main__':
    unittest.main()
