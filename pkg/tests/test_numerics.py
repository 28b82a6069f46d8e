import unittest
import sys
import os

import numpy as np
import torch

# Add the project root to the Python path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

from numerics import (CrossAttention, GruCell, LayerNorm, Linear, backward, cross_attention, grad_check,
                      gru_step, layer_norm, linear, set_precision, softmax)


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def numpy_gru(cell, h, u):
    """Step-by-step GRU update in float64 numpy"""
    def affine(layer, x):
        return x @ layer.weight.detach().numpy() + layer.bias.detach().numpy()

    uh = np.concatenate([u, h], axis=-1)
    z = sigmoid(affine(cell.update_gate, uh))
    r = sigmoid(affine(cell.reset_gate, uh))
    candidate = np.tanh(affine(cell.candidate, np.concatenate([u, r * h], axis=-1)))
    return (1 - z) * h + z * candidate


class TransposedGrad(torch.autograd.Function):
    """Identity whose backward hands back a non-contiguous gradient"""

    @staticmethod
    def forward(ctx, x):
        return x.clone()

    @staticmethod
    def backward(ctx, grad):
        return grad.t().contiguous().t()


class TestNumerics(unittest.TestCase):
    """Test cases for the tensor primitives"""

    def setUp(self):
        """Run every check in double precision."""
        set_precision('float64')
        torch.manual_seed(0)

    def tearDown(self):
        set_precision('float32')

    def test_softmax_normalizes_along_axis(self):
        """Softmax rows sum to one and large logits stay finite"""
        x = torch.tensor([[1000.0, 1001.0, 999.0], [0.0, 0.0, 0.0]])
        out = softmax(x, axis=-1)
        torch.testing.assert_close(out.sum(dim=-1), torch.ones(2))
        self.assertTrue(torch.all(torch.isfinite(out)))
        torch.testing.assert_close(out[1], torch.full((3,), 1 / 3))

    def test_softmax_rejects_bad_axis(self):
        with self.assertRaises(ValueError):
            softmax(torch.zeros(2, 3), axis=2)

    def test_linear_uses_in_out_layout(self):
        """y = x·W with W stored as (in, out)"""
        x = torch.tensor([[1.0, 2.0]])
        w = torch.tensor([[1.0, 0.0, 2.0], [0.0, 1.0, 1.0]])
        b = torch.tensor([0.5, 0.5, 0.5])
        torch.testing.assert_close(linear(x, w, b), torch.tensor([[1.5, 2.5, 4.5]]))
        with self.assertRaises(ValueError):
            linear(torch.zeros(1, 3), w)
        with self.assertRaises(ValueError):
            linear(x, w, torch.zeros(2))

    def test_layer_norm_matches_torch(self):
        x = torch.randn(4, 6)
        norm = LayerNorm(6)
        expected = torch.nn.functional.layer_norm(x, (6,), eps=1e-5)
        torch.testing.assert_close(norm(x), expected)
        with self.assertRaises(ValueError):
            layer_norm(x, torch.ones(5), torch.zeros(5))

    def test_gru_gate_extremes(self):
        """A closed update gate keeps h, an open one replaces it with the candidate"""
        cell = GruCell(3, 4)
        h = torch.randn(2, 4)
        u = torch.randn(2, 3)
        with torch.no_grad():
            cell.update_gate.weight.zero_()
            cell.update_gate.bias.fill_(-60.0)
        torch.testing.assert_close(gru_step(cell, h, u), h)

        with torch.no_grad():
            cell.update_gate.bias.fill_(60.0)
            cell.reset_gate.weight.zero_()
            cell.reset_gate.bias.fill_(60.0)
        candidate = torch.tanh(cell.candidate(torch.cat([u, h], dim=-1)))
        torch.testing.assert_close(gru_step(cell, h, u), candidate)

    def test_gru_matches_scalar_oracle(self):
        cell = GruCell(3, 4)
        with torch.no_grad():
            for gate in (cell.update_gate, cell.reset_gate, cell.candidate):
                gate.bias.normal_(0.0, 0.3)
        h = torch.randn(2, 4)
        u = torch.randn(2, 3)
        expected = numpy_gru(cell, h.numpy(), u.numpy())
        np.testing.assert_allclose(gru_step(cell, h, u).detach().numpy(), expected, atol=1e-6, rtol=0)

    def test_gru_rejects_mismatched_sizes(self):
        cell = GruCell(3, 4)
        with self.assertRaises(ValueError):
            gru_step(cell, torch.zeros(1, 5), torch.zeros(1, 3))
        with self.assertRaises(ValueError):
            gru_step(cell, torch.zeros(1, 4), torch.zeros(1, 2))

    def test_cross_attention_single_context_token(self):
        """With one context token every query attends to it fully"""
        attn = CrossAttention(4, 3, heads=2)
        x = torch.randn(1, 5, 4)
        context = torch.randn(1, 1, 3)
        out, weights, mean = cross_attention(x, context, attn)
        torch.testing.assert_close(mean, torch.ones(1, 5, 1))
        self.assertEqual(tuple(weights.shape), (1, 2, 5, 1))
        value = attn.to_out(attn.to_v(context)).expand(1, 5, 4)
        torch.testing.assert_close(out, value)

    def identity_attention(self):
        attn = CrossAttention(2, 2, heads=1)
        with torch.no_grad():
            for layer in (attn.to_q, attn.to_k, attn.to_v, attn.to_out):
                layer.weight.copy_(torch.eye(2))
            attn.to_out.bias.zero_()
        return attn

    def test_cross_attention_two_by_two_oracle(self):
        """Identity projections reduce to softmax(Q·Kᵀ/√D)·V"""
        x = torch.tensor([[[1.0, 0.0], [0.5, -1.0]]])
        context = torch.tensor([[[0.0, 2.0], [1.0, 1.0]]])
        out, _, mean = cross_attention(x, context, self.identity_attention())

        q, kv = x[0].numpy(), context[0].numpy()
        logits = q @ kv.T / np.sqrt(2.0)
        weights = np.exp(logits - logits.max(axis=1, keepdims=True))
        weights /= weights.sum(axis=1, keepdims=True)
        np.testing.assert_allclose(mean[0].detach().numpy(), weights, atol=1e-12, rtol=0)
        np.testing.assert_allclose(out[0].detach().numpy(), weights @ kv, atol=1e-12, rtol=0)

    def test_cross_attention_invariant_to_context_order(self):
        attn = CrossAttention(4, 3, heads=2)
        x = torch.randn(2, 5, 4)
        context = torch.randn(2, 4, 3)
        order = torch.tensor([2, 0, 3, 1])
        out, _, mean = cross_attention(x, context, attn)
        permuted_out, _, permuted_mean = cross_attention(x, context[:, order], attn)
        torch.testing.assert_close(permuted_out, out, atol=1e-6, rtol=0)
        torch.testing.assert_close(permuted_mean, mean[..., order], atol=1e-6, rtol=0)

    def test_cross_attention_duplicate_context(self):
        """Duplicated context tokens split the weight and leave the output unchanged"""
        attn = CrossAttention(4, 3, heads=2)
        x = torch.randn(1, 3, 4)
        context = torch.randn(1, 1, 3)
        single, _, _ = cross_attention(x, context, attn)
        doubled, _, mean = cross_attention(x, context.repeat(1, 2, 1), attn)
        torch.testing.assert_close(doubled, single)
        torch.testing.assert_close(mean, torch.full((1, 3, 2), 0.5))

    def test_cross_attention_validation(self):
        attn = CrossAttention(4, 3, heads=2)
        with self.assertRaises(ValueError):
            cross_attention(torch.randn(1, 2, 4), torch.randn(1, 0, 3), attn)
        with self.assertRaises(ValueError):
            cross_attention(torch.randn(1, 2, 4), torch.randn(1, 1, 3), attn, heads=4)
        with self.assertRaises(ValueError):
            CrossAttention(6, 3, heads=4)

    def test_backward_requires_scalar(self):
        w = torch.ones(3, requires_grad=True)
        with self.assertRaises(ValueError):
            backward(w * 2)
        backward((w * 2).sum())
        torch.testing.assert_close(w.grad, torch.full((3,), 2.0))

    def test_grad_check_agrees_with_autograd(self):
        layer = Linear(3, 2)
        x = torch.randn(4, 3)

        def loss():
            return torch.tanh(layer(x)).pow(2).sum()

        self.assertLess(grad_check(loss, list(layer.parameters())), 1e-6)

    def test_grad_check_quadratic(self):
        p = torch.randn(5, requires_grad=True)
        self.assertLess(grad_check(lambda: (p ** 2).sum() + 3 * p.sum(), [p]), 1e-7)

    def test_grad_check_non_contiguous_gradient(self):
        p = torch.randn(3, 4, requires_grad=True)
        weights = torch.randn(3, 4)
        self.assertLess(grad_check(lambda: (TransposedGrad.apply(p) * weights).sum(), [p]), 1e-6)

    def test_grad_check_conv_on_permuted_input(self):
        """A conv fed a channels-last view can return channels-last weight gradients"""
        conv = torch.nn.Conv2d(3, 4, 3, padding=1)
        x = torch.randn(2, 5, 5, 3)

        def loss():
            return conv(x.permute(0, 3, 1, 2)).pow(2).mean()

        self.assertLess(grad_check(loss, list(conv.parameters())), 1e-6)

    def test_grad_check_rejects_bad_step(self):
        p = torch.zeros(2, requires_grad=True)
        with self.assertRaises(ValueError):
            grad_check(lambda: (p ** 2).sum(), [p], eps=1e-2)


if __name__ == '__main__':
    unittest.main()
