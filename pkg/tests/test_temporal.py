import unittest
import sys
import os

import numpy as np
import torch

# Add the project root to the Python path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

from config import TemporalMode
from diffusion_decoder import make_schedule
from numerics import set_precision
from temporal import (PoseFusion, RegisterAggregator, SlotAggregator, VideoConditioning, aggregate_registers,
                      aggregate_slots, augment, frame_window, fuse_pose_v2, one_frame_forward, one_frame_step,
                      pad_clip)


class StaticClipModel:
    """Minimal video model whose every frame shares one clean target"""

    def __init__(self, batch, length, slots=2, dim=4, tokens=16):
        self.mode = TemporalMode.V1
        gen = torch.Generator().manual_seed(0)
        self.schedule = make_schedule(20, 1e-4, 0.3)
        self.denoiser = None
        self.conditioning = VideoConditioning(
            slots=torch.randn(batch, length, slots, 2 * dim, generator=gen),
            register=torch.randn(batch, length, dim, generator=gen),
            attn=torch.softmax(torch.randn(batch, length, slots, tokens, generator=gen), dim=2),
            grid_shape=(4, 4),
        )

    def encode_clip(self, clip, rng, valid=None):
        return self.conditioning

    def diffusion_target(self, images):
        return images * 2 - 1


class TestTemporal(unittest.TestCase):
    """Test cases for temporal aggregation and single-frame training"""

    def setUp(self):
        set_precision('float64')
        torch.manual_seed(0)
        self.gen = torch.Generator().manual_seed(1)

    def tearDown(self):
        set_precision('float32')

    def test_augment_is_exact_concatenation(self):
        a = torch.randn(2, 3, 4, 5, generator=self.gen)
        b = torch.randn(2, 3, 4, 5, generator=self.gen)
        out = augment(a, b)
        self.assertTrue(torch.equal(out[..., :5], a))
        self.assertTrue(torch.equal(out[..., 5:], b))
        with self.assertRaises(ValueError):
            augment(a, b[:, :2])

    def test_slot_aggregator_shapes_and_limits(self):
        aggregator = SlotAggregator(8, max_frames=3, layers=1, heads=2)
        slots = torch.randn(2, 3, 4, 8, generator=self.gen)
        out = aggregator(slots)
        self.assertEqual(tuple(out.shape), (2, 3, 4, 8))
        torch.testing.assert_close(aggregate_slots(slots, aggregator), out)
        with self.assertRaises(ValueError):
            aggregator(torch.randn(1, 4, 4, 8))

    def test_frame_swap_without_position_embedding(self):
        """Without frame embeddings the aggregator is equivariant to frame order"""
        aggregator = SlotAggregator(8, max_frames=3, layers=2, heads=2)
        with torch.no_grad():
            aggregator.pos_emb.zero_()
        slots = torch.randn(1, 3, 2, 8, generator=self.gen)
        order = [2, 0, 1]
        base = aggregator(slots)
        swapped = aggregator(slots[:, order])
        torch.testing.assert_close(swapped, base[:, order])

    def test_frame_and_embedding_swap(self):
        """Swapping two frames together with their embeddings swaps the outputs"""
        aggregator = SlotAggregator(8, max_frames=3, layers=2, heads=2)
        slots = torch.randn(1, 3, 2, 8, generator=self.gen)
        order = [2, 1, 0]
        base = aggregator(slots)
        with torch.no_grad():
            aggregator.pos_emb.copy_(aggregator.pos_emb[order].clone())
        swapped = aggregator(slots[:, order])
        torch.testing.assert_close(swapped, base[:, order], atol=1e-6, rtol=0)

    def test_slot_order_within_frames(self):
        aggregator = SlotAggregator(8, max_frames=3, layers=1, heads=2)
        slots = torch.randn(2, 3, 4, 8, generator=self.gen)
        order = [1, 3, 0, 2]
        torch.testing.assert_close(aggregator(slots[:, :, order]), aggregator(slots)[:, :, order])

    def test_single_frame_aggregation_is_deterministic(self):
        aggregator = SlotAggregator(8, max_frames=5, layers=1, heads=2)
        slots = torch.randn(1, 1, 3, 8, generator=self.gen)
        torch.testing.assert_close(aggregator(slots), aggregator(slots))

    def test_register_aggregator(self):
        features = torch.randn(2, 3, 16, 8, generator=self.gen)
        disabled = RegisterAggregator(8, max_frames=3, layers=1, heads=2, enabled=False)
        tokens = aggregate_registers(features, disabled)
        torch.testing.assert_close(tokens.per_frame, features.mean(dim=2))
        torch.testing.assert_close(tokens.aggregated, tokens.per_frame)

        enabled = RegisterAggregator(8, max_frames=3, layers=1, heads=2)
        valid = torch.tensor([[True, True, True], [True, True, False]])
        out = aggregate_registers(features, enabled, valid)
        self.assertEqual(tuple(out.aggregated.shape), (2, 3, 8))
        self.assertTrue(torch.all(torch.isfinite(out.aggregated[:, :2])))

    def test_padding_does_not_leak(self):
        """Padded frames have no influence on valid frames"""
        enabled = RegisterAggregator(8, max_frames=3, layers=1, heads=2)
        tokens = torch.randn(1, 3, 8, generator=self.gen)
        other = tokens.clone()
        other[:, 2] = torch.randn(8, generator=self.gen)
        valid = torch.tensor([[True, True, False]])
        a = enabled(tokens, valid).aggregated[:, :2]
        b = enabled(other, valid).aggregated[:, :2]
        torch.testing.assert_close(a, b)

    def test_pose_fusion_without_grid_term(self):
        """A zero grid projection reduces fusion to relu(LayerNorm(S))"""
        fusion = PoseFusion(6)
        with torch.no_grad():
            fusion.rel_proj.weight.zero_()
            fusion.rel_proj.bias.zero_()
        slots = torch.randn(1, 2, 3, 6, generator=self.gen)
        pos = torch.rand(1, 2, 3, 2, generator=self.gen) - 0.5
        scale = torch.full((1, 2, 3, 2), 0.3)
        grid = torch.rand(9, 2, generator=self.gen) * 2 - 1
        expected = torch.relu(torch.nn.functional.layer_norm(slots, (6,), eps=1e-5))
        torch.testing.assert_close(fusion(slots, pos, scale, grid), expected)

    def test_pose_fusion_single_dimension(self):
        """With D=1 LayerNorm output is zero, so fusion returns relu(bias)"""
        fusion = PoseFusion(1)
        with torch.no_grad():
            fusion.norm.bias.fill_(0.7)
        slots = torch.randn(1, 1, 2, 1, generator=self.gen)
        out = fusion(slots, torch.zeros(1, 1, 2, 2), torch.ones(1, 1, 2, 2), torch.rand(4, 2, generator=self.gen))
        torch.testing.assert_close(out, torch.full((1, 1, 2, 1), 0.7))

    def test_pose_fusion_scalar_oracle(self):
        """D=1 and D=2 with two grid points against a float64 numpy pipeline"""
        grid = torch.tensor([[-0.5, 0.25], [0.75, -0.5]])
        pos = torch.tensor([[[[0.1, -0.2], [-0.3, 0.4]]]])
        scale = torch.tensor([[[[0.5, 0.25], [0.3, 0.6]]]])
        for dim in (1, 2):
            with self.subTest(dim=dim):
                fusion = PoseFusion(dim)
                with torch.no_grad():
                    fusion.rel_proj.weight.copy_(torch.randn(2, dim, generator=self.gen))
                    fusion.rel_proj.bias.copy_(torch.randn(dim, generator=self.gen))
                    fusion.norm.gain.copy_(torch.rand(dim, generator=self.gen) + 0.5)
                    fusion.norm.bias.copy_(torch.randn(dim, generator=self.gen))
                slots = torch.randn(1, 1, 2, dim, generator=self.gen)
                out = fusion(slots, pos, scale, grid)

                w = fusion.rel_proj.weight.detach().numpy()
                b = fusion.rel_proj.bias.detach().numpy()
                rel = (grid.numpy()[None] - pos[0, 0].numpy()[:, None]) / scale[0, 0].numpy()[:, None]
                broadcast = slots[0, 0].numpy()[:, None] + rel @ w + b
                pooled = broadcast.mean(axis=1)
                centered = pooled - pooled.mean(axis=-1, keepdims=True)
                normed = centered / np.sqrt(centered.var(axis=-1, keepdims=True) + 1e-5)
                expected = np.maximum(normed * fusion.norm.gain.detach().numpy() + fusion.norm.bias.detach().numpy(), 0)
                np.testing.assert_allclose(out[0, 0].detach().numpy(), expected, atol=1e-10, rtol=0)

    def test_pose_changes_fused_slots(self):
        fusion = PoseFusion(4)
        slots = torch.randn(1, 1, 1, 4, generator=self.gen).repeat(1, 1, 2, 1)
        pos = torch.tensor([[[[-0.4, 0.0], [0.4, 0.2]]]])
        out = fusion(slots, pos, torch.full((1, 1, 2, 2), 0.3), torch.rand(9, 2, generator=self.gen) * 2 - 1)
        self.assertFalse(torch.allclose(out[0, 0, 0], out[0, 0, 1]))

    def test_fuse_pose_register_is_slot_mean(self):
        fusion = PoseFusion(4)
        aggregator = SlotAggregator(4, max_frames=2, layers=1, heads=2)
        slots = torch.randn(1, 2, 3, 4, generator=self.gen)
        result = fuse_pose_v2(slots, torch.zeros(1, 2, 3, 2), torch.full((1, 2, 3, 2), 0.5),
                              torch.rand(16, 2, generator=self.gen), fusion, aggregator)
        torch.testing.assert_close(result.register, result.aggregated.mean(dim=2))

    def test_frame_window_edges(self):
        frames = np.arange(3)[:, None] * np.ones((3, 2))
        window, valid = frame_window(frames, 0, 5)
        np.testing.assert_array_equal(valid, [False, False, True, True, True])
        np.testing.assert_array_equal(window[:, 0], [0, 0, 0, 1, 2])
        window, valid = frame_window(frames, 2, 5)
        np.testing.assert_array_equal(valid, [True, True, True, False, False])
        np.testing.assert_array_equal(window[:, 0], [0, 1, 2, 2, 2])
        with self.assertRaises(ValueError):
            frame_window(frames, 3)

    def test_pad_clip(self):
        frames = np.arange(2)[:, None] * np.ones((2, 3))
        padded, valid = pad_clip(frames, 4)
        np.testing.assert_array_equal(padded[:, 0], [0, 1, 1, 1])
        np.testing.assert_array_equal(valid, [True, True, False, False])
        with self.assertRaises(ValueError):
            pad_clip(frames[:0], 3)

    def test_frame_bundle_selects_per_sample_frames(self):
        model = StaticClipModel(batch=2, length=3)
        bundle = model.conditioning.frame_bundle(torch.tensor([2, 0]))
        torch.testing.assert_close(bundle.slots[0], model.conditioning.slots[0, 2])
        torch.testing.assert_close(bundle.register[1, 0], model.conditioning.register[1, 0])

    def test_static_clip_oracle_gives_zero_loss(self):
        """On a static clip an exact noise predictor has zero loss for any chosen frame"""
        batch, length = 2, 3
        model = StaticClipModel(batch, length)
        frame = torch.rand(batch, 3, 8, 8, generator=self.gen)
        clip = frame[:, None].expand(batch, length, 3, 8, 8)
        x0 = frame * 2 - 1
        sched = model.schedule

        def oracle(denoiser, x_t, t, cond):
            a_bar = sched.at(sched.alpha_bar, t, x_t)
            return (x_t - a_bar.sqrt() * x0) / (1 - a_bar).sqrt(), None

        result = one_frame_forward(clip, model, torch.Generator().manual_seed(4), p_null=0.0, predictor=oracle)
        self.assertLess(result.step.loss.item(), 1e-20)
        self.assertEqual(tuple(result.attn_sa.shape), (batch, 16, 2))
        self.assertTrue(torch.all((result.frames >= 0) & (result.frames < length)))
        loss = one_frame_step(clip, model, torch.Generator().manual_seed(5), TemporalMode.V1, p_null=0.0,
                              predictor=oracle)
        self.assertLess(loss.item(), 1e-20)

    def test_all_frames_mode(self):
        model = StaticClipModel(batch=2, length=3)
        clip = torch.rand(2, 3, 3, 8, 8, generator=self.gen)
        calls = []

        def recorder(denoiser, x_t, t, cond):
            calls.append(cond.slots.shape[0])
            return torch.zeros_like(x_t), None

        result = one_frame_forward(clip, model, self.gen, p_null=0.0, frames_per_step=3, predictor=recorder)
        self.assertEqual(calls, [6])
        self.assertEqual(result.frames.tolist(), [0, 1, 2, 0, 1, 2])

    def test_one_frame_step_checks_mode(self):
        model = StaticClipModel(batch=1, length=2)
        clip = torch.rand(1, 2, 3, 8, 8, generator=self.gen)
        with self.assertRaises(ValueError):
            one_frame_step(clip, model, self.gen, TemporalMode.OFF)
        with self.assertRaises(ValueError):
            one_frame_step(clip, model, self.gen, TemporalMode.V2)

    def test_padded_frames_never_chosen(self):
        model = StaticClipModel(batch=2, length=3)
        clip = torch.rand(2, 3, 3, 8, 8, generator=self.gen)
        valid = torch.tensor([[True, False, False], [True, True, False]])

        def zeros(denoiser, x_t, t, cond):
            return torch.zeros_like(x_t), None

        seen = set()
        for seed in range(40):
            result = one_frame_forward(clip, model, torch.Generator().manual_seed(seed), p_null=0.0,
                                       valid=valid, predictor=zeros)
            self.assertEqual(result.frames[0].item(), 0)
            seen.add(result.frames[1].item())
        self.assertEqual(seen, {0, 1})

        result = one_frame_forward(clip, model, self.gen, p_null=0.0, frames_per_step=3, valid=valid,
                                   predictor=zeros)
        self.assertEqual(result.frames.tolist(), [0, 0, 1])
        with self.assertRaises(ValueError):
            one_frame_forward(clip, model, self.gen, valid=torch.zeros(2, 3, dtype=torch.bool), predictor=zeros)

    def test_slot_aggregator_ignores_padded_frames(self):
        aggregator = SlotAggregator(8, max_frames=3, layers=2, heads=2)
        slots = torch.randn(2, 3, 2, 8, generator=self.gen)
        valid = torch.tensor([[True, True, False], [True, True, True]])
        changed = slots.clone()
        changed[0, 2] = torch.randn(2, 8, generator=self.gen) * 5
        out = aggregator(slots, valid)
        out_changed = aggregator(changed, valid)
        torch.testing.assert_close(out_changed[0, :2], out[0, :2])
        torch.testing.assert_close(out_changed[1], out[1])
        self.assertFalse(torch.allclose(aggregator(changed)[0, :2], aggregator(slots)[0, :2]))


if __name__ == '__main__':
    unittest.main()
