"""
梯度校验套件
在 float64 极小配置上对每条可训练路径做中心差分校验
"""
import logging
from typing import Callable, Dict, List, Tuple

import torch

from config import Config, TemporalMode
from numerics import CrossAttention, cross_attention, grad_check, set_precision
from slot_encoder import Backbone, InvariantSlotAttention, SlotAttention
from broadcast_decoder import BroadcastDecoder, alpha_composite, recon_loss
from denoiser import MiniDenoiser
from models import build_model
from temporal import PoseFusion, RegisterAggregator, SlotAggregator, fuse_pose_v2, one_frame_step

GRAD_TOLERANCE = 1e-4
# 含多层卷积与注意力的长路径
DEEP_TOLERANCE = 1e-3
MAX_COORDS = 6


def _generator(seed: int = 0) -> torch.Generator:
    return torch.Generator().manual_seed(seed)


def _slot_attention_case():
    backbone = Backbone(3, 8)
    encoder = SlotAttention(feature_dim=8, slot_dim=8, key_dim=8)
    images = torch.rand(1, 3, 8, 8, generator=_generator(1))

    def loss():
        state = encoder(backbone(images), 3, 2, _generator(2))
        return (state.slots ** 2).sum() + (state.attn ** 2).sum()
    return loss, list(encoder.parameters()) + list(backbone.parameters())


def _isa_case():
    backbone = Backbone(3, 8)
    encoder = InvariantSlotAttention(feature_dim=8, slot_dim=8, key_dim=8)
    images = torch.rand(1, 3, 8, 8, generator=_generator(3))

    def loss():
        state = encoder(backbone(images), 3, 2, _generator(4))
        return (state.slots ** 2).sum() + state.pos.sum() + state.scale.sum()
    return loss, list(encoder.parameters()) + list(backbone.parameters())


def _end_to_end_case():
    backbone = Backbone(3, 8, num_patches=4)
    encoder = SlotAttention(feature_dim=8, slot_dim=8, key_dim=8)
    decoder = BroadcastDecoder(slot_dim=8, width=4)
    images = torch.rand(1, 3, 8, 8, generator=_generator(17))

    def loss():
        state = encoder(backbone(images * 2 - 1), 2, 2, _generator(18))
        composite, _ = alpha_composite(decoder(state.slots, 8, 8), clamp=False)
        return recon_loss(images.permute(0, 2, 3, 1), composite)
    params = list(backbone.parameters()) + list(encoder.parameters()) + list(decoder.parameters())
    return loss, params


def _broadcast_case():
    decoder = BroadcastDecoder(slot_dim=4, width=4)
    slots = torch.randn(1, 2, 4, generator=_generator(5))
    target = torch.rand(1, 4, 4, 3, generator=_generator(6))

    def loss():
        image, _ = alpha_composite(decoder(slots, 4, 4), clamp=False)
        return ((image - target) ** 2).mean()
    return loss, list(decoder.parameters())


def _cross_attention_case():
    attn = CrossAttention(4, 3, heads=2)
    x = torch.randn(1, 5, 4, generator=_generator(7))
    context = torch.randn(1, 3, 3, generator=_generator(8))

    def loss():
        out, _, mean = cross_attention(x, context, attn)
        return (out ** 2).sum() + (mean ** 2).sum()
    return loss, list(attn.parameters())


def _denoiser_case():
    model = MiniDenoiser(in_channels=3, width=8, slot_dim=4, register_dim=4, heads=2, temb_dim=16)
    x = torch.randn(1, 3, 8, 8, generator=_generator(9))
    t = torch.tensor([3])
    slots = torch.randn(1, 2, 4, generator=_generator(10))
    register = torch.randn(1, 1, 4, generator=_generator(11))

    def loss():
        eps, attn = model(x, t, slots, register)
        return (eps ** 2).mean() + (attn ** 2).sum()
    return loss, list(model.parameters())


def _temporal_case():
    aggregator = SlotAggregator(4, 3, layers=1, heads=2)
    registers = RegisterAggregator(4, 3, layers=1, heads=2)
    slots = torch.randn(1, 3, 2, 4, generator=_generator(12))
    feats = torch.randn(1, 3, 5, 4, generator=_generator(13))

    def loss():
        return (aggregator(slots) ** 2).sum() + (registers(feats.mean(dim=2)).aggregated ** 2).sum()
    return loss, list(aggregator.parameters()) + list(registers.parameters())


def _pose_fusion_case():
    fusion = PoseFusion(4)
    aggregator = SlotAggregator(4, 2, layers=1, heads=2)
    slots = torch.randn(1, 2, 2, 4, generator=_generator(14))
    pos = torch.rand(1, 2, 2, 2, generator=_generator(15)) - 0.5
    scale = torch.full((1, 2, 2, 2), 0.4)
    grid = torch.rand(6, 2, generator=_generator(16)) * 2 - 1

    def loss():
        fused = fuse_pose_v2(slots, pos, scale, grid, fusion, aggregator)
        return (fused.aggregated ** 2).sum() + fused.register.sum()
    return loss, list(fusion.parameters()) + list(aggregator.parameters())


VIDEO_CASE_CONFIG = {
    'data.height': 16, 'data.width': 16, 'data.min_objects': 1, 'data.max_objects': 1, 'data.clip_length': 2,
    'encoder.variant': 'isa', 'encoder.slot_dim': 4, 'encoder.feature_dim': 4, 'encoder.key_dim': 4,
    'encoder.iters': 1, 'decoder.path': 'diffusion', 'decoder.width': 8, 'decoder.heads': 2,
    'decoder.timesteps': 4, 'decoder.beta_end': 0.5, 'decoder.p_null': 0.0,
    'temporal.mode': 'v1', 'temporal.heads': 2, 'temporal.layers': 1,
}


def _video_diffusion_case():
    model = build_model(Config(dict(VIDEO_CASE_CONFIG)))
    clip = torch.rand(1, 2, 3, 16, 16, generator=_generator(19))

    def loss():
        return one_frame_step(clip, model, _generator(20), TemporalMode.V1, p_null=0.0)
    params = (list(model.encoder.parameters()) + list(model.slot_aggregator.parameters())
              + list(model.register_aggregator.parameters()) + list(model.denoiser.adapter_parameters()))
    return loss, params


CASES: List[Tuple[str, Callable, float]] = [
    ('slot_attention', _slot_attention_case, GRAD_TOLERANCE),
    ('isa', _isa_case, GRAD_TOLERANCE),
    ('broadcast_decoder', _broadcast_case, GRAD_TOLERANCE),
    ('end_to_end', _end_to_end_case, DEEP_TOLERANCE),
    ('cross_attention', _cross_attention_case, GRAD_TOLERANCE),
    ('denoiser', _denoiser_case, DEEP_TOLERANCE),
    ('temporal', _temporal_case, GRAD_TOLERANCE),
    ('pose_fusion', _pose_fusion_case, GRAD_TOLERANCE),
    ('video_diffusion', _video_diffusion_case, DEEP_TOLERANCE),
]
TOLERANCES: Dict[str, float] = {name: tolerance for name, _, tolerance in CASES}


def gradient_suite(max_coords: int = MAX_COORDS) -> Dict[str, float]:
    """返回每条路径的最大相对误差；调用后默认精度保持为 float64"""
    set_precision('float64')
    results = {}
    for name, build, _ in CASES:
        torch.manual_seed(0)
        loss, params = build()
        results[name] = grad_check(loss, params, eps=1e-6, max_coords=max_coords)
        logging.info(f"梯度校验 {name}: 最大相对误差 {results[name]:.3e}")
    return results
