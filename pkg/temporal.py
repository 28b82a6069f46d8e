"""
视频扩展模块
槽与注册令牌的时间聚合 Transformer、槽增强拼接、显式位姿融合（V2）以及单帧训练目标
"""
from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np
import torch
from torch import nn

from config import TemporalMode
from numerics import LayerNorm, Linear
from diffusion_decoder import ConditioningBundle, DiffusionStep, diffusion_forward


@dataclass
class VideoSlots:
    per_frame: torch.Tensor    # [B, L, K, D]
    aggregated: torch.Tensor   # [B, L, K, D]
    augmented: torch.Tensor    # [B, L, K, 2D]


@dataclass
class GlobalTokens:
    per_frame: torch.Tensor    # [B, L, d]
    aggregated: torch.Tensor   # [B, L, d]


@dataclass
class PoseAwareSlots:
    fused: torch.Tensor        # [B, L, K, D]
    aggregated: torch.Tensor   # [B, L, K, D]
    register: torch.Tensor     # [B, L, D]


class TemporalTransformer(nn.Module):
    """预归一化 Transformer 编码器（默认 2 层 4 头）"""

    def __init__(self, dim: int, layers: int = 2, heads: int = 4):
        super().__init__()
        layer = nn.TransformerEncoderLayer(d_model=dim, nhead=heads, dim_feedforward=4 * dim, dropout=0.0,
                                           batch_first=True, norm_first=True)
        self.encoder = nn.TransformerEncoder(layer, num_layers=layers, enable_nested_tensor=False)

    def forward(self, tokens: torch.Tensor, padding_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        return self.encoder(tokens, src_key_padding_mask=padding_mask)


class SlotAggregator(nn.Module):
    def __init__(self, dim: int, max_frames: int = 5, layers: int = 2, heads: int = 4):
        super().__init__()
        self.max_frames = max_frames
        self.pos_emb = nn.Parameter(torch.randn(max_frames, dim) * 0.02)
        self.transformer = TemporalTransformer(dim, layers, heads)

    def forward(self, per_frame: torch.Tensor, valid: Optional[torch.Tensor] = None) -> torch.Tensor:
        batch, length, slots, dim = per_frame.shape
        if not 1 <= length <= self.max_frames:
            raise ValueError(f"帧数 {length} 超出范围 [1, {self.max_frames}]")
        tokens = (per_frame + self.pos_emb[:length, None, :]).reshape(batch, length * slots, dim)
        padding = None
        if valid is not None:
            # 补齐帧的全部槽令牌都不参与注意力
            padding = (~valid.to(torch.bool))[:, :, None].expand(batch, length, slots).reshape(batch, length * slots)
        return self.transformer(tokens, padding).reshape(batch, length, slots, dim)


def aggregate_slots(per_frame: torch.Tensor, params: SlotAggregator,
                    valid: Optional[torch.Tensor] = None) -> torch.Tensor:
    return params(per_frame, valid)


def augment(per_frame: torch.Tensor, aggregated: torch.Tensor) -> torch.Tensor:
    if per_frame.shape != aggregated.shape:
        raise ValueError(f"形状不一致: {tuple(per_frame.shape)} vs {tuple(aggregated.shape)}")
    return torch.cat([per_frame, aggregated], dim=-1)


class RegisterAggregator(nn.Module):
    """逐帧特征均值池化后经独立的时间 Transformer 聚合"""

    def __init__(self, dim: int, max_frames: int = 5, layers: int = 2, heads: int = 4, enabled: bool = True):
        super().__init__()
        self.enabled = enabled
        self.max_frames = max_frames
        self.pos_emb = nn.Parameter(torch.randn(max_frames, dim) * 0.02)
        self.transformer = TemporalTransformer(dim, layers, heads)

    def forward(self, tokens: torch.Tensor, valid: Optional[torch.Tensor] = None) -> GlobalTokens:
        # tokens: [B, L, d] 逐帧注册令牌
        length = tokens.shape[1]
        if not 1 <= length <= self.max_frames:
            raise ValueError(f"帧数 {length} 超出范围 [1, {self.max_frames}]")
        if not self.enabled:
            return GlobalTokens(per_frame=tokens, aggregated=tokens)
        padding = None if valid is None else ~valid.to(torch.bool)
        aggregated = self.transformer(tokens + self.pos_emb[:length], padding)
        return GlobalTokens(per_frame=tokens, aggregated=aggregated)


def aggregate_registers(features: torch.Tensor, params: RegisterAggregator,
                        valid: Optional[torch.Tensor] = None) -> GlobalTokens:
    """features: [B, L, N, d] 逐帧骨干特征"""
    return params(features.mean(dim=2), valid)


class PoseFusion(nn.Module):
    """把每个槽的相对坐标网格投影后加到广播槽上，空间平均后经 ReLU(LayerNorm(·))"""

    def __init__(self, dim: int):
        super().__init__()
        self.rel_proj = Linear(2, dim)
        self.norm = LayerNorm(dim)

    def forward(self, slots, pos, scale, abs_grid) -> torch.Tensor:
        # slots [B, L, K, D]，pos/scale [B, L, K, 2]，abs_grid [N, 2]
        rel = (abs_grid - pos[..., None, :]) / scale[..., None, :]      # [B, L, K, N, 2]
        broadcast = slots[..., None, :] + self.rel_proj(rel)             # [B, L, K, N, D]
        pooled = broadcast.mean(dim=-2)
        return torch.relu(self.norm(pooled))


def fuse_pose_v2(slots: torch.Tensor, pos: torch.Tensor, scale: torch.Tensor, abs_grid: torch.Tensor,
                 fusion: PoseFusion, aggregator: SlotAggregator,
                 valid: Optional[torch.Tensor] = None) -> PoseAwareSlots:
    fused = fusion(slots, pos, scale, abs_grid)
    aggregated = aggregator(fused, valid)
    return PoseAwareSlots(fused=fused, aggregated=aggregated, register=aggregated.mean(dim=2))


def frame_window(frames, center: int, length: int = 5) -> Tuple[np.ndarray, np.ndarray]:
    """以 center 为中心取 length 帧（前后各 length//2 帧），越界处重复边缘帧并标记为无效"""
    total = len(frames)
    if total < 1:
        raise ValueError("片段不能为空")
    if not 0 <= center < total:
        raise ValueError(f"中心帧越界: {center}")
    half = length // 2
    indices = np.arange(center - half, center - half + length)
    valid = (indices >= 0) & (indices < total)
    window = np.stack([frames[i] for i in np.clip(indices, 0, total - 1)])
    return window, valid


def pad_clip(frames, length: int) -> Tuple[np.ndarray, np.ndarray]:
    """短片段在末尾重复最后一帧补齐到 length，返回 (frames, valid)"""
    total = len(frames)
    if total < 1:
        raise ValueError("片段不能为空")
    indices = np.minimum(np.arange(max(length, total))[:length], total - 1)
    valid = np.arange(length) < total
    return np.stack([frames[i] for i in indices]), valid


@dataclass
class VideoConditioning:
    """视频编码结果：逐帧的增强槽、注册令牌与 ISA 注意力"""
    slots: torch.Tensor        # [B, L, K, 2D]
    register: torch.Tensor     # [B, L, D_r]
    attn: torch.Tensor         # [B, L, K, N]
    grid_shape: Tuple[int, int]

    def frame_bundle(self, frame: torch.Tensor) -> ConditioningBundle:
        """按每个样本选定的帧索引 frame [B] 取条件"""
        rows = torch.arange(self.slots.shape[0])
        return ConditioningBundle(slots=self.slots[rows, frame], register=self.register[rows, frame][:, None])


@dataclass
class FrameStep:
    step: DiffusionStep
    attn_sa: torch.Tensor      # [B', N, K] 目标帧的编码器注意力
    frames: torch.Tensor       # [B'] 被重建的帧索引


def _pick_frames(batch: int, length: int, rng: torch.Generator, frames_per_step: int,
                 valid: Optional[torch.Tensor]) -> Tuple[torch.Tensor, torch.Tensor]:
    """返回 (样本行, 帧索引)；只在有效帧中选取"""
    if valid is None:
        valid = torch.ones(batch, length, dtype=torch.bool)
    valid = valid.to(torch.bool)
    if not torch.all(valid.any(dim=1)):
        raise ValueError("每个片段至少需要一个有效帧")
    if frames_per_step >= length:
        rows, frame = valid.nonzero(as_tuple=True)
        return rows, frame
    choice = (torch.rand(batch, generator=rng) * valid.sum(dim=1)).long()
    frame = torch.stack([valid[b].nonzero().flatten()[min(int(choice[b]), int(valid[b].sum()) - 1)]
                         for b in range(batch)])
    return torch.arange(batch), frame


def one_frame_forward(clip: torch.Tensor, model, rng: torch.Generator, p_null: float = 0.1,
                      frames_per_step: int = 1, valid: Optional[torch.Tensor] = None,
                      predictor: Optional[Callable] = None) -> FrameStep:
    """
    单帧训练：编码整段片段，随机选一帧 t* 与扩散步 τ，以 S̃⁺_{t*} 与 r̃_{t*} 为条件预测噪声

    Args:
        clip: [B, L, 3, H, W]，取值 [0, 1]
        model: 提供 encode_clip / diffusion_target / denoiser / schedule 的视频模型
        frames_per_step: 1 为单帧训练；等于 L 时所有有效帧都参与损失
        valid: [B, L] 有效帧掩码，补齐的帧不会被选为 t*
    """
    batch, length = clip.shape[:2]
    enc = model.encode_clip(clip, rng, valid)
    rows, frame = _pick_frames(batch, length, rng, frames_per_step, valid)
    x0 = model.diffusion_target(clip[rows, frame])
    cond = ConditioningBundle(slots=enc.slots[rows, frame], register=enc.register[rows, frame][:, None])
    step = diffusion_forward(x0, model.denoiser, cond, model.schedule, rng, p_null, predictor)
    return FrameStep(step=step, attn_sa=enc.attn[rows, frame].transpose(1, 2), frames=frame)


def one_frame_step(clip: torch.Tensor, model, rng: torch.Generator, mode: TemporalMode, p_null: float = 0.1,
                   valid: Optional[torch.Tensor] = None, predictor: Optional[Callable] = None) -> torch.Tensor:
    """mode 须与模型的时间模式一致（V1 注册令牌或 V2 位姿融合）"""
    if mode is TemporalMode.OFF:
        raise ValueError("单帧训练需要 V1 或 V2 模式")
    if model.mode is not mode:
        raise ValueError(f"模型时间模式 {model.mode.value} 与请求的 {mode.value} 不符")
    return one_frame_forward(clip, model, rng, p_null, valid=valid, predictor=predictor).step.loss
