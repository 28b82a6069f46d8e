"""
槽编码器模块
卷积骨干网络、Slot Attention 与 Invariant Slot Attention（带位置/尺度的槽），以及编码器注意力掩码
"""
import math
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import torch
from torch import nn
import torch.nn.functional as F

from numerics import GruCell, LayerNorm, Linear, gru_step, softmax

PATCH_STRIDE = 4
EPSILON = 1e-8
SCALE_INIT = 0.5
POS_INIT_RANGE = 0.5


def coordinate_grid(height: int, width: int, dtype=None, device=None) -> torch.Tensor:
    """像素中心约定的归一化坐标网格，按行优先展开为 [h·w, 2]，列为 (x, y)"""
    ys = (2 * torch.arange(height, dtype=dtype, device=device) + 1) / height - 1
    xs = (2 * torch.arange(width, dtype=dtype, device=device) + 1) / width - 1
    gy, gx = torch.meshgrid(ys, xs, indexing='ij')
    return torch.stack([gx, gy], dim=-1).reshape(height * width, 2)


@dataclass
class BackboneFeatures:
    features: torch.Tensor       # [B, N, d]
    abs_grid: torch.Tensor       # [N, 2]
    grid_shape: Tuple[int, int]  # (h, w)


@dataclass
class SlotState:
    slots: torch.Tensor                   # [B, K, D_s]
    attn: Optional[torch.Tensor] = None   # [B, N, K]，每个特征在槽之间归一化


@dataclass
class IsaSlotState:
    slots: torch.Tensor                   # [B, K, D_s]
    pos: torch.Tensor                     # [B, K, 2]
    scale: torch.Tensor                   # [B, K, 2]
    attn: Optional[torch.Tensor] = None   # [B, K, N]

    def permute(self, order) -> 'IsaSlotState':
        attn = None if self.attn is None else self.attn[:, order]
        return IsaSlotState(self.slots[:, order], self.pos[:, order], self.scale[:, order], attn)


class Backbone(nn.Module):
    """
    三层卷积（步长 2, 2, 1），补丁步长 4

    num_patches 给定时为每个补丁学习一个位置向量，加到输出特征上
    """

    def __init__(self, in_channels: int = 3, feature_dim: int = 64, num_patches: Optional[int] = None):
        super().__init__()
        self.feature_dim = feature_dim
        self.convs = nn.ModuleList([
            nn.Conv2d(in_channels, feature_dim, 3, stride=2, padding=1, padding_mode='replicate'),
            nn.Conv2d(feature_dim, feature_dim, 3, stride=2, padding=1, padding_mode='replicate'),
            nn.Conv2d(feature_dim, feature_dim, 3, stride=1, padding=1, padding_mode='replicate'),
        ])
        self.patch_embedding = None
        if num_patches is not None:
            self.patch_embedding = nn.Parameter(torch.randn(num_patches, feature_dim) * 0.02)

    def forward(self, images: torch.Tensor) -> BackboneFeatures:
        # images: [B, 3, H, W]
        height, width = images.shape[-2:]
        if height % PATCH_STRIDE or width % PATCH_STRIDE:
            raise ValueError(f"图像尺寸 {height}x{width} 不能被补丁步长 {PATCH_STRIDE} 整除")
        x = images
        for index, conv in enumerate(self.convs):
            x = conv(x)
            if index < len(self.convs) - 1:
                x = F.relu(x)
        h, w = height // PATCH_STRIDE, width // PATCH_STRIDE
        features = x.flatten(2).transpose(1, 2)
        if self.patch_embedding is not None:
            if self.patch_embedding.shape[0] != h * w:
                raise ValueError(f"补丁数 {h * w} 与位置嵌入数 {self.patch_embedding.shape[0]} 不符")
            features = features + self.patch_embedding
        grid = coordinate_grid(h, w, dtype=features.dtype, device=features.device)
        return BackboneFeatures(features=features, abs_grid=grid, grid_shape=(h, w))


def backbone(image: torch.Tensor, params: Backbone) -> BackboneFeatures:
    return params(image)


class _SlotCore(nn.Module):
    """两种注意力变体共享的投影、GRU、残差MLP与初始化参数"""

    def __init__(self, feature_dim: int = 64, slot_dim: int = 64, key_dim: int = 64,
                 aggregation: str = 'mean', residual_mlp: bool = False, learned_init: bool = True):
        super().__init__()
        if aggregation not in ('mean', 'sum'):
            raise ValueError(f"未知聚合方式: {aggregation}")
        self.feature_dim = feature_dim
        self.slot_dim = slot_dim
        self.key_dim = key_dim
        self.aggregation = aggregation
        self.learned_init = learned_init
        self.norm_inputs = LayerNorm(feature_dim)
        self.norm_slots = LayerNorm(slot_dim)
        self.to_q = Linear(slot_dim, key_dim, bias=False)
        self.to_k = Linear(feature_dim, key_dim, bias=False)
        self.to_v = Linear(feature_dim, slot_dim, bias=False)
        self.gru = GruCell(slot_dim, slot_dim)
        self.mlp = None
        if residual_mlp:
            self.norm_mlp = LayerNorm(slot_dim)
            self.mlp = nn.Sequential(Linear(slot_dim, 2 * slot_dim), nn.ReLU(), Linear(2 * slot_dim, slot_dim))
        self.slot_mu = nn.Parameter(torch.zeros(slot_dim))
        self.slot_log_sigma = nn.Parameter(torch.zeros(slot_dim))
        nn.init.xavier_uniform_(self.slot_mu.view(1, -1))

    def init_slots(self, batch: int, num_slots: int, rng: torch.Generator) -> torch.Tensor:
        noise = torch.randn(batch, num_slots, self.slot_dim, generator=rng, dtype=self.slot_mu.dtype)
        if not self.learned_init:
            return noise
        return self.slot_mu + self.slot_log_sigma.exp() * noise

    def _aggregate(self, weights: torch.Tensor, values: torch.Tensor) -> torch.Tensor:
        # weights: [B, K, N]（未归一化的注意力），values: [B, N, D_s]
        if self.aggregation == 'mean':
            weights = weights / (weights.sum(dim=-1, keepdim=True) + EPSILON)
        return weights @ values

    def _update(self, slots: torch.Tensor, updates: torch.Tensor) -> torch.Tensor:
        slots = gru_step(self.gru, slots, updates)
        if self.mlp is not None:
            slots = slots + self.mlp(self.norm_mlp(slots))
        return slots


class SlotAttention(_SlotCore):

    def step(self, state: SlotState, feats: BackboneFeatures) -> SlotState:
        inputs = self.norm_inputs(feats.features)
        k = self.to_k(inputs)
        v = self.to_v(inputs)
        q = self.to_q(self.norm_slots(state.slots))
        logits = k @ q.transpose(1, 2) / math.sqrt(self.key_dim)   # [B, N, K]
        attn = softmax(logits, axis=-1)
        updates = self._aggregate(attn.transpose(1, 2), v)
        return SlotState(slots=self._update(state.slots, updates), attn=attn)

    def forward(self, feats: BackboneFeatures, num_slots: int, iters: int, rng: torch.Generator,
                init: Optional[torch.Tensor] = None) -> SlotState:
        if iters < 1:
            raise ValueError(f"迭代次数必须不小于1: {iters}")
        if init is None:
            init = self.init_slots(feats.features.shape[0], num_slots, rng)
        state = SlotState(slots=init)
        for _ in range(iters):
            state = self.step(state, feats)
        return state


def slot_attention_step(state: SlotState, feats: BackboneFeatures, params: SlotAttention) -> SlotState:
    if state.slots.shape[1] < 1:
        raise ValueError("槽数量必须不小于1")
    return params.step(state, feats)


def slot_attention(feats: BackboneFeatures, num_slots: int, iters: int, rng: torch.Generator,
                   params: SlotAttention) -> SlotState:
    return params(feats, num_slots, iters, rng)


def relative_grid(abs_grid: torch.Tensor, pos: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    """G_rel = (G_abs - pos) / scale，返回 [B, K, N, 2]"""
    return (abs_grid[None, None] - pos[:, :, None, :]) / scale[:, :, None, :]


def isa_pose_update(attn: torch.Tensor, abs_grid: torch.Tensor, scale_floor: float = 0.02):
    """按注意力加权的坐标均值与标准差更新位置和尺度"""
    weights = attn / (attn.sum(dim=-1, keepdim=True) + EPSILON)
    pos = weights @ abs_grid
    diff = abs_grid[None, None] - pos[:, :, None, :]
    var = torch.einsum('bkn,bknc->bkc', weights, diff ** 2)
    scale = torch.sqrt(var + 1e-12).clamp(min=scale_floor)
    return pos, scale


class InvariantSlotAttention(_SlotCore):
    """平移/尺度不变的 Slot Attention：键中加入相对坐标的投影"""

    def __init__(self, *args, scale_floor: float = 0.02, **kwargs):
        super().__init__(*args, **kwargs)
        self.scale_floor = scale_floor
        self.grid_proj = Linear(2, self.key_dim)
        self.key_proj = Linear(self.key_dim, self.key_dim)

    def init_state(self, batch: int, num_slots: int, rng: torch.Generator) -> IsaSlotState:
        slots = self.init_slots(batch, num_slots, rng)
        pos = (torch.rand(batch, num_slots, 2, generator=rng, dtype=slots.dtype) * 2 - 1) * POS_INIT_RANGE
        scale = torch.full((batch, num_slots, 2), SCALE_INIT, dtype=slots.dtype)
        return IsaSlotState(slots=slots, pos=pos, scale=scale)

    def step(self, state: IsaSlotState, feats: BackboneFeatures) -> IsaSlotState:
        inputs = self.norm_inputs(feats.features)
        k = self.to_k(inputs)                                  # [B, N, D_k]
        v = self.to_v(inputs)                                  # [B, N, D_s]
        rel = relative_grid(feats.abs_grid, state.pos, state.scale)
        keys = self.key_proj(k[:, None] + self.grid_proj(rel))  # [B, K, N, D_k]
        q = self.to_q(self.norm_slots(state.slots))            # [B, K, D_k]
        logits = torch.einsum('bkd,bknd->bkn', q, keys) / math.sqrt(self.key_dim)
        attn = softmax(logits, axis=1)
        pos, scale = isa_pose_update(attn, feats.abs_grid, self.scale_floor)
        updates = self._aggregate(attn, v)
        return IsaSlotState(slots=self._update(state.slots, updates), pos=pos, scale=scale, attn=attn)

    def forward(self, feats: BackboneFeatures, num_slots: int, iters: int, rng: torch.Generator,
                init: Optional[IsaSlotState] = None) -> IsaSlotState:
        if iters < 1:
            raise ValueError(f"迭代次数必须不小于1: {iters}")
        state = init if init is not None else self.init_state(feats.features.shape[0], num_slots, rng)
        for _ in range(iters):
            state = self.step(state, feats)
        return state


def isa_step(state: IsaSlotState, feats: BackboneFeatures, params: InvariantSlotAttention) -> IsaSlotState:
    if torch.any(state.scale < params.scale_floor):
        raise ValueError(f"尺度低于下限 {params.scale_floor}")
    return params.step(state, feats)


def isa(feats: BackboneFeatures, num_slots: int, iters: int, rng: torch.Generator,
        params: InvariantSlotAttention) -> IsaSlotState:
    return params(feats, num_slots, iters, rng)


def attention_kn(state: Union[SlotState, IsaSlotState]) -> torch.Tensor:
    """统一为 [B, K, N] 的注意力图"""
    if isinstance(state, IsaSlotState):
        return state.attn
    return state.attn.transpose(1, 2)


def encoder_masks(state: Union[SlotState, IsaSlotState], grid_shape: Tuple[int, int],
                  image_shape: Tuple[int, int]) -> torch.Tensor:
    """注意力重排为补丁网格并最近邻上采样到图像分辨率，返回 [B, K, H, W]"""
    attn = attention_kn(state)
    h, w = grid_shape
    height, width = image_shape
    masks = attn.reshape(attn.shape[0], attn.shape[1], h, w)
    return masks.repeat_interleave(height // h, dim=2).repeat_interleave(width // w, dim=3)


def masks_to_segmentation(masks: torch.Tensor) -> torch.Tensor:
    """逐像素在槽之间取 argmax，得到预测分割 [B, H, W]"""
    return masks.argmax(dim=1)
