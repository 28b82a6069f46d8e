"""
空间广播解码器
每个槽平铺到网格并附加坐标通道，经卷积得到 RGB 与 alpha，再按槽 softmax 合成
"""
from dataclasses import dataclass
from typing import Tuple, Union

import torch
from torch import nn

from numerics import Linear, softmax
from slot_encoder import IsaSlotState, coordinate_grid, relative_grid

NUM_CONV_LAYERS = 4


@dataclass
class PerSlotRender:
    rgb: torch.Tensor           # [B, K, H, W, 3]
    alpha_logits: torch.Tensor  # [B, K, H, W]

    def drop(self, index: int) -> 'PerSlotRender':
        keep = [k for k in range(self.rgb.shape[1]) if k != index]
        if len(keep) == self.rgb.shape[1]:
            raise ValueError(f"槽索引越界: {index}")
        return PerSlotRender(self.rgb[:, keep], self.alpha_logits[:, keep])

    def concat(self, other: 'PerSlotRender') -> 'PerSlotRender':
        return PerSlotRender(torch.cat([self.rgb, other.rgb], 1),
                             torch.cat([self.alpha_logits, other.alpha_logits], 1))


def spatial_broadcast(slots: torch.Tensor, height: int, width: int) -> torch.Tensor:
    """slots [..., D] → [..., H, W, D+2]，追加像素中心坐标 (x, y)"""
    if height < 1 or width < 1:
        raise ValueError(f"无效的广播尺寸 {height}x{width}")
    grid = coordinate_grid(height, width, dtype=slots.dtype, device=slots.device).reshape(height, width, 2)
    tiled = slots[..., None, None, :].expand(*slots.shape[:-1], height, width, slots.shape[-1])
    coords = grid.expand(*slots.shape[:-1], height, width, 2)
    return torch.cat([tiled, coords], dim=-1)


class BroadcastDecoder(nn.Module):
    """4 层 3×3 卷积，宽度 32，零填充；ISA 模式下叠加相对坐标投影 h(G_rel)"""

    def __init__(self, slot_dim: int = 64, width: int = 32, relative: bool = False):
        super().__init__()
        self.slot_dim = slot_dim
        self.relative = relative
        self.rel_proj = Linear(2, slot_dim) if relative else None
        layers = []
        channels = slot_dim + 2
        for index in range(NUM_CONV_LAYERS):
            out_channels = 4 if index == NUM_CONV_LAYERS - 1 else width
            layers.append(nn.Conv2d(channels, out_channels, 3, padding=1))
            if index < NUM_CONV_LAYERS - 1:
                layers.append(nn.ReLU())
            channels = out_channels
        self.net = nn.Sequential(*layers)

    def _broadcast(self, slots, height, width, pos=None, scale=None) -> torch.Tensor:
        if not self.relative:
            return spatial_broadcast(slots, height, width)
        grid = coordinate_grid(height, width, dtype=slots.dtype, device=slots.device)
        rel = relative_grid(grid, pos, scale)                          # [B, K, HW, 2]
        tiled = slots[:, :, None, :] + self.rel_proj(rel)              # [B, K, HW, D]
        tensor = torch.cat([tiled, rel], dim=-1)
        return tensor.reshape(*slots.shape[:2], height, width, self.slot_dim + 2)

    def forward(self, source: Union[torch.Tensor, IsaSlotState], height: int, width: int) -> PerSlotRender:
        if isinstance(source, IsaSlotState):
            if not self.relative:
                raise ValueError("ISA 状态需要相对坐标模式的解码器")
            tensor = self._broadcast(source.slots, height, width, source.pos, source.scale)
        else:
            if self.relative:
                raise ValueError("相对坐标模式的解码器需要 ISA 状态")
            tensor = self._broadcast(source, height, width)
        batch, slots = tensor.shape[:2]
        x = tensor.reshape(batch * slots, height, width, -1).permute(0, 3, 1, 2)
        out = self.net(x).permute(0, 2, 3, 1).reshape(batch, slots, height, width, 4)
        return PerSlotRender(rgb=out[..., :3], alpha_logits=out[..., 3])


def decode_slots(source: Union[torch.Tensor, IsaSlotState], height: int, width: int,
                 params: BroadcastDecoder) -> PerSlotRender:
    return params(source, height, width)


def alpha_composite(render: PerSlotRender, clamp: bool = True) -> Tuple[torch.Tensor, torch.Tensor]:
    """返回 (image [B, H, W, 3], masks [B, K, H, W])；训练损失使用未截断的合成"""
    if render.rgb.shape[1] < 1:
        raise ValueError("至少需要一个槽")
    masks = softmax(render.alpha_logits, axis=1)
    image = (masks[..., None] * render.rgb).sum(dim=1)
    if clamp:
        image = image.clamp(0.0, 1.0)
    return image, masks


def recon_loss(images: torch.Tensor, composite: torch.Tensor) -> torch.Tensor:
    """像素均方误差；images 与 composite 形状相同"""
    if images.shape != composite.shape:
        raise ValueError(f"形状不一致: {tuple(images.shape)} vs {tuple(composite.shape)}")
    return ((composite - images) ** 2).mean()
