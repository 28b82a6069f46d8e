"""
迷你去噪 U-Net 与潜空间自编码器

每个块：残差卷积单元 → 基础交叉注意力（上下文为注册令牌）→ 适配器交叉注意力（上下文为槽）
"""
import math
from typing import List, Sequence, Tuple

import torch
from torch import nn
import torch.nn.functional as F

from numerics import CrossAttention, LayerNorm, Linear, cross_attention

BLOCK_NAMES = ('down', 'mid', 'up')


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """正弦时间步嵌入 [B, dim]"""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.get_default_dtype()) / half)
    args = t.to(freqs.dtype)[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


def parse_adapter_blocks(text: str) -> Tuple[str, ...]:
    names = tuple(part for part in text.split('+') if part)
    for name in names:
        if name not in BLOCK_NAMES:
            raise ValueError(f"未知适配器块: {name}")
    return names


def _groups(channels: int) -> int:
    return math.gcd(8, channels)


class ResidualUnit(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, temb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(in_channels), in_channels)
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.temb_proj = Linear(temb_dim, out_channels)
        self.norm2 = nn.GroupNorm(_groups(out_channels), out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.skip = nn.Conv2d(in_channels, out_channels, 1) if in_channels != out_channels else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb_proj(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class AttentionLayer(nn.Module):
    """特征图上的残差交叉注意力"""

    def __init__(self, channels: int, context_dim: int, heads: int):
        super().__init__()
        self.norm = LayerNorm(channels)
        self.attn = CrossAttention(channels, context_dim, heads=heads)

    def forward(self, x, context):
        batch, channels, height, width = x.shape
        tokens = x.flatten(2).transpose(1, 2)                       # [B, M, C]
        out, _, attn_mean = cross_attention(self.norm(tokens), context, self.attn)
        tokens = tokens + out
        return tokens.transpose(1, 2).reshape(batch, channels, height, width), attn_mean


class DenoiserBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, temb_dim: int, register_dim: int,
                 slot_dim: int, heads: int, adapter: bool):
        super().__init__()
        self.res = ResidualUnit(in_channels, out_channels, temb_dim)
        self.base_attn = AttentionLayer(out_channels, register_dim, heads)
        self.adapter_attn = AttentionLayer(out_channels, slot_dim, heads) if adapter else None

    def forward(self, x, temb, register, slots):
        x = self.res(x, temb)
        x, _ = self.base_attn(x, register)
        attn = None
        if self.adapter_attn is not None:
            x, attn = self.adapter_attn(x, slots)
        return x, attn

    def base_parameters(self) -> List[nn.Parameter]:
        return list(self.res.parameters()) + list(self.base_attn.parameters())


class MiniDenoiser(nn.Module):
    """2 个下采样块、1 个中间块、2 个上采样块的 ε 预测网络"""

    def __init__(self, in_channels: int = 3, width: int = 32, slot_dim: int = 64, register_dim: int = 64,
                 heads: int = 4, adapter_blocks: Sequence[str] = ('down', 'up'), guidance_block: int = -1,
                 temb_dim: int = 128):
        super().__init__()
        self.in_channels = in_channels
        self.slot_dim = slot_dim
        self.register_dim = register_dim
        self.adapter_blocks = tuple(adapter_blocks)
        self.temb_dim = temb_dim
        c1, c2 = width, 2 * width
        self.time_mlp = nn.Sequential(Linear(temb_dim // 2, temb_dim), nn.SiLU(), Linear(temb_dim, temb_dim))
        self.stem = nn.Conv2d(in_channels, c1, 3, padding=1)

        def block(cin, cout, kind):
            return DenoiserBlock(cin, cout, temb_dim, register_dim, slot_dim, heads, kind in self.adapter_blocks)

        self.down = nn.ModuleList([block(c1, c1, 'down'), block(c1, c2, 'down')])
        self.downsample = nn.ModuleList([nn.Conv2d(c1, c1, 3, stride=2, padding=1),
                                         nn.Conv2d(c2, c2, 3, stride=2, padding=1)])
        self.mid = block(c2, c2, 'mid')
        self.up = nn.ModuleList([block(2 * c2, c2, 'up'), block(c2 + c1, c1, 'up')])
        self.out_norm = nn.GroupNorm(_groups(c1), c1)
        self.out_conv = nn.Conv2d(c1, in_channels, 3, padding=1)

        if not -len(self.up) <= guidance_block < len(self.up):
            raise ValueError(f"引导块索引越界: {guidance_block}")
        self.guidance_block = guidance_block % len(self.up)
        self.null_slot = nn.Parameter(torch.randn(1, slot_dim) * 0.02)
        self.null_register = nn.Parameter(torch.randn(1, register_dim) * 0.02)

    @property
    def has_guidance_adapter(self) -> bool:
        return 'up' in self.adapter_blocks

    def forward(self, x_t: torch.Tensor, t: torch.Tensor, slots: torch.Tensor, register: torch.Tensor):
        """返回 (eps_hat, A_DM [B, K, M])；引导块没有适配器时 A_DM 为 None"""
        if x_t.shape[-1] % 4 or x_t.shape[-2] % 4:
            raise ValueError(f"去噪网络输入尺寸必须能被4整除: {tuple(x_t.shape[-2:])}")
        temb = self.time_mlp(timestep_embedding(t, self.temb_dim // 2).to(x_t.dtype))
        h = self.stem(x_t)
        skips = []
        for block, down in zip(self.down, self.downsample):
            h, _ = block(h, temb, register, slots)
            skips.append(h)
            h = down(h)
        h, _ = self.mid(h, temb, register, slots)
        guidance_attn = None
        for index, block in enumerate(self.up):
            h = F.interpolate(h, scale_factor=2, mode='nearest')
            h = torch.cat([h, skips.pop()], dim=1)
            h, attn = block(h, temb, register, slots)
            if index == self.guidance_block and attn is not None:
                guidance_attn = attn.transpose(1, 2)
        eps_hat = self.out_conv(F.silu(self.out_norm(h)))
        return eps_hat, guidance_attn

    def guidance_shape(self, height: int, width: int) -> Tuple[int, int]:
        """引导块的特征图分辨率"""
        factor = 2 ** (len(self.up) - 1 - self.guidance_block)
        return height // factor, width // factor

    def base_parameters(self) -> List[nn.Parameter]:
        """两阶段训练中第二阶段冻结的基础网络参数"""
        params = list(self.time_mlp.parameters()) + list(self.stem.parameters())
        for block in list(self.down) + [self.mid] + list(self.up):
            params += block.base_parameters()
        for module in (self.downsample, self.out_norm, self.out_conv):
            params += list(module.parameters())
        params.append(self.null_register)
        return params

    def adapter_parameters(self) -> List[nn.Parameter]:
        params = [self.null_slot]
        for block in list(self.down) + [self.mid] + list(self.up):
            if block.adapter_attn is not None:
                params += list(block.adapter_attn.parameters())
        return params


class LatentAutoencoder(nn.Module):
    """2 倍下采样的卷积自编码器，像素 MSE 单独训练"""

    def __init__(self, in_channels: int = 3, latent_channels: int = 4, width: int = 32):
        super().__init__()
        self.latent_channels = latent_channels
        self.encoder = nn.Sequential(
            nn.Conv2d(in_channels, width, 3, padding=1), nn.SiLU(),
            nn.Conv2d(width, width, 4, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(width, latent_channels, 3, padding=1), nn.Tanh(),
        )
        self.decoder = nn.Sequential(
            nn.Conv2d(latent_channels, width, 3, padding=1), nn.SiLU(),
            nn.Upsample(scale_factor=2, mode='nearest'),
            nn.Conv2d(width, width, 3, padding=1), nn.SiLU(),
            nn.Conv2d(width, in_channels, 3, padding=1),
        )

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        return self.encoder(x)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return self.decoder(z)

    def loss(self, x: torch.Tensor) -> torch.Tensor:
        return F.mse_loss(self.decode(self.encode(x)), x)
