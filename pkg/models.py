"""
模型装配模块
按配置组合骨干网络、槽编码器、广播/扩散解码器与视频时间模块
"""
import logging
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import torch
from torch import nn

from config import (Config, DecoderPath, EncoderVariant, RegisterMode, RegisterSource, TemporalMode)
from numerics import Linear
from slot_encoder import (PATCH_STRIDE, Backbone, BackboneFeatures, InvariantSlotAttention, IsaSlotState,
                          SlotAttention, SlotState, attention_kn, encoder_masks)
from broadcast_decoder import BroadcastDecoder, alpha_composite, recon_loss
from denoiser import LatentAutoencoder, MiniDenoiser, parse_adapter_blocks
from diffusion_decoder import (ConditioningBundle, GuidanceConfig, LossTerms, diffusion_forward, guidance_loss,
                               make_schedule, p_sample_loop, total_loss)
from temporal import (PoseFusion, RegisterAggregator, SlotAggregator, VideoConditioning, aggregate_registers,
                      augment, fuse_pose_v2, one_frame_forward)


@dataclass
class Encoding:
    """单帧编码结果；global_slot 模式下 slots/attn 已去掉注册槽"""
    state: Union[SlotState, IsaSlotState]
    features: BackboneFeatures
    slots: torch.Tensor        # [B, K, D_s]
    attn: torch.Tensor         # [B, K, N]
    register: torch.Tensor     # [B, 1, D_r]

    @property
    def attn_sa(self) -> torch.Tensor:
        return self.attn.transpose(1, 2)

    @property
    def grid_shape(self) -> Tuple[int, int]:
        return self.features.grid_shape


@dataclass
class VideoEncoding:
    slots: torch.Tensor                  # [B, L, K, D_s]
    attn: torch.Tensor                   # [B, L, K, N]
    features: torch.Tensor               # [B, L, N, d]
    abs_grid: torch.Tensor               # [N, 2]
    grid_shape: Tuple[int, int]
    pos: Optional[torch.Tensor] = None   # [B, L, K, 2]（仅 ISA）
    scale: Optional[torch.Tensor] = None

    def frame_state(self, t: int) -> Union[SlotState, IsaSlotState]:
        if self.pos is None:
            return SlotState(slots=self.slots[:, t], attn=self.attn[:, t].transpose(1, 2))
        return IsaSlotState(self.slots[:, t], self.pos[:, t], self.scale[:, t], self.attn[:, t])


def to_signed(images: torch.Tensor) -> torch.Tensor:
    """[0,1] → [-1,1]"""
    return images * 2.0 - 1.0


class SlotModel(nn.Module):
    """图像与视频模型共享的编码器与解码器"""

    def __init__(self, config: Config, context_dim: int, register_dim: int):
        super().__init__()
        self.config = config
        self.variant = config.enum('encoder.variant')
        self.path = config.enum('decoder.path')
        self.num_slots = config.num_slots
        self.iters = config['encoder.iters']
        self.height, self.width = config['data.height'], config['data.width']
        slot_dim = config['encoder.slot_dim']
        feature_dim = config['encoder.feature_dim']
        self.slot_dim = slot_dim

        core = dict(feature_dim=feature_dim, slot_dim=slot_dim, key_dim=config['encoder.key_dim'],
                    aggregation=config['encoder.aggregation'], residual_mlp=config['encoder.residual_mlp'],
                    learned_init=config['encoder.learned_init'])
        if self.variant is EncoderVariant.ISA:
            self.backbone = Backbone(3, feature_dim)
            self.encoder = InvariantSlotAttention(scale_floor=config['encoder.scale_floor'], **core)
        else:
            num_patches = (self.height // PATCH_STRIDE) * (self.width // PATCH_STRIDE)
            self.backbone = Backbone(3, feature_dim, num_patches)
            self.encoder = SlotAttention(**core)

        self.latent_mode = config['decoder.latent_mode']
        self.broadcast = None
        self.denoiser = None
        self.autoencoder = None
        if self.path is DecoderPath.BROADCAST:
            self.broadcast = BroadcastDecoder(slot_dim, config['decoder.width'],
                                              relative=self.variant is EncoderVariant.ISA)
        else:
            channels = 3
            if self.latent_mode:
                self.autoencoder = LatentAutoencoder(3, config['decoder.latent_channels'], config['decoder.width'])
                channels = config['decoder.latent_channels']
            self.denoiser = MiniDenoiser(
                in_channels=channels, width=config['decoder.width'], slot_dim=context_dim,
                register_dim=register_dim, heads=config['decoder.heads'],
                adapter_blocks=parse_adapter_blocks(config['decoder.adapter_blocks']),
                guidance_block=config['decoder.guidance_block'],
            )
        self.schedule = None
        if self.denoiser is not None:
            self.schedule = make_schedule(config['decoder.timesteps'], config['decoder.beta_start'],
                                          config['decoder.beta_end'])
        self.p_null = config['decoder.p_null']
        self.cfg_scale = config['decoder.cfg_scale']
        self.guidance = GuidanceConfig(mode=config.enum('guidance.mode'), weight=config['guidance.lambda'],
                                       warmup_iters=config.warmup_iters, target=config.enum('decoder.bce_target'))

    # 编码
    def features(self, images: torch.Tensor) -> BackboneFeatures:
        return self.backbone(to_signed(images))

    def run_encoder(self, feats: BackboneFeatures, num_slots: int, rng: torch.Generator, init=None):
        return self.encoder(feats, num_slots, self.iters, rng, init)

    # 扩散
    def require_diffusion(self):
        if self.denoiser is None:
            raise RuntimeError("当前配置使用广播解码器，没有扩散解码器")

    def diffusion_target(self, images: torch.Tensor) -> torch.Tensor:
        x0 = to_signed(images)
        if self.latent_mode:
            with torch.no_grad():
                return self.autoencoder.encode(x0)
        return x0

    def latent_encode(self, images: torch.Tensor) -> torch.Tensor:
        if not self.latent_mode:
            raise RuntimeError("潜空间模式未启用")
        return self.autoencoder.encode(to_signed(images))

    def latent_decode(self, z: torch.Tensor) -> torch.Tensor:
        if not self.latent_mode:
            raise RuntimeError("潜空间模式未启用")
        return self.autoencoder.decode(z)

    def sample_shape(self, count: int) -> Tuple[int, int, int, int]:
        if self.latent_mode:
            return count, self.denoiser.in_channels, self.height // 2, self.width // 2
        return count, 3, self.height, self.width

    def dm_shape(self) -> Tuple[int, int]:
        _, _, h, w = self.sample_shape(1)
        return self.denoiser.guidance_shape(h, w)

    def sample(self, cond: ConditioningBundle, rng: torch.Generator, count: int = 1,
               scale: Optional[float] = None) -> torch.Tensor:
        """返回 [count, 3, H, W]，取值 [0,1]"""
        self.require_diffusion()
        decoder = self.autoencoder.decode if self.latent_mode else None
        return p_sample_loop(self.denoiser, cond, self.schedule, rng,
                             self.cfg_scale if scale is None else scale, self.sample_shape(count), decoder)

    def guidance_term(self, attn_sa: torch.Tensor, attn_dm: Optional[torch.Tensor], grid_shape,
                      keep: torch.Tensor) -> Optional[torch.Tensor]:
        if attn_dm is None:
            return None
        return guidance_loss(attn_sa, attn_dm, self.guidance, grid_shape, self.dm_shape(), keep)

    def training_terms(self, batch: torch.Tensor, rng: torch.Generator, iteration: int,
                       valid: Optional[torch.Tensor] = None) -> LossTerms:
        """valid: 视频批次的 [B, L] 有效帧掩码，图像批次忽略"""
        if self.path is DecoderPath.BROADCAST:
            loss = self.recon_loss(batch, rng, valid)
            return LossTerms(total=loss, diffusion=loss, guidance=loss.new_zeros(()))
        return total_loss(batch, self, self.guidance, iteration, rng, valid)

    def ae_loss(self, images: torch.Tensor) -> torch.Tensor:
        if not self.latent_mode:
            raise RuntimeError("潜空间模式未启用")
        return self.autoencoder.loss(to_signed(images))

    def base_parameters(self):
        """基础去噪网络参数（含空注册令牌）"""
        self.require_diffusion()
        return self.denoiser.base_parameters()

    def slot_parameters(self):
        """槽侧参数：骨干网络与槽编码器"""
        return list(self.backbone.parameters()) + list(self.encoder.parameters())

    def register_parameters(self):
        """注册令牌路径的参数"""
        return []

    def phase_frozen(self, phase: int):
        """两阶段训练中冻结的参数：第一阶段冻结槽侧与适配器，第二阶段冻结基础网络与注册路径"""
        self.require_diffusion()
        if phase == 1:
            return self.slot_parameters() + list(self.denoiser.adapter_parameters())
        if phase == 2:
            return list(self.base_parameters()) + self.register_parameters()
        raise ValueError(f"未知训练阶段: {phase}")

    def trainable_parameters(self):
        frozen = {id(p) for p in self.autoencoder.parameters()} if self.autoencoder is not None else set()
        return [p for p in self.parameters() if id(p) not in frozen]


class ImageModel(SlotModel):

    def __init__(self, config: Config):
        slot_dim = config['encoder.slot_dim']
        super().__init__(config, context_dim=slot_dim, register_dim=slot_dim)
        self.register_mode = config.enum('encoder.register_mode')
        self.register_proj = None
        self.register_token = None
        if self.register_mode is RegisterMode.FEATURE_MEAN:
            self.register_proj = Linear(config['encoder.feature_dim'], slot_dim)
        elif self.register_mode is RegisterMode.NONE:
            self.register_token = nn.Parameter(torch.randn(1, 1, slot_dim) * 0.02)

    @property
    def recompute_register(self) -> bool:
        return self.register_mode is RegisterMode.SLOT_MEAN

    def register_parameters(self):
        if self.register_proj is not None:
            return list(self.register_proj.parameters())
        return [self.register_token] if self.register_token is not None else []

    def encode(self, images: torch.Tensor, rng: torch.Generator) -> Encoding:
        feats = self.features(images)
        extra = 1 if self.register_mode is RegisterMode.GLOBAL_SLOT else 0
        state = self.run_encoder(feats, self.num_slots + extra, rng)
        slots = state.slots
        attn = attention_kn(state)
        if extra:
            register = slots[:, -1:]
            slots = slots[:, :-1]
            attn = attn[:, :-1]
            attn = attn / (attn.sum(dim=1, keepdim=True) + 1e-8)
        elif self.register_mode is RegisterMode.SLOT_MEAN:
            register = slots.mean(dim=1, keepdim=True)
        elif self.register_mode is RegisterMode.FEATURE_MEAN:
            register = self.register_proj(feats.features.mean(dim=1, keepdim=True))
        else:
            register = self.register_token.expand(slots.shape[0], 1, -1)
        return Encoding(state=state, features=feats, slots=slots, attn=attn, register=register)

    def condition(self, enc: Encoding) -> ConditioningBundle:
        return ConditioningBundle(slots=enc.slots, register=enc.register)

    def masks(self, enc: Encoding) -> torch.Tensor:
        """编码器掩码 [B, K, H, W]；global_slot 模式下不含注册槽"""
        state = SlotState(slots=enc.slots, attn=enc.attn_sa)
        return encoder_masks(state, enc.grid_shape, (self.height, self.width))

    def render(self, enc: Encoding):
        """广播路径：每个槽的渲染结果"""
        if self.broadcast is None:
            raise RuntimeError("当前配置使用扩散解码器，没有广播解码器")
        source = enc.state if self.variant is EncoderVariant.ISA else enc.slots
        return self.broadcast(source, self.height, self.width)

    def recon_loss(self, images: torch.Tensor, rng: torch.Generator,
                   valid: Optional[torch.Tensor] = None) -> torch.Tensor:
        composite, _ = alpha_composite(self.render(self.encode(images, rng)), clamp=False)
        return recon_loss(images.permute(0, 2, 3, 1), composite)

    def reconstruct(self, images: torch.Tensor, rng: torch.Generator) -> torch.Tensor:
        """广播路径的截断合成图像 [B, 3, H, W]"""
        composite, _ = alpha_composite(self.render(self.encode(images, rng)))
        return composite.permute(0, 3, 1, 2)

    def diffusion_terms(self, images: torch.Tensor, rng: torch.Generator, with_guidance: bool,
                        valid: Optional[torch.Tensor] = None):
        self.require_diffusion()
        enc = self.encode(images, rng)
        step = diffusion_forward(self.diffusion_target(images), self.denoiser, self.condition(enc),
                                 self.schedule, rng, self.p_null)
        guidance = self.guidance_term(enc.attn_sa, step.attn, enc.grid_shape, step.keep) if with_guidance else None
        return step.loss, guidance


class VideoModel(SlotModel):
    """逐帧编码（槽从上一帧传播初始化）后经时间聚合；V1 使用注册令牌，V2 融合显式位姿"""

    def __init__(self, config: Config):
        mode = config.enum('temporal.mode')
        if mode is TemporalMode.OFF:
            raise ValueError("视频模型需要 temporal.mode 为 v1 或 v2")
        if mode is TemporalMode.V2 and config.enum('encoder.variant') is not EncoderVariant.ISA:
            raise ValueError("V2 位姿融合需要 ISA 编码器")
        slot_dim = config['encoder.slot_dim']
        source = config.enum('temporal.register_source')
        register_dim = config['encoder.feature_dim'] if (
            mode is TemporalMode.V1 and source is RegisterSource.FEATURES) else slot_dim
        super().__init__(config, context_dim=2 * slot_dim, register_dim=register_dim)
        self.mode = mode
        self.register_source = source
        self.length = config['data.clip_length']
        self.frames_per_step = config['temporal.frames_per_step']
        layers, heads = config['temporal.layers'], config['temporal.heads']
        self.slot_aggregator = SlotAggregator(slot_dim, self.length, layers, heads)
        self.register_aggregator = None
        self.fusion = None
        if self.mode is TemporalMode.V1:
            self.register_aggregator = RegisterAggregator(register_dim, self.length, layers, heads,
                                                          enabled=config['temporal.register_aggregator'])
        else:
            self.fusion = PoseFusion(slot_dim)
        logging.info(f"视频模型: 模式 {self.mode.value}，片段长度 {self.length}，注册令牌维度 {register_dim}")

    def slot_parameters(self):
        params = super().slot_parameters() + list(self.slot_aggregator.parameters())
        return params + (list(self.fusion.parameters()) if self.fusion is not None else [])

    def register_parameters(self):
        return list(self.register_aggregator.parameters()) if self.register_aggregator is not None else []

    def encode_frames(self, clip: torch.Tensor, rng: torch.Generator) -> VideoEncoding:
        """clip: [B, L, 3, H, W]，取值 [0,1]"""
        batch, length = clip.shape[:2]
        feats = self.features(clip.flatten(0, 1))
        per_frame = feats.features.reshape(batch, length, *feats.features.shape[1:])
        slots, attn, pos, scale = [], [], [], []
        state = None
        for t in range(length):
            frame_feats = BackboneFeatures(per_frame[:, t], feats.abs_grid, feats.grid_shape)
            init = None
            if state is not None:
                init = IsaSlotState(state.slots, state.pos, state.scale) if isinstance(state, IsaSlotState) \
                    else state.slots
            state = self.run_encoder(frame_feats, self.num_slots, rng, init)
            slots.append(state.slots)
            attn.append(attention_kn(state))
            if isinstance(state, IsaSlotState):
                pos.append(state.pos)
                scale.append(state.scale)
        return VideoEncoding(
            slots=torch.stack(slots, 1), attn=torch.stack(attn, 1), features=per_frame,
            abs_grid=feats.abs_grid, grid_shape=feats.grid_shape,
            pos=torch.stack(pos, 1) if pos else None, scale=torch.stack(scale, 1) if scale else None,
        )

    def condition_frames(self, enc: VideoEncoding, valid: Optional[torch.Tensor] = None) -> VideoConditioning:
        if self.mode is TemporalMode.V2:
            fused = fuse_pose_v2(enc.slots, enc.pos, enc.scale, enc.abs_grid, self.fusion, self.slot_aggregator,
                                 valid)
            return VideoConditioning(slots=augment(fused.fused, fused.aggregated), register=fused.register,
                                     attn=enc.attn, grid_shape=enc.grid_shape)
        aggregated = self.slot_aggregator(enc.slots, valid)
        if self.register_source is RegisterSource.FEATURES:
            tokens = aggregate_registers(enc.features, self.register_aggregator, valid)
        else:
            tokens = self.register_aggregator(enc.slots.mean(dim=2), valid)
        return VideoConditioning(slots=augment(enc.slots, aggregated), register=tokens.aggregated,
                                 attn=enc.attn, grid_shape=enc.grid_shape)

    def encode_clip(self, clip: torch.Tensor, rng: torch.Generator,
                    valid: Optional[torch.Tensor] = None) -> VideoConditioning:
        return self.condition_frames(self.encode_frames(clip, rng), valid)

    def masks(self, enc: VideoEncoding) -> torch.Tensor:
        """逐帧编码器掩码 [B, L, K, H, W]"""
        shape = (self.height, self.width)
        return torch.stack([encoder_masks(enc.frame_state(t), enc.grid_shape, shape)
                            for t in range(enc.slots.shape[1])], dim=1)

    def render_frames(self, enc: VideoEncoding):
        if self.broadcast is None:
            raise RuntimeError("当前配置使用扩散解码器，没有广播解码器")
        renders = []
        for t in range(enc.slots.shape[1]):
            state = enc.frame_state(t)
            source = state if isinstance(state, IsaSlotState) else state.slots
            renders.append(self.broadcast(source, self.height, self.width))
        return renders

    def recon_loss(self, clip: torch.Tensor, rng: torch.Generator,
                   valid: Optional[torch.Tensor] = None) -> torch.Tensor:
        """广播路径：有效帧重建误差的平均"""
        renders = self.render_frames(self.encode_frames(clip, rng))
        if valid is None:
            valid = torch.ones(clip.shape[:2], dtype=torch.bool)
        valid = valid.to(torch.bool)
        losses = [recon_loss(clip[valid[:, t], t].permute(0, 2, 3, 1),
                             alpha_composite(render, clamp=False)[0][valid[:, t]])
                  for t, render in enumerate(renders) if valid[:, t].any()]
        return torch.stack(losses).mean()

    def reconstruct(self, clip: torch.Tensor, rng: torch.Generator) -> torch.Tensor:
        """[B, L, 3, H, W]"""
        renders = self.render_frames(self.encode_frames(clip, rng))
        return torch.stack([alpha_composite(r)[0].permute(0, 3, 1, 2) for r in renders], dim=1)

    def diffusion_terms(self, clip: torch.Tensor, rng: torch.Generator, with_guidance: bool,
                        valid: Optional[torch.Tensor] = None):
        self.require_diffusion()
        result = one_frame_forward(clip, self, rng, self.p_null, self.frames_per_step, valid)
        guidance = None
        if with_guidance:
            guidance = self.guidance_term(result.attn_sa, result.step.attn, self.grid_shape(), result.step.keep)
        return result.step.loss, guidance

    def grid_shape(self) -> Tuple[int, int]:
        return self.height // PATCH_STRIDE, self.width // PATCH_STRIDE


def build_model(config: Config) -> SlotModel:
    if config.enum('temporal.mode') is TemporalMode.OFF:
        model = ImageModel(config)
    else:
        model = VideoModel(config)
    count = sum(p.numel() for p in model.parameters())
    logging.info(f"模型构建完成: {type(model).__name__}，解码路径 {model.path.value}，参数量 {count}")
    return model
