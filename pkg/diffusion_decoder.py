"""
扩散解码器模块
DDPM 噪声调度、前向加噪、后验均值、条件丢弃训练损失、注意力引导损失、
无分类器引导采样与槽空间编辑
"""
import logging
from dataclasses import dataclass, replace
from enum import Enum
from typing import Callable, Optional, Sequence, Tuple, Union

import torch
import torch.nn.functional as F

from config import BceTarget, GuidanceMode

BCE_CLAMP = 1e-7


@dataclass
class NoiseSchedule:
    T: int
    beta: torch.Tensor            # float64
    alpha: torch.Tensor
    alpha_bar: torch.Tensor
    alpha_bar_prev: torch.Tensor
    posterior_var: torch.Tensor

    def at(self, values: torch.Tensor, t: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
        """取第 t 步常数并广播到 like 的形状"""
        out = values[t].to(like.dtype)
        return out.reshape(out.shape + (1,) * (like.dim() - out.dim()))


def make_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise ValueError(f"步数必须不小于1: {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError(f"无效的 β 范围: [{beta_start}, {beta_end}]")
    beta = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
    alpha = 1.0 - beta
    alpha_bar = torch.cumprod(alpha, dim=0)
    alpha_bar_prev = torch.cat([torch.ones(1, dtype=torch.float64), alpha_bar[:-1]])
    posterior_var = (1.0 - alpha_bar_prev) / (1.0 - alpha_bar) * beta
    if alpha_bar[-1] >= 0.05:
        logging.warning(f"噪声调度末端 ᾱ={alpha_bar[-1].item():.4f} 不小于 0.05，终点并非近似纯噪声")
    return NoiseSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar,
                         alpha_bar_prev=alpha_bar_prev, posterior_var=posterior_var)


def _as_steps(t: Union[int, torch.Tensor], batch: int, sched: NoiseSchedule) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=torch.long)
    if t.dim() == 0:
        t = t.expand(batch)
    if torch.any(t < 0) or torch.any(t >= sched.T):
        raise ValueError(f"时间步超出范围 [0, {sched.T})")
    return t


def q_sample(x0: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    t = _as_steps(t, x0.shape[0], sched)
    a_bar = sched.at(sched.alpha_bar, t, x0)
    return a_bar.sqrt() * x0 + (1 - a_bar).sqrt() * eps


def posterior_mean(x_t: torch.Tensor, t, eps_hat: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    t = _as_steps(t, x_t.shape[0], sched)
    beta = sched.at(sched.beta, t, x_t)
    a_bar = sched.at(sched.alpha_bar, t, x_t)
    alpha = sched.at(sched.alpha, t, x_t)
    return (x_t - beta / (1 - a_bar).sqrt() * eps_hat) / alpha.sqrt()


def posterior_mean_tilde(x_t: torch.Tensor, x0: torch.Tensor, t, sched: NoiseSchedule) -> torch.Tensor:
    """真实后验 q(x_{t-1} | x_t, x0) 的均值"""
    t = _as_steps(t, x_t.shape[0], sched)
    beta = sched.at(sched.beta, t, x_t)
    a_bar = sched.at(sched.alpha_bar, t, x_t)
    a_bar_prev = sched.at(sched.alpha_bar_prev, t, x_t)
    alpha = sched.at(sched.alpha, t, x_t)
    return (a_bar_prev.sqrt() * beta / (1 - a_bar)) * x0 + (alpha.sqrt() * (1 - a_bar_prev) / (1 - a_bar)) * x_t


@dataclass
class ConditioningBundle:
    slots: Optional[torch.Tensor] = None      # [B, K, D_c]
    register: Optional[torch.Tensor] = None   # [B, 1, D_r]
    null: bool = False
    null_mask: Optional[torch.Tensor] = None  # [B] 条件丢弃（训练）
    drop_register: bool = False               # 推理时仅丢弃注册令牌

    def __post_init__(self):
        if not self.null and (self.slots is None or self.register is None):
            raise ValueError("非空条件必须同时提供槽与注册令牌")

    @property
    def num_slots(self) -> int:
        return 1 if self.slots is None else self.slots.shape[1]

    def as_null(self) -> 'ConditioningBundle':
        return replace(self, null=True, null_mask=None)

    def detach(self) -> 'ConditioningBundle':
        return replace(self, slots=None if self.slots is None else self.slots.detach(),
                       register=None if self.register is None else self.register.detach())

    def select(self, index) -> 'ConditioningBundle':
        """按批次索引取子集"""
        return replace(self, slots=None if self.slots is None else self.slots[index],
                       register=None if self.register is None else self.register[index],
                       null_mask=None if self.null_mask is None else self.null_mask[index])


def resolve_context(model, cond: ConditioningBundle, batch: int) -> Tuple[torch.Tensor, torch.Tensor]:
    """将条件包解析为去噪网络的 (slots, register) 上下文；空条件替换为学习的空嵌入"""
    k = cond.num_slots
    null_slots = model.null_slot.expand(batch, k, -1)
    null_register = model.null_register.expand(batch, 1, -1)
    if cond.null:
        return null_slots, null_register
    slots, register = cond.slots, cond.register
    if slots.shape[0] != batch:
        slots, register = slots.expand(batch, -1, -1), register.expand(batch, -1, -1)
    if cond.drop_register:
        register = null_register
    if cond.null_mask is not None:
        mask = cond.null_mask.to(torch.bool)[:, None, None]
        slots = torch.where(mask, null_slots, slots)
        register = torch.where(mask, null_register, register)
    return slots, register


def predict_noise(model, x_t: torch.Tensor, t, cond: ConditioningBundle):
    """返回 (eps_hat, A_DM [B, K, M])"""
    t = torch.as_tensor(t, dtype=torch.long)
    if t.dim() == 0:
        t = t.expand(x_t.shape[0])
    slots, register = resolve_context(model, cond, x_t.shape[0])
    return model(x_t, t, slots, register)


@dataclass
class DiffusionStep:
    loss: torch.Tensor
    attn: Optional[torch.Tensor]     # A_DM [B, K, M]
    keep: torch.Tensor               # [B] 未被丢弃条件的样本
    t: torch.Tensor


def diffusion_forward(x0: torch.Tensor, model, cond: ConditioningBundle, sched: NoiseSchedule,
                      rng: torch.Generator, p_null: float = 0.1,
                      predictor: Optional[Callable] = None) -> DiffusionStep:
    """单次扩散训练前向：采样 t 与 ε，条件丢弃，返回损失与适配器注意力"""
    batch = x0.shape[0]
    if batch == 0:
        raise ValueError("批次不能为空")
    t = torch.randint(0, sched.T, (batch,), generator=rng)
    eps = torch.randn(x0.shape, generator=rng, dtype=x0.dtype)
    drop = torch.rand(batch, generator=rng) < p_null
    x_t = q_sample(x0, t, eps, sched)
    bundle = replace(cond, null_mask=drop) if not cond.null and p_null > 0 else cond
    eps_hat, attn = (predictor or predict_noise)(model, x_t, t, bundle)
    loss = ((eps - eps_hat) ** 2).mean()
    return DiffusionStep(loss=loss, attn=attn, keep=~drop, t=t)


def diffusion_loss(batch: torch.Tensor, model, cond_builder: Callable, sched: NoiseSchedule,
                   rng: torch.Generator, p_null: float = 0.1, predictor: Optional[Callable] = None) -> torch.Tensor:
    """cond_builder(batch) 返回 ConditioningBundle；返回标量损失"""
    return diffusion_forward(batch, model, cond_builder(batch), sched, rng, p_null, predictor).loss


@dataclass
class GuidanceConfig:
    mode: GuidanceMode = GuidanceMode.JOINT
    weight: float = 0.1
    warmup_iters: int = 0
    target: BceTarget = BceTarget.ENCODER

    def __post_init__(self):
        if self.weight < 0:
            raise ValueError(f"引导权重必须非负: {self.weight}")
        self.mode = GuidanceMode(self.mode)
        self.target = BceTarget(self.target)

    def active(self, iteration: int) -> bool:
        return self.mode is not GuidanceMode.NONE and self.weight > 0 and iteration >= self.warmup_iters


def resize_decoder_attn(attn_dm: torch.Tensor, dm_shape: Tuple[int, int], grid_shape: Tuple[int, int]) -> torch.Tensor:
    """A_DM [B, K, M] 双线性缩放到编码器补丁网格，返回 [B, N, K]"""
    batch, k, m = attn_dm.shape
    if m != dm_shape[0] * dm_shape[1]:
        raise ValueError(f"解码器注意力长度 {m} 与分辨率 {dm_shape} 不符")
    maps = attn_dm.reshape(batch, k, *dm_shape)
    if tuple(dm_shape) != tuple(grid_shape):
        maps = F.interpolate(maps, size=grid_shape, mode='bilinear', align_corners=False)
    return maps.flatten(2).transpose(1, 2)


def guidance_loss(attn_sa: torch.Tensor, attn_dm: torch.Tensor, gcfg: GuidanceConfig,
                  grid_shape: Tuple[int, int], dm_shape: Tuple[int, int],
                  keep: Optional[torch.Tensor] = None) -> torch.Tensor:
    """
    编码器掩码与解码器适配器注意力之间的二元交叉熵

    Args:
        attn_sa: 编码器注意力 [B, N, K]
        attn_dm: 适配器注意力 [B, K, M]
        gcfg: 引导配置（梯度路由与目标方向）
        keep: 可选的样本掩码，条件被丢弃的样本不参与
    """
    if attn_sa.shape[-1] != attn_dm.shape[1]:
        raise ValueError(f"槽数量不一致: 编码器 {attn_sa.shape[-1]}，解码器 {attn_dm.shape[1]}")
    if gcfg.mode is GuidanceMode.NONE:
        return attn_sa.new_zeros(())
    if gcfg.mode is GuidanceMode.SLOT:
        attn_dm = attn_dm.detach()
    elif gcfg.mode is GuidanceMode.DM:
        attn_sa = attn_sa.detach()
    resized = resize_decoder_attn(attn_dm, dm_shape, grid_shape)
    if gcfg.target is BceTarget.ENCODER:
        target, pred = attn_sa, resized
    else:
        target, pred = resized, attn_sa
    if keep is not None:
        if not torch.any(keep):
            return attn_sa.new_zeros(())
        target, pred = target[keep], pred[keep]
    pred = pred.clamp(BCE_CLAMP, 1 - BCE_CLAMP)
    return -(target * torch.log(pred) + (1 - target) * torch.log(1 - pred)).mean()


@dataclass
class LossTerms:
    total: torch.Tensor
    diffusion: torch.Tensor
    guidance: torch.Tensor

    def values(self) -> Tuple[float, float, float]:
        return float(self.total.detach()), float(self.diffusion.detach()), float(self.guidance.detach())


def combine_losses(diffusion: torch.Tensor, guidance: Optional[torch.Tensor], gcfg: GuidanceConfig,
                   iteration: int) -> LossTerms:
    """L = L_θ + λ·L_guidance；预热期间引导项为 0"""
    if guidance is None or not gcfg.active(iteration):
        zero = diffusion.new_zeros(())
        return LossTerms(total=diffusion, diffusion=diffusion, guidance=zero)
    return LossTerms(total=diffusion + gcfg.weight * guidance, diffusion=diffusion, guidance=guidance)


def total_loss(batch, model, gcfg: GuidanceConfig, iteration: int, rng: torch.Generator,
               valid: Optional[torch.Tensor] = None) -> LossTerms:
    """model 需实现 diffusion_terms(batch, rng, with_guidance, valid)，返回 (L_θ, L_guidance 或 None)"""
    diffusion, guidance = model.diffusion_terms(batch, rng, gcfg.active(iteration), valid)
    return combine_losses(diffusion, guidance, gcfg, iteration)


def cfg_noise(model, x_t: torch.Tensor, t, cond: ConditioningBundle, scale: float,
              predictor: Optional[Callable] = None) -> torch.Tensor:
    if scale < 0:
        raise ValueError(f"CFG 系数必须非负: {scale}")
    predict = predictor or predict_noise
    if scale == 1.0 or cond.null:
        return predict(model, x_t, t, cond)[0]
    eps_null = predict(model, x_t, t, cond.as_null())[0]
    if scale == 0.0:
        return eps_null
    eps_cond = predict(model, x_t, t, cond)[0]
    return eps_null + scale * (eps_cond - eps_null)


@torch.no_grad()
def p_sample_loop(model, cond: ConditioningBundle, sched: NoiseSchedule, rng: torch.Generator,
                  scale: float = 1.3, shape: Sequence[int] = (1, 3, 32, 32),
                  decoder: Optional[Callable] = None, predictor: Optional[Callable] = None) -> torch.Tensor:
    """从 N(0, I) 出发逐步去噪；返回映射到 [0,1] 的样本"""
    x = torch.randn(tuple(shape), generator=rng, dtype=torch.get_default_dtype())
    for step in reversed(range(sched.T)):
        t = torch.full((shape[0],), step, dtype=torch.long)
        eps_hat = cfg_noise(model, x, t, cond, scale, predictor)
        mean = posterior_mean(x, t, eps_hat, sched)
        if step > 0:
            noise = torch.randn(x.shape, generator=rng, dtype=x.dtype)
            x = mean + sched.at(sched.posterior_var, t, x).sqrt() * noise
        else:
            x = mean
    if decoder is not None:
        x = decoder(x)
    return (x.clamp(-1.0, 1.0) + 1.0) / 2.0


class EditKind(Enum):
    REMOVE = "remove"
    REPLACE = "replace"
    ADD = "add"


@dataclass
class EditOp:
    kind: EditKind
    index: Optional[int] = None
    slot: Optional[torch.Tensor] = None   # [D_c] 或 [B, D_c]


def edit_bundle(cond: ConditioningBundle, op: EditOp, recompute_register: bool = True) -> ConditioningBundle:
    """槽空间编辑：删除、替换或添加一个槽；注册令牌重算为槽均值"""
    if cond.null or cond.slots is None:
        raise ValueError("空条件无法编辑")
    slots = cond.slots
    k = slots.shape[1]
    if op.kind in (EditKind.REMOVE, EditKind.REPLACE):
        if op.index is None or not 0 <= op.index < k:
            raise ValueError(f"槽索引越界: {op.index}（共 {k} 个槽）")
    if op.kind in (EditKind.REPLACE, EditKind.ADD):
        if op.slot is None:
            raise ValueError(f"{op.kind.value} 操作需要提供槽向量")
        new_slot = op.slot.reshape(-1, 1, slots.shape[-1]).expand(slots.shape[0], 1, -1).to(slots.dtype)

    if op.kind is EditKind.REMOVE:
        if k == 1:
            raise ValueError("不能删除唯一的槽")
        slots = torch.cat([slots[:, :op.index], slots[:, op.index + 1:]], dim=1)
    elif op.kind is EditKind.REPLACE:
        slots = torch.cat([slots[:, :op.index], new_slot, slots[:, op.index + 1:]], dim=1)
    else:
        slots = torch.cat([slots, new_slot], dim=1)

    register = slots.mean(dim=1, keepdim=True) if recompute_register else cond.register
    return replace(cond, slots=slots, register=register)


def compose_bundles(base: ConditioningBundle, donor: ConditioningBundle, take_from_donor: Sequence[int],
                    recompute_register: bool = True) -> ConditioningBundle:
    """组合生成：指定索引的槽取自 donor，其余保留 base"""
    if base.slots.shape != donor.slots.shape:
        raise ValueError(f"槽形状不一致: {tuple(base.slots.shape)} vs {tuple(donor.slots.shape)}")
    result = base
    for index in take_from_donor:
        result = edit_bundle(result, EditOp(EditKind.REPLACE, index, donor.slots[:, index]), recompute_register)
    return result
