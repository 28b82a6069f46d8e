"""
数值基础模块
张量运算、参数化层、反向传播与共享的注意力原语（基于 torch autograd）
"""
import math
import logging
from typing import Callable, Optional, Sequence, Tuple

import torch
from torch import nn

GRAD_CHECK_EPS_RANGE = (1e-6, 1e-3)


def set_precision(mode: str = 'float32') -> torch.dtype:
    """切换默认计算精度：float32（训练）或 float64（校验）"""
    dtypes = {'float32': torch.float32, 'float64': torch.float64}
    if mode not in dtypes:
        raise ValueError(f"未知精度: {mode}")
    torch.set_default_dtype(dtypes[mode])
    return dtypes[mode]


def configure_threads(threads: int):
    """设置计算线程数；单线程时启用确定性算法"""
    if threads < 1:
        raise ValueError(f"线程数必须不小于1: {threads}")
    torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(threads == 1)
    logging.info(f"计算线程数: {threads}，确定性模式: {threads == 1}")


def _check_axis(x: torch.Tensor, axis: int) -> int:
    if not -x.dim() <= axis < x.dim():
        raise ValueError(f"无效的轴 {axis}，张量维度为 {x.dim()}")
    return axis


def softmax(x: torch.Tensor, axis: int) -> torch.Tensor:
    _check_axis(x, axis)
    shifted = x - x.amax(dim=axis, keepdim=True).detach()
    exp = shifted.exp()
    return exp / exp.sum(dim=axis, keepdim=True)


def layer_norm(x: torch.Tensor, gain: torch.Tensor, bias: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    size = x.shape[-1]
    if gain.shape != (size,) or bias.shape != (size,):
        raise ValueError(f"LayerNorm 参数形状 {tuple(gain.shape)}/{tuple(bias.shape)} 与最后一维 {size} 不匹配")
    mean = x.mean(dim=-1, keepdim=True)
    var = (x - mean).pow(2).mean(dim=-1, keepdim=True)
    return (x - mean) / torch.sqrt(var + eps) * gain + bias


def linear(x: torch.Tensor, weight: torch.Tensor, bias: Optional[torch.Tensor] = None) -> torch.Tensor:
    """y = x·W (+ b)，W 形状为 (in, out)"""
    if weight.dim() != 2 or x.shape[-1] != weight.shape[0]:
        raise ValueError(f"维度不匹配: 输入 {tuple(x.shape)}，权重 {tuple(weight.shape)}")
    y = x @ weight
    if bias is not None:
        if bias.shape != (weight.shape[1],):
            raise ValueError(f"偏置形状 {tuple(bias.shape)} 与输出维度 {weight.shape[1]} 不匹配")
        y = y + bias
    return y


class Linear(nn.Module):
    def __init__(self, in_features: int, out_features: int, bias: bool = True):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.weight = nn.Parameter(torch.empty(in_features, out_features))
        self.bias = nn.Parameter(torch.zeros(out_features)) if bias else None
        nn.init.xavier_uniform_(self.weight)

    def forward(self, x):
        return linear(x, self.weight, self.bias)


class LayerNorm(nn.Module):
    def __init__(self, size: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.gain = nn.Parameter(torch.ones(size))
        self.bias = nn.Parameter(torch.zeros(size))

    def forward(self, x):
        return layer_norm(x, self.gain, self.bias, self.eps)


class GruCell(nn.Module):
    """
    GRU 单元，约定 h' = (1-z)⊙h + z⊙ĥ
    z = σ(W_z[u,h])，r = σ(W_r[u,h])，ĥ = tanh(W_h[u, r⊙h])
    """

    def __init__(self, input_size: int, hidden_size: int):
        super().__init__()
        self.input_size = input_size
        self.hidden_size = hidden_size
        self.update_gate = Linear(input_size + hidden_size, hidden_size)
        self.reset_gate = Linear(input_size + hidden_size, hidden_size)
        self.candidate = Linear(input_size + hidden_size, hidden_size)

    def forward(self, h, u):
        uh = torch.cat([u, h], dim=-1)
        z = torch.sigmoid(self.update_gate(uh))
        r = torch.sigmoid(self.reset_gate(uh))
        h_cand = torch.tanh(self.candidate(torch.cat([u, r * h], dim=-1)))
        return (1 - z) * h + z * h_cand


def gru_step(cell: GruCell, h: torch.Tensor, u: torch.Tensor) -> torch.Tensor:
    if h.shape[-1] != cell.hidden_size:
        raise ValueError(f"隐状态维度 {h.shape[-1]} 与单元隐层维度 {cell.hidden_size} 不匹配")
    if u.shape[-1] != cell.input_size:
        raise ValueError(f"输入维度 {u.shape[-1]} 与单元输入维度 {cell.input_size} 不匹配")
    return cell(h, u)


class CrossAttention(nn.Module):
    """多头交叉注意力：查询来自 queries_src，键值来自 context"""

    def __init__(self, query_dim: int, context_dim: int, heads: int = 1, inner_dim: Optional[int] = None):
        super().__init__()
        inner_dim = inner_dim or query_dim
        if inner_dim % heads != 0:
            raise ValueError(f"内部维度 {inner_dim} 不能被头数 {heads} 整除")
        self.heads = heads
        self.head_dim = inner_dim // heads
        self.to_q = Linear(query_dim, inner_dim, bias=False)
        self.to_k = Linear(context_dim, inner_dim, bias=False)
        self.to_v = Linear(context_dim, inner_dim, bias=False)
        self.to_out = Linear(inner_dim, query_dim)

    def forward(self, x, context) -> Tuple[torch.Tensor, torch.Tensor]:
        # x: [..., M, D]，context: [..., C, D_c]
        if context.shape[-2] == 0:
            raise ValueError("交叉注意力的上下文不能为空")
        lead = x.shape[:-2]
        m, c = x.shape[-2], context.shape[-2]
        q = self.to_q(x).reshape(*lead, m, self.heads, self.head_dim).transpose(-2, -3)
        k = self.to_k(context).reshape(*lead, c, self.heads, self.head_dim).transpose(-2, -3)
        v = self.to_v(context).reshape(*lead, c, self.heads, self.head_dim).transpose(-2, -3)
        attn = softmax(q @ k.transpose(-1, -2) / math.sqrt(self.head_dim), axis=-1)
        out = (attn @ v).transpose(-2, -3).reshape(*lead, m, self.heads * self.head_dim)
        return self.to_out(out), attn


def cross_attention(queries_src: torch.Tensor, context: torch.Tensor, params: CrossAttention,
                    heads: Optional[int] = None):
    """
    返回 (output, attn, attn_mean)

    attn 形状 [..., heads, M, C]，attn_mean 为各头平均后的注意力图 [..., M, C]
    """
    if queries_src.shape[-2] < 1:
        raise ValueError("查询数量必须不小于1")
    if heads is not None and heads != params.heads:
        raise ValueError(f"头数 {heads} 与参数头数 {params.heads} 不一致")
    output, attn = params(queries_src, context)
    return output, attn, attn.mean(dim=-3)


def backward(loss: torch.Tensor):
    if loss.numel() != 1:
        raise ValueError(f"损失必须是标量，实际形状 {tuple(loss.shape)}")
    loss.backward()


def grad_check(f: Callable[[], torch.Tensor], params: Sequence[torch.Tensor], eps: float = 1e-6,
               max_coords: Optional[int] = None, seed: int = 0) -> float:
    """
    中心差分梯度校验

    Args:
        f: 无参数的标量函数，内部使用 params（须自行固定随机数）
        params: 参与校验的参数张量（建议 float64）
        eps: 差分步长，位于 [1e-6, 1e-3]
        max_coords: 每个参数最多抽查的坐标数，None 表示全部
        seed: 抽查坐标的随机种子

    Returns:
        max |解析 - 数值| / max(1, |解析|)
    """
    lo, hi = GRAD_CHECK_EPS_RANGE
    if not lo <= eps <= hi:
        raise ValueError(f"差分步长 {eps} 超出范围 [{lo}, {hi}]")
    params = list(params)
    loss = f()
    if loss.numel() != 1:
        raise ValueError("梯度校验需要标量函数")
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    picker = torch.Generator().manual_seed(seed)
    worst = 0.0
    with torch.no_grad():
        for param, grad in zip(params, grads):
            analytic = (torch.zeros_like(param) if grad is None else grad).reshape(-1)
            flat = param.view(-1)
            coords = torch.arange(flat.numel())
            if max_coords is not None and flat.numel() > max_coords:
                coords = torch.randperm(flat.numel(), generator=picker)[:max_coords]
            for idx in coords.tolist():
                original = flat[idx].item()
                flat[idx] = original + eps
                plus = f().item()
                flat[idx] = original - eps
                minus = f().item()
                flat[idx] = original
                if not (math.isfinite(plus) and math.isfinite(minus)):
                    raise ValueError(f"扰动点函数值非有限: 坐标 {idx}")
                numeric = (plus - minus) / (2 * eps)
                a = analytic[idx].item()
                worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst


