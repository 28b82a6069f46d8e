"""
表示探针：把匹配到物体的槽向量映射到类别、位置与包围盒
"""
import logging
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from metrics import hungarian, iou_matrix
from numerics import Linear
from scene_synth import SPRITE_KINDS, SpriteSpec

PROBE_KINDS = ('category', 'position', 'bbox')
PROBE_HIDDEN = 64
PROBE_LR = 1e-3


def match_slots_to_objects(masks: np.ndarray, gt: np.ndarray) -> List[Tuple[int, int]]:
    """
    按 IoU 做匈牙利匹配

    Args:
        masks: 槽掩码 [K, H, W]（软掩码时取逐像素 argmax）
        gt: 实例分割 [H, W]，0 为背景

    Returns:
        (真值实例编号, 槽索引) 列表，按实例编号排序
    """
    masks = np.asarray(masks)
    gt = np.asarray(gt)
    if masks.shape[1:] != gt.shape:
        raise ValueError(f"掩码尺寸 {masks.shape[1:]} 与真值 {gt.shape} 不一致")
    labels = [int(label) for label in np.unique(gt) if label != 0]
    if not labels:
        return []
    segmentation = masks.argmax(axis=0)
    slot_masks = [segmentation == k for k in range(masks.shape[0])]
    ious = iou_matrix([gt == label for label in labels], slot_masks)
    pairs, _ = hungarian(-ious)
    return [(labels[row], col) for row, col in pairs]


def probe_targets(sprites: Sequence[SpriteSpec]) -> Dict[str, np.ndarray]:
    """类别编号（从 0 开始）、中心位置与二维包围盒"""
    return {
        'category': np.array([s.category - 1 for s in sprites], dtype=np.int64),
        'position': np.array([s.position for s in sprites], dtype=np.float32).reshape(-1, 2),
        'bbox': np.array([s.bbox for s in sprites], dtype=np.float32).reshape(-1, 4),
    }


@dataclass
class Probe:
    kind: str
    net: nn.Module


def _output_dim(kind: str) -> int:
    return {'category': len(SPRITE_KINDS), 'position': 2, 'bbox': 4}[kind]


def _check_kind(kind: str):
    if kind not in PROBE_KINDS:
        raise ValueError(f"未知探针类型: {kind}")


def fit_probe(features: torch.Tensor, targets, kind: str, steps: int = 500, seed: int = 0) -> Probe:
    """两层 MLP（隐藏 64，ReLU），Adam 全批次训练；类别用交叉熵，其余用均方误差"""
    _check_kind(kind)
    if features.shape[0] == 0:
        raise ValueError("探针训练集为空")
    torch.manual_seed(seed)
    features = features.detach()
    targets = torch.as_tensor(targets)
    net = nn.Sequential(Linear(features.shape[-1], PROBE_HIDDEN), nn.ReLU(),
                        Linear(PROBE_HIDDEN, _output_dim(kind))).to(features.dtype)
    optimizer = torch.optim.Adam(net.parameters(), lr=PROBE_LR)
    loss = None
    for _ in range(steps):
        optimizer.zero_grad()
        loss = _probe_loss(net(features), targets, kind)
        loss.backward()
        optimizer.step()
    if loss is not None:
        logging.info(f"探针 {kind} 训练完成，样本数 {features.shape[0]}，最终损失 {loss.item():.4f}")
    return Probe(kind=kind, net=net)


def _probe_loss(output: torch.Tensor, targets: torch.Tensor, kind: str) -> torch.Tensor:
    if kind == 'category':
        return F.cross_entropy(output, targets.long())
    return F.mse_loss(output, targets.to(output.dtype))


@torch.no_grad()
def evaluate_probe(probe: Probe, features: torch.Tensor, targets) -> float:
    """类别探针返回准确率，回归探针返回均方误差"""
    if features.shape[0] == 0:
        return float('nan')
    targets = torch.as_tensor(targets)
    output = probe.net(features)
    if probe.kind == 'category':
        return float((output.argmax(dim=-1) == targets.long()).double().mean())
    return float(F.mse_loss(output, targets.to(output.dtype)))


def split_indices(count: int, train_frac: float = 0.8, seed: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    order = np.random.default_rng(seed).permutation(count)
    cut = int(round(train_frac * count))
    return order[:cut], order[cut:]
