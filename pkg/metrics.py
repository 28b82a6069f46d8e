"""
评估指标模块
FG-ARI、匈牙利匹配、mIoU、mBO（实例级/类别级）、PSNR、SSIM 以及指标报告表
"""
import math
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import polars as pl
from numpy.lib.stride_tricks import sliding_window_view
from scipy.optimize import linear_sum_assignment
from sklearn.metrics import adjusted_rand_score

SSIM_WINDOW = 8
TIE_TOLERANCE = 1e-9
REPORT_SCHEMA = {'split': pl.Utf8, 'sample': pl.Utf8, 'metric': pl.Utf8, 'value': pl.Float64}
AGGREGATE_LABEL = 'mean'


def _check_same_shape(a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        raise ValueError(f"形状不一致: {a.shape} vs {b.shape}")


def fg_ari(gt: np.ndarray, pred: np.ndarray) -> float:
    """仅在真值前景像素上计算调整兰德指数；没有前景时返回 NaN"""
    gt = np.asarray(gt)
    pred = np.asarray(pred)
    _check_same_shape(gt, pred)
    foreground = gt != 0
    if not np.any(foreground):
        return math.nan
    return float(adjusted_rand_score(gt[foreground], pred[foreground]))


def _optimal_cost(cost: np.ndarray) -> float:
    if cost.shape[0] == 0 or cost.shape[1] == 0:
        return 0.0
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].sum())


def _lexicographic_rows(cost: np.ndarray) -> List[int]:
    """n <= m：逐行固定最小可行列，保持总代价最优"""
    n, m = cost.shape
    best = _optimal_cost(cost)
    tolerance = TIE_TOLERANCE * (1.0 + abs(best))
    assigned: List[int] = []
    used = set()
    fixed_cost = 0.0
    for row in range(n):
        rest_rows = list(range(row + 1, n))
        for col in range(m):
            if col in used:
                continue
            rest_cols = [c for c in range(m) if c not in used and c != col]
            remainder = _optimal_cost(cost[np.ix_(rest_rows, rest_cols)])
            if fixed_cost + cost[row, col] + remainder <= best + tolerance:
                assigned.append(col)
                used.add(col)
                fixed_cost += cost[row, col]
                break
    return assigned


def hungarian(cost) -> Tuple[List[Tuple[int, int]], float]:
    """
    最小代价一对一匹配，返回 (按行排序的 (row, col) 对, 总代价)

    代价相同时取字典序最小的分配（n > m 时在转置上按列取字典序）
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"代价矩阵必须是二维: {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise ValueError("代价矩阵包含非有限值")
    n, m = cost.shape
    if n <= m:
        pairs = list(enumerate(_lexicographic_rows(cost)))
    else:
        pairs = sorted((row, col) for col, row in enumerate(_lexicographic_rows(cost.T)))
    total = float(sum(cost[r, c] for r, c in pairs))
    return pairs, total


def _labels(segmentation: np.ndarray, skip_zero: bool) -> np.ndarray:
    labels = np.unique(segmentation)
    return labels[labels != 0] if skip_zero else labels


def iou_matrix(gt_masks: Sequence[np.ndarray], pred_masks: Sequence[np.ndarray]) -> np.ndarray:
    """gt 掩码与预测掩码两两之间的 IoU；视频输入时交并在所有帧上累加"""
    matrix = np.zeros((len(gt_masks), len(pred_masks)), dtype=np.float64)
    for i, gt_mask in enumerate(gt_masks):
        for j, pred_mask in enumerate(pred_masks):
            union = np.logical_or(gt_mask, pred_mask).sum()
            if union > 0:
                matrix[i, j] = np.logical_and(gt_mask, pred_mask).sum() / union
    return matrix


def background_label(gt: np.ndarray, pred: np.ndarray) -> Optional[int]:
    """与真值背景重叠最多的预测分割；真值没有背景时为 None"""
    background = gt == 0
    if not np.any(background):
        return None
    labels, counts = np.unique(pred[background], return_counts=True)
    return int(labels[np.argmax(counts)])


def _pred_masks(gt: np.ndarray, pred: np.ndarray, exclude_background: bool):
    labels = _labels(pred, skip_zero=False)
    if exclude_background:
        bg = background_label(gt, pred)
        labels = labels[labels != bg] if bg is not None else labels
    return [pred == label for label in labels]


def miou(gt: np.ndarray, pred: np.ndarray, exclude_background: bool = True) -> float:
    """
    匈牙利匹配后的平均 IoU

    gt 中 0 为背景；预测的背景分割不参与前景匹配；未匹配的真值物体计 0。
    输入带帧维度 [L, H, W] 时整段片段只匹配一次。
    """
    gt = np.asarray(gt)
    pred = np.asarray(pred)
    _check_same_shape(gt, pred)
    gt_masks = [gt == label for label in _labels(gt, skip_zero=True)]
    if not gt_masks:
        return math.nan
    pred_masks = _pred_masks(gt, pred, exclude_background)
    if not pred_masks:
        return 0.0
    ious = iou_matrix(gt_masks, pred_masks)
    pairs, _ = hungarian(-ious)
    return float(sum(ious[r, c] for r, c in pairs) / len(gt_masks))


def mbo(gt: np.ndarray, pred: np.ndarray, level: str = 'instance',
        categories: Optional[Mapping[int, int]] = None, exclude_background: bool = True) -> float:
    """
    平均最佳重叠：每个真值掩码取与所有预测掩码的最大 IoU 后求平均

    Args:
        level: instance 使用实例掩码；class 使用同类别实例的并集
        categories: 真值标签到类别编号的映射（class 级别必需）
    """
    gt = np.asarray(gt)
    pred = np.asarray(pred)
    _check_same_shape(gt, pred)
    labels = _labels(gt, skip_zero=True)
    if level == 'instance':
        gt_masks = [gt == label for label in labels]
    elif level == 'class':
        if categories is None:
            raise ValueError("类别级 mBO 需要类别映射")
        classes: Dict[int, np.ndarray] = {}
        for label in labels:
            category = categories[int(label)]
            mask = gt == label
            classes[category] = mask if category not in classes else classes[category] | mask
        gt_masks = [classes[c] for c in sorted(classes)]
    else:
        raise ValueError(f"未知 mBO 级别: {level}")
    if not gt_masks:
        return math.nan
    pred_masks = _pred_masks(gt, pred, exclude_background)
    if not pred_masks:
        return 0.0
    return float(iou_matrix(gt_masks, pred_masks).max(axis=1).mean())


def psnr(a: np.ndarray, b: np.ndarray, max_val: float = 1.0) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_same_shape(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(max_val ** 2 / mse)


def _grayscale(image: np.ndarray) -> np.ndarray:
    if image.ndim == 3:
        return image.mean(axis=-1)
    if image.ndim != 2:
        raise ValueError(f"SSIM 需要 HxW 或 HxWxC 图像: {image.shape}")
    return image


def ssim(a: np.ndarray, b: np.ndarray, max_val: float = 1.0, window: int = SSIM_WINDOW) -> float:
    """8×8 均匀窗口的结构相似度，窗口步长 1，取所有窗口的均值"""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_same_shape(a, b)
    a, b = _grayscale(a), _grayscale(b)
    if a.shape[0] < window or a.shape[1] < window:
        raise ValueError(f"图像 {a.shape} 小于 SSIM 窗口 {window}x{window}")
    c1 = (0.01 * max_val) ** 2
    c2 = (0.03 * max_val) ** 2
    wa = sliding_window_view(a, (window, window))
    wb = sliding_window_view(b, (window, window))
    mu_a = wa.mean(axis=(-2, -1))
    mu_b = wb.mean(axis=(-2, -1))
    var_a = wa.var(axis=(-2, -1))
    var_b = wb.var(axis=(-2, -1))
    cov = (wa * wb).mean(axis=(-2, -1)) - mu_a * mu_b
    numerator = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    denominator = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(numerator / denominator))


def build_report(per_sample: Mapping[str, Sequence[float]], split: str = 'val') -> pl.DataFrame:
    """每个样本一行加每个指标一行汇总；汇总忽略 NaN，无限值保留"""
    rows = []
    for metric, values in per_sample.items():
        for index, value in enumerate(values):
            rows.append({'split': split, 'sample': str(index), 'metric': metric, 'value': float(value)})
    for metric, values in per_sample.items():
        rows.append({'split': split, 'sample': AGGREGATE_LABEL, 'metric': metric, 'value': aggregate(values)})
    return pl.DataFrame(rows, schema=REPORT_SCHEMA)


def aggregate(values: Sequence[float]) -> float:
    finite = [v for v in values if not math.isnan(v)]
    if not finite:
        return math.nan
    return float(np.mean(finite))


def report_summary(report: pl.DataFrame) -> pl.DataFrame:
    return report.filter(pl.col('sample') == AGGREGATE_LABEL).select(['split', 'metric', 'value'])


def format_report(report: pl.DataFrame) -> str:
    """纯文本报告：每行 `split sample metric value`"""
    lines = [f"{row['split']} {row['sample']} {row['metric']} {row['value']:.6f}"
             for row in report.iter_rows(named=True)]
    return '\n'.join(lines) + ('\n' if lines else '')
