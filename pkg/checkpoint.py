"""
检查点读写
二进制格式（小端）：
    magic(8) | version u32 | iteration u64 | config_len u32 | config utf-8
    | record_count u32 | 记录...
每条记录：name_len u16 | name utf-8 | ndim u8 | dims u32×ndim | float32 数据
优化器状态以 adam.<参数名>.<字段> 命名的记录保存
"""
import struct
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Union

import numpy as np
import torch
from torch import nn

from storage import atomic_write_bytes

MAGIC = b'SLOTDIF\x00'
VERSION = 1
ADAM_PREFIX = 'adam.'
ADAM_FIELDS = ('step', 'exp_avg', 'exp_avg_sq')


class CheckpointError(ValueError):
    """检查点损坏、版本不符或与模型不兼容"""


@dataclass
class Checkpoint:
    iteration: int
    config_text: str
    params: Dict[str, np.ndarray] = field(default_factory=dict)
    optimizer: Dict[str, np.ndarray] = field(default_factory=dict)
    version: int = VERSION


def _as_f32(tensor: torch.Tensor) -> np.ndarray:
    return np.ascontiguousarray(tensor.detach().cpu().numpy(), dtype='<f4')


def capture(model: nn.Module, iteration: int, config_text: str,
            optimizer: Optional[torch.optim.Optimizer] = None) -> Checkpoint:
    params = {name: _as_f32(value) for name, value in model.state_dict().items()}
    state = {}
    if optimizer is not None:
        names = {id(p): name for name, p in model.named_parameters()}
        for group in optimizer.param_groups:
            for param in group['params']:
                slot = optimizer.state.get(param)
                if not slot:
                    continue
                for key in ADAM_FIELDS:
                    state[f'{ADAM_PREFIX}{names[id(param)]}.{key}'] = _as_f32(torch.as_tensor(slot[key]))
    return Checkpoint(iteration=iteration, config_text=config_text, params=params, optimizer=state)


def _encode_record(name: str, array: np.ndarray) -> bytes:
    encoded = name.encode('utf-8')
    header = struct.pack('<H', len(encoded)) + encoded + struct.pack('<B', array.ndim)
    header += struct.pack(f'<{array.ndim}I', *array.shape)
    return header + np.ascontiguousarray(array, dtype='<f4').tobytes()


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    config = ckpt.config_text.encode('utf-8')
    records = list(ckpt.params.items()) + list(ckpt.optimizer.items())
    parts = [MAGIC, struct.pack('<IQI', ckpt.version, ckpt.iteration, len(config)), config,
             struct.pack('<I', len(records))]
    parts.extend(_encode_record(name, array) for name, array in records)
    return b''.join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, size: int) -> bytes:
        end = self.offset + size
        if end > len(self.data):
            raise CheckpointError(f"检查点被截断：需要 {end} 字节，实际 {len(self.data)} 字节")
        chunk = self.data[self.offset:end]
        self.offset = end
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(data: bytes) -> Checkpoint:
    reader = _Reader(data)
    if reader.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("不是有效的检查点文件（magic 不匹配）")
    version, iteration, config_len = reader.unpack('<IQI')
    if version != VERSION:
        raise CheckpointError(f"检查点版本 {version} 与当前版本 {VERSION} 不兼容")
    try:
        config_text = reader.take(config_len).decode('utf-8')
    except UnicodeDecodeError as e:
        raise CheckpointError(f"检查点配置快照损坏: {e}") from None
    (count,) = reader.unpack('<I')
    params, optimizer = {}, {}
    for _ in range(count):
        (name_len,) = reader.unpack('<H')
        name = reader.take(name_len).decode('utf-8', errors='replace')
        (ndim,) = reader.unpack('<B')
        dims = reader.unpack(f'<{ndim}I')
        size = int(np.prod(dims)) if ndim else 1
        array = np.frombuffer(reader.take(4 * size), dtype='<f4').reshape(dims).copy()
        target = optimizer if name.startswith(ADAM_PREFIX) else params
        if name in target:
            raise CheckpointError(f"检查点记录重复: {name}")
        target[name] = array
    if reader.offset != len(data):
        raise CheckpointError(f"检查点末尾有 {len(data) - reader.offset} 字节多余数据")
    return Checkpoint(iteration=iteration, config_text=config_text, params=params, optimizer=optimizer,
                      version=version)


def checkpoint_save(path: Union[str, Path], ckpt: Checkpoint):
    atomic_write_bytes(path, encode_checkpoint(ckpt))
    logging.info(f"检查点已保存: {path}（迭代 {ckpt.iteration}，记录 {len(ckpt.params) + len(ckpt.optimizer)} 条）")


def checkpoint_load(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"检查点不存在: {path}")
    return decode_checkpoint(path.read_bytes())


def restore(ckpt: Checkpoint, model: nn.Module, optimizer: Optional[torch.optim.Optimizer] = None):
    """把检查点写回模型（及优化器）；名称或形状不一致时不修改任何状态"""
    current = model.state_dict()
    missing = sorted(set(current) - set(ckpt.params))
    unexpected = sorted(set(ckpt.params) - set(current))
    if missing or unexpected:
        raise CheckpointError(f"检查点与模型不兼容：缺少 {missing[:5]}，多余 {unexpected[:5]}")
    for name, value in current.items():
        if tuple(value.shape) != ckpt.params[name].shape:
            raise CheckpointError(f"参数 {name} 形状不一致: 模型 {tuple(value.shape)}，"
                                  f"检查点 {ckpt.params[name].shape}")
    model.load_state_dict({name: torch.from_numpy(array).to(current[name].dtype)
                           for name, array in ckpt.params.items()})
    if optimizer is not None and ckpt.optimizer:
        _restore_optimizer(ckpt, model, optimizer)


def _restore_optimizer(ckpt: Checkpoint, model: nn.Module, optimizer: torch.optim.Optimizer):
    names = {id(p): name for name, p in model.named_parameters()}
    state_dict = optimizer.state_dict()
    index = 0
    for group in optimizer.param_groups:
        for param in group['params']:
            prefix = f'{ADAM_PREFIX}{names[id(param)]}.'
            if prefix + 'step' in ckpt.optimizer:
                entry = {key: torch.from_numpy(ckpt.optimizer[prefix + key]).to(param.dtype)
                         for key in ADAM_FIELDS}
                entry['step'] = entry['step'].reshape(())
                state_dict['state'][index] = entry
            index += 1
    optimizer.load_state_dict(state_dict)
