"""
训练运行时
数据加载、Adam 优化（线性预热）、两阶段训练、潜空间自编码器预训练、损失日志与检查点
"""
import math
import time
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from config import CHECKPOINT_NAME, LOSS_LOG_NAME, LOSS_PLOT_NAME, Config, TemporalMode
from checkpoint import capture, checkpoint_save
from memory_monitor import MemoryMonitor, log_memory_usage
from models import SlotModel, build_model
from numerics import backward, configure_threads, set_precision
from scene_synth import SceneSample, VideoSample
from storage import atomic_write_text, import_dataset, write_loss_chart
from temporal import frame_window, pad_clip

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
MODEL_SEED_OFFSET = 1
DATA_SEED_OFFSET = 2


class NonFiniteLossError(RuntimeError):
    """训练损失出现 NaN 或 Inf"""


@dataclass
class LossRecord:
    iteration: int
    total: float
    diffusion: float
    guidance: float

    def line(self) -> str:
        return f"{self.iteration} {self.total:.8e} {self.diffusion:.8e} {self.guidance:.8e}"


@dataclass
class TrainResult:
    checkpoint_path: Path
    losses: List[LossRecord] = field(default_factory=list)


def stack_samples(samples: Sequence[Union[SceneSample, VideoSample]]) -> torch.Tensor:
    """图像样本 → [N, 3, H, W]；视频样本 → [N, L, 3, H, W]；取值 [0,1]"""
    if not samples:
        raise ValueError("数据集为空")
    if isinstance(samples[0], VideoSample):
        array = np.stack([s.frames for s in samples]).transpose(0, 1, 4, 2, 3)
    else:
        array = np.stack([s.image for s in samples]).transpose(0, 3, 1, 2)
    return torch.from_numpy(np.ascontiguousarray(array)).to(torch.get_default_dtype())


def load_split(directory: Path, config: Config, limit: int = 0) -> List[Union[SceneSample, VideoSample]]:
    """读取数据集划分并检查与配置一致"""
    if not (directory / 'manifest.txt').exists():
        raise FileNotFoundError(f"数据集不存在: {directory}")
    samples = import_dataset(directory, limit)
    video = config.enum('temporal.mode') is not TemporalMode.OFF
    for sample in samples[:1]:
        is_video = isinstance(sample, VideoSample)
        if is_video != video:
            raise ValueError(f"数据集 {directory} 的类型（{'视频' if is_video else '图像'}）与 temporal.mode 不符")
        frame = sample.frames[0] if is_video else sample.image
        if frame.shape[:2] != (config['data.height'], config['data.width']):
            raise ValueError(f"数据集图像尺寸 {frame.shape[:2]} 与配置 "
                             f"{config['data.height']}x{config['data.width']} 不符")
    if video:
        samples = [fit_clip(s, config['data.clip_length']) for s in samples]
    return samples


def fit_clip(sample: VideoSample, length: int) -> VideoSample:
    """短片段在末尾补齐并标记补齐帧无效；长片段取以中间帧为中心的窗口"""
    total = sample.frames.shape[0]
    if total == length:
        return sample

    def fit(seq):
        return pad_clip(seq, length) if total < length else frame_window(seq, total // 2, length)

    frames, valid = fit(sample.frames)
    masks, _ = fit(sample.masks)
    tracks, _ = fit(sample.tracks.transpose(1, 0, 2))
    logging.debug(f"片段 {sample.seed}: 长度 {total} 调整为 {length}，有效帧 {int(valid.sum())}")
    return replace(sample, frames=frames, masks=masks, tracks=tracks.transpose(1, 0, 2), valid=valid)


def stack_valid(samples: Sequence[Union[SceneSample, VideoSample]]) -> Optional[torch.Tensor]:
    """视频样本的有效帧掩码 [N, L]；图像样本返回 None"""
    if not samples or not isinstance(samples[0], VideoSample):
        return None
    return torch.from_numpy(np.stack([s.frame_valid for s in samples]))


def warmup_factor(warmup: int):
    def factor(step: int) -> float:
        return 1.0 if warmup <= 0 else min(1.0, (step + 1) / warmup)
    return factor


class TrainingRuntime:
    """配置驱动的训练循环"""

    def __init__(self, config: Config, data_dir: Optional[Path] = None, out_dir: Optional[Path] = None):
        self.config = config
        self.data_dir = Path(data_dir) if data_dir is not None else config.data_dir
        self.out_dir = Path(out_dir) if out_dir is not None else config.out_dir
        self.steps = config['train.steps']
        self.batch = config['train.batch']
        self.seed = config['train.seed']
        set_precision(config['train.precision'])
        configure_threads(config['train.threads'])

        torch.manual_seed(self.seed + MODEL_SEED_OFFSET)
        self.model: SlotModel = build_model(config)
        self.rng = torch.Generator().manual_seed(self.seed)
        self.data_rng = torch.Generator().manual_seed(self.seed + DATA_SEED_OFFSET)
        self.optimizer = torch.optim.Adam(self.model.trainable_parameters(), lr=config['train.lr'],
                                          betas=ADAM_BETAS, eps=ADAM_EPS)
        self.scheduler = torch.optim.lr_scheduler.LambdaLR(self.optimizer,
                                                           warmup_factor(config['train.lr_warmup']))
        self.two_phase = config['train.two_phase'] and self.model.denoiser is not None
        self.phase_boundary = int(config['train.phase1_frac'] * self.steps)
        self.losses: List[LossRecord] = []
        self.data: Optional[torch.Tensor] = None
        self.valid: Optional[torch.Tensor] = None

    @property
    def checkpoint_path(self) -> Path:
        return self.out_dir / CHECKPOINT_NAME

    def load_data(self):
        samples = load_split(self.data_dir / 'train', self.config)
        self.data = stack_samples(samples)
        self.valid = stack_valid(samples)
        logging.info(f"训练数据: {tuple(self.data.shape)}")

    def next_batch(self) -> Tuple[torch.Tensor, Optional[torch.Tensor]]:
        """返回 (批次, 有效帧掩码)；图像数据的掩码为 None"""
        index = torch.randint(0, self.data.shape[0], (min(self.batch, self.data.shape[0]),), generator=self.data_rng)
        return self.data[index], None if self.valid is None else self.valid[index]

    def set_phase(self, phase: int):
        """第一阶段只训练基础去噪网络与注册路径，第二阶段只训练槽侧与适配器"""
        frozen = {id(p) for p in self.model.phase_frozen(phase)}
        for param in self.model.trainable_parameters():
            param.requires_grad_(id(param) not in frozen)
            if id(param) in frozen:
                param.grad = None
        logging.info(f"进入第 {phase} 阶段训练，冻结参数 {len(frozen)} 个")

    def pretrain_autoencoder(self):
        steps = self.config['decoder.ae_steps']
        autoencoder = self.model.autoencoder
        optimizer = torch.optim.Adam(autoencoder.parameters(), lr=self.config['train.lr'],
                                     betas=ADAM_BETAS, eps=ADAM_EPS)
        start_time = time.time()
        loss = None
        for step in range(steps):
            optimizer.zero_grad()
            loss = self.model.ae_loss(self.next_batch_frames())
            backward(loss)
            optimizer.step()
        for param in autoencoder.parameters():
            param.requires_grad_(False)
        if loss is not None:
            logging.info(f"自编码器预训练完成: {steps} 步，重建误差 {loss.item():.6f}，"
                         f"耗时 {time.time() - start_time:.2f}s")

    def next_batch_frames(self) -> torch.Tensor:
        batch, valid = self.next_batch()
        if batch.dim() != 5:
            return batch
        return batch[valid] if valid is not None else batch.flatten(0, 1)

    def step(self, iteration: int) -> LossRecord:
        self.optimizer.zero_grad()
        batch, valid = self.next_batch()
        terms = self.model.training_terms(batch, self.rng, iteration, valid)
        total, diffusion, guidance = terms.values()
        if not all(math.isfinite(v) for v in (total, diffusion, guidance)):
            raise NonFiniteLossError(f"迭代 {iteration} 损失非有限: total={total}, "
                                     f"diffusion={diffusion}, guidance={guidance}")
        backward(terms.total)
        self.optimizer.step()
        self.scheduler.step()
        return LossRecord(iteration, total, diffusion, guidance)

    def write_log(self):
        atomic_write_text(self.out_dir / LOSS_LOG_NAME, ''.join(r.line() + '\n' for r in self.losses))

    def write_plot(self):
        if self.losses:
            series = [[r.total for r in self.losses], [r.diffusion for r in self.losses],
                      [max(r.guidance, 1e-8) for r in self.losses]]
            write_loss_chart(self.out_dir / LOSS_PLOT_NAME, [r.iteration for r in self.losses], series)

    def save(self, iteration: int):
        checkpoint_save(self.checkpoint_path,
                        capture(self.model, iteration, self.config.to_text(), self.optimizer))

    def run(self) -> TrainResult:
        start_time = time.time()
        log_memory_usage("训练开始")
        self.out_dir.mkdir(parents=True, exist_ok=True)
        atomic_write_text(self.out_dir / 'config.txt', self.config.to_text())
        self.load_data()
        if self.model.latent_mode and self.steps > 0:
            self.pretrain_autoencoder()
        every = self.config['io.checkpoint_every']
        plot_every = self.config['io.plot_every']
        with MemoryMonitor():
            for iteration in range(self.steps):
                if self.two_phase and iteration in (0, self.phase_boundary):
                    self.set_phase(1 if iteration < self.phase_boundary else 2)
                record = self.step(iteration)
                self.losses.append(record)
                if every and (iteration + 1) % every == 0:
                    self.write_log()
                    self.save(iteration + 1)
                if plot_every and (iteration + 1) % plot_every == 0:
                    self.write_plot()
                if iteration % 100 == 0:
                    logging.info(f"迭代 {iteration}: 总损失 {record.total:.6f}，"
                                 f"扩散/重建 {record.diffusion:.6f}，引导 {record.guidance:.6f}")
        self.write_log()
        self.write_plot()
        self.save(self.steps)
        log_memory_usage("训练结束")
        logging.info(f"训练完成: {self.steps} 步，耗时 {time.time() - start_time:.2f}s，"
                     f"路径 {self.model.path.value}")
        return TrainResult(checkpoint_path=self.checkpoint_path, losses=list(self.losses))


def cmd_train(config: Config, data_dir: Optional[Path] = None) -> TrainResult:
    return TrainingRuntime(config, data_dir).run()
