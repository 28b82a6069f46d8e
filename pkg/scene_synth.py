"""
合成场景生成模块
确定性的多物体精灵图像与视频片段生成器，附带真实实例掩码与物体属性

光栅化使用整数定点坐标：坐标单位为 1/SUBPIXEL 个半像素，
像素 i 的中心位于 (2i+1)·SUBPIXEL，归一化坐标 x 映射为 (x+1)·W·SUBPIXEL。
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import numpy as np

SUBPIXEL = 16
MAX_PLACEMENT_RETRIES = 100
MIN_VISIBLE_PIXELS = 4
POSITION_RANGE = 0.8
VELOCITY_SALT = 0x5EED_F00D_CAFE_BEEF
MASK64 = (1 << 64) - 1

# 调色板（8位量化值），均远离灰色背景
DEFAULT_PALETTE = (
    (230, 25, 75),
    (60, 180, 75),
    (255, 225, 25),
    (0, 130, 200),
    (245, 130, 48),
    (145, 30, 180),
    (70, 240, 240),
    (240, 50, 230),
)
GRAY_LEVEL = 128
GRADIENT_LEVELS = (96, 160)


class SpriteKind(Enum):
    CIRCLE = "circle"
    SQUARE = "square"
    TRIANGLE = "triangle"


SPRITE_KINDS = (SpriteKind.CIRCLE, SpriteKind.SQUARE, SpriteKind.TRIANGLE)


class SplitMix64:
    """splitmix64 伪随机数生成器，跨平台确定"""

    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        return z ^ (z >> 31)

    def uniform(self, low: float = 0.0, high: float = 1.0) -> float:
        return low + (high - low) * ((self.next_u64() >> 11) * (1.0 / (1 << 53)))

    def randint(self, low: int, high: int) -> int:
        """[low, high] 闭区间均匀整数"""
        if high < low:
            raise ValueError(f"无效区间 [{low}, {high}]")
        return low + self.next_u64() % (high - low + 1)

    def sign(self) -> int:
        return 1 if self.next_u64() & 1 else -1


@dataclass(frozen=True)
class SpriteSpec:
    kind: SpriteKind
    color: Tuple[float, float, float]
    position: Tuple[float, float]
    scale: Tuple[float, float]
    velocity: Tuple[float, float]
    category: int
    depth: int
    instance_id: int

    @property
    def bbox(self) -> Tuple[float, float, float, float]:
        """二维包围盒 (x0, y0, x1, y1)，归一化坐标"""
        x, y = self.position
        sx, sy = self.scale
        return (x - sx, y - sy, x + sx, y + sy)


@dataclass
class SceneConfig:
    height: int = 32
    width: int = 32
    min_objects: int = 1
    max_objects: int = 6
    scale_min: float = 0.15
    scale_max: float = 0.35
    background: str = 'gray'
    palette: Sequence[Tuple[int, int, int]] = DEFAULT_PALETTE

    def validate(self):
        if self.height < 16 or self.width < 16:
            raise ValueError(f"图像尺寸必须不小于16: {self.height}x{self.width}")
        if not 0 <= self.min_objects <= self.max_objects <= 8:
            raise ValueError(f"物体数量范围无效: [{self.min_objects}, {self.max_objects}]")
        if not 0.05 <= self.scale_min <= self.scale_max <= 0.6:
            raise ValueError(f"精灵尺寸范围无效: [{self.scale_min}, {self.scale_max}]")
        if self.background not in ('gray', 'gradient'):
            raise ValueError(f"未知背景类型: {self.background}")
        if not self.palette:
            raise ValueError("调色板不能为空")


@dataclass
class VideoConfig(SceneConfig):
    length: int = 5
    speed_min: float = 0.0
    speed_max: float = 0.1

    def validate(self):
        super().validate()
        if self.length < 1:
            raise ValueError(f"视频长度必须不小于1: {self.length}")
        if not 0.0 <= self.speed_min <= self.speed_max:
            raise ValueError(f"速度范围无效: [{self.speed_min}, {self.speed_max}]")


@dataclass
class SceneSample:
    image: np.ndarray          # H×W×3 float32，取值 [0,1]
    mask: np.ndarray           # H×W uint8 实例编号，0 为背景
    sprites: List[SpriteSpec]
    seed: int = 0

    @property
    def categories(self) -> dict:
        return {s.instance_id: s.category for s in self.sprites}


@dataclass
class VideoSample:
    frames: np.ndarray         # L×H×W×3
    masks: np.ndarray          # L×H×W
    tracks: np.ndarray         # n×L×2 每帧质心位置
    sprites: List[SpriteSpec]
    seed: int = 0
    valid: Optional[np.ndarray] = None   # L 有效帧，None 表示全部有效

    @property
    def frame_valid(self) -> np.ndarray:
        return np.ones(len(self.frames), dtype=bool) if self.valid is None else self.valid

    @property
    def categories(self) -> dict:
        return {s.instance_id: s.category for s in self.sprites}


@dataclass
class _FixedSprite:
    kind: SpriteKind
    color: Tuple[int, int, int]
    cx: int
    cy: int
    sx: int
    sy: int
    vx: int = 0
    vy: int = 0


def config_from(config) -> VideoConfig:
    """由全局 Config 构造生成器配置"""
    return VideoConfig(
        height=config['data.height'], width=config['data.width'],
        min_objects=config['data.min_objects'], max_objects=config['data.max_objects'],
        scale_min=config['data.scale_min'], scale_max=config['data.scale_max'],
        background=config['data.background'], length=config['data.clip_length'],
        speed_min=config['data.speed_min'], speed_max=config['data.speed_max'],
    )


def _to_fixed(value: float, size: int) -> int:
    return int(round((value + 1.0) * size * SUBPIXEL))


def _to_fixed_extent(value: float, size: int) -> int:
    return int(round(value * size * SUBPIXEL))


def _from_fixed(value: int, size: int) -> float:
    return value / (size * SUBPIXEL) - 1.0


def _pixel_centers(size: int) -> np.ndarray:
    return (2 * np.arange(size, dtype=np.int64) + 1) * SUBPIXEL


def coverage(kind: SpriteKind, cx: int, cy: int, sx: int, sy: int, height: int, width: int) -> np.ndarray:
    """定点光栅化：返回 H×W 布尔覆盖图（无抗锯齿）"""
    dx = _pixel_centers(width)[None, :] - cx
    dy = _pixel_centers(height)[:, None] - cy
    if kind is SpriteKind.CIRCLE:
        return (dx * sy) ** 2 + (dy * sx) ** 2 <= (sx * sy) ** 2
    if kind is SpriteKind.SQUARE:
        return (np.abs(dx) <= sx) & (np.abs(dy) <= sy)
    # 等腰三角形，顶点朝上（图像 y 轴向下）
    inside_rows = (dy >= -sy) & (dy <= sy)
    return inside_rows & (np.abs(dx) * 2 * sy <= sx * (dy + sy))


def _background(cfg: SceneConfig) -> np.ndarray:
    if cfg.background == 'gray':
        return np.full((cfg.height, cfg.width, 3), GRAY_LEVEL, dtype=np.int64)
    lo, hi = GRADIENT_LEVELS
    ramp = lo + ((hi - lo) * np.arange(cfg.width, dtype=np.int64)) // max(1, cfg.width - 1)
    return np.broadcast_to(ramp[None, :, None], (cfg.height, cfg.width, 3)).copy()


def _render(sprites: Sequence[_FixedSprite], cfg: SceneConfig, positions=None):
    canvas = _background(cfg)
    mask = np.zeros((cfg.height, cfg.width), dtype=np.uint8)
    for index, sprite in enumerate(sprites):
        cx, cy = (sprite.cx, sprite.cy) if positions is None else positions[index]
        covered = coverage(sprite.kind, cx, cy, sprite.sx, sprite.sy, cfg.height, cfg.width)
        canvas[covered] = sprite.color
        mask[covered] = index + 1
    return canvas, mask


def _quantized_image(canvas: np.ndarray) -> np.ndarray:
    return (canvas.astype(np.float32) / 255.0).astype(np.float32)


def _place_sprites(rng: SplitMix64, cfg: SceneConfig) -> List[_FixedSprite]:
    count = rng.randint(cfg.min_objects, cfg.max_objects)
    if count == 0:
        return []
    for _ in range(MAX_PLACEMENT_RETRIES):
        sprites = []
        for _ in range(count):
            kind = SPRITE_KINDS[rng.randint(0, len(SPRITE_KINDS) - 1)]
            color = tuple(cfg.palette[rng.randint(0, len(cfg.palette) - 1)])
            x = rng.uniform(-POSITION_RANGE, POSITION_RANGE)
            y = rng.uniform(-POSITION_RANGE, POSITION_RANGE)
            sx = rng.uniform(cfg.scale_min, cfg.scale_max)
            sy = rng.uniform(cfg.scale_min, cfg.scale_max)
            sprites.append(_FixedSprite(
                kind=kind, color=color,
                cx=_to_fixed(x, cfg.width), cy=_to_fixed(y, cfg.height),
                sx=_to_fixed_extent(sx, cfg.width), sy=_to_fixed_extent(sy, cfg.height),
            ))
        _, mask = _render(sprites, cfg)
        visible = np.bincount(mask.ravel(), minlength=count + 1)[1:]
        if np.all(visible >= MIN_VISIBLE_PIXELS):
            return sprites
    raise RuntimeError(f"在 {MAX_PLACEMENT_RETRIES} 次重试后仍无法放置 {count} 个可见精灵")


def _spec(sprite: _FixedSprite, index: int, cfg: SceneConfig) -> SpriteSpec:
    return SpriteSpec(
        kind=sprite.kind,
        color=tuple(c / 255.0 for c in sprite.color),
        position=(_from_fixed(sprite.cx, cfg.width), _from_fixed(sprite.cy, cfg.height)),
        scale=(sprite.sx / (cfg.width * SUBPIXEL), sprite.sy / (cfg.height * SUBPIXEL)),
        velocity=(sprite.vx / (cfg.width * SUBPIXEL), sprite.vy / (cfg.height * SUBPIXEL)),
        category=SPRITE_KINDS.index(sprite.kind) + 1,
        depth=index,
        instance_id=index + 1,
    )


def gen_image(seed: int, cfg: Optional[SceneConfig] = None) -> SceneSample:
    cfg = cfg or SceneConfig()
    cfg.validate()
    rng = SplitMix64(seed)
    sprites = _place_sprites(rng, cfg)
    canvas, mask = _render(sprites, cfg)
    return SceneSample(
        image=_quantized_image(canvas), mask=mask,
        sprites=[_spec(s, i, cfg) for i, s in enumerate(sprites)], seed=seed,
    )


def _bounce(start: int, velocity: int, t: int, size: int) -> int:
    """中心坐标在 [-1, 1]（定点 [0, 2·size·SUBPIXEL]）内反射运动"""
    span = 2 * size * SUBPIXEL
    period = 2 * span
    u = (start + t * velocity) % period
    return u if u <= span else period - u


def _centroid_offset(sprite: _FixedSprite) -> int:
    # 三角形的面积质心位于中心下方 sy/3
    return sprite.sy // 3 if sprite.kind is SpriteKind.TRIANGLE else 0


def _animate(sprites: Sequence[_FixedSprite], cfg: VideoConfig, seed: int) -> VideoSample:
    frames, masks = [], []
    tracks = np.zeros((len(sprites), cfg.length, 2), dtype=np.float64)
    for t in range(cfg.length):
        positions = [(_bounce(s.cx, s.vx, t, cfg.width), _bounce(s.cy, s.vy, t, cfg.height)) for s in sprites]
        canvas, mask = _render(sprites, cfg, positions)
        frames.append(_quantized_image(canvas))
        masks.append(mask)
        for i, (px, py) in enumerate(positions):
            offset = _centroid_offset(sprites[i])
            tracks[i, t] = (_from_fixed(px, cfg.width), _from_fixed(py + offset, cfg.height))
    return VideoSample(
        frames=np.stack(frames), masks=np.stack(masks), tracks=tracks,
        sprites=[_spec(s, i, cfg) for i, s in enumerate(sprites)], seed=seed,
    )


def gen_video(seed: int, cfg: Optional[VideoConfig] = None) -> VideoSample:
    """
    第0帧与 gen_image(seed) 一致；速度来自独立派生的随机流

    tracks 记录每帧的形状质心（三角形位于中心下方 sy/3）
    """
    cfg = cfg or VideoConfig()
    cfg.validate()
    rng = SplitMix64(seed)
    sprites = _place_sprites(rng, cfg)
    motion = SplitMix64(seed ^ VELOCITY_SALT)
    for sprite in sprites:
        vx = motion.sign() * motion.uniform(cfg.speed_min, cfg.speed_max)
        vy = motion.sign() * motion.uniform(cfg.speed_min, cfg.speed_max)
        sprite.vx = _to_fixed_extent(vx, cfg.width)
        sprite.vy = _to_fixed_extent(vy, cfg.height)
    return _animate(sprites, cfg, seed)


def render_clip(specs: Sequence[SpriteSpec], cfg: VideoConfig, seed: int = 0) -> VideoSample:
    """按给定精灵参数渲染片段（深度顺序即列表顺序）"""
    cfg.validate()
    sprites = [
        _FixedSprite(
            kind=s.kind, color=tuple(int(round(c * 255)) for c in s.color),
            cx=_to_fixed(s.position[0], cfg.width), cy=_to_fixed(s.position[1], cfg.height),
            sx=_to_fixed_extent(s.scale[0], cfg.width), sy=_to_fixed_extent(s.scale[1], cfg.height),
            vx=_to_fixed_extent(s.velocity[0], cfg.width), vy=_to_fixed_extent(s.velocity[1], cfg.height),
        )
        for s in specs
    ]
    return _animate(sprites, cfg, seed)


def generate_split(seeds: Sequence[int], cfg: SceneConfig, video: bool = False, workers: int = 1) -> list:
    """按种子生成样本；纯函数，可并行"""
    generator = gen_video if video else gen_image
    if workers <= 1 or len(seeds) < 2:
        return [generator(seed, cfg) for seed in seeds]
    with ThreadPoolExecutor(max_workers=workers) as executor:
        return list(executor.map(lambda s: generator(s, cfg), seeds))


def split_seeds(base_seed: int, split: str, size: int) -> List[int]:
    offset = {'train': 0, 'val': 1_000_000_000}[split]
    return [base_seed + offset + i for i in range(size)]
