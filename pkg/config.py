from pathlib import Path
from enum import Enum
import os

# 从 .env 文件读取环境变量（可选）
try:
    from dotenv import load_dotenv
    load_dotenv(Path.cwd() / '.env')
except ImportError:
    # 如果dotenv不可用，仅使用进程环境变量
    pass

# 目录配置
APP_DIR = Path(__file__).resolve().parent
TESTS_DIR = APP_DIR / 'tests'

# 环境变量覆盖前缀：SLOTDIFF_<SECTION>_<KEY>
ENV_PREFIX = 'SLOTDIFF_'


class EncoderVariant(Enum):
    SA = "sa"
    ISA = "isa"


class Aggregation(Enum):
    MEAN = "mean"
    SUM = "sum"


class DecoderPath(Enum):
    BROADCAST = "broadcast"
    DIFFUSION = "diffusion"


class GuidanceMode(Enum):
    NONE = "none"
    SLOT = "slot"
    DM = "dm"
    JOINT = "joint"


class BceTarget(Enum):
    ENCODER = "encoder"
    DECODER = "decoder"


class TemporalMode(Enum):
    OFF = "off"
    V1 = "v1"
    V2 = "v2"


class RegisterMode(Enum):
    SLOT_MEAN = "slot_mean"
    FEATURE_MEAN = "feature_mean"
    NONE = "none"
    GLOBAL_SLOT = "global_slot"


class RegisterSource(Enum):
    FEATURES = "features"
    SLOT_MEAN = "slot_mean"


# 枚举型配置项及其取值类型
ENUM_KEYS = {
    'encoder.variant': EncoderVariant,
    'encoder.aggregation': Aggregation,
    'encoder.register_mode': RegisterMode,
    'decoder.path': DecoderPath,
    'decoder.bce_target': BceTarget,
    'guidance.mode': GuidanceMode,
    'temporal.mode': TemporalMode,
    'temporal.register_source': RegisterSource,
}

# 默认配置（完整键列表见 README）
DEFAULT_CONFIG = {
    # 合成数据配置
    'data': {
        'height': 32,                # 图像高度
        'width': 32,                 # 图像宽度
        'clip_length': 5,            # 视频片段长度 L
        'min_objects': 1,            # 每个场景最少物体数
        'max_objects': 6,            # 每个场景最多物体数
        'scale_min': 0.15,           # 精灵半尺寸下限（归一化坐标）
        'scale_max': 0.35,           # 精灵半尺寸上限
        'speed_min': 0.0,            # 每帧位移下限（每个坐标轴）
        'speed_max': 0.1,            # 每帧位移上限
        'background': 'gray',        # gray 或 gradient
        'train_size': 2000,          # 训练集样本数
        'val_size': 200,             # 验证集样本数
        'seed': 0,                   # 数据集种子
        'video': False,              # 是否生成视频片段
        'dir': 'data',               # 数据集目录
    },
    # 槽编码器配置
    'encoder': {
        'variant': 'sa',             # sa 或 isa
        'num_slots': 0,              # 0 表示自动：max_objects + 1
        'slot_dim': 64,              # D_s
        'feature_dim': 64,           # 骨干网络特征维度 d
        'key_dim': 64,               # D_k
        'iters': 3,                  # 迭代次数
        'aggregation': 'mean',       # mean 或 sum
        'residual_mlp': False,       # GRU之后的残差MLP
        'learned_init': True,        # 学习的初始化均值与对数标准差
        'scale_floor': 0.02,         # ISA 尺度下限
        'register_mode': 'slot_mean',
    },
    # 解码器配置
    'decoder': {
        'path': 'broadcast',         # broadcast 或 diffusion
        'timesteps': 200,            # T
        'beta_start': 1e-4,
        'beta_end': 0.02,
        'adapter_blocks': 'up+down', # 由 down / mid / up 组合
        'guidance_block': -1,        # 上采样块索引
        'width': 32,                 # U-Net 基础通道数
        'heads': 4,                  # 交叉注意力头数
        'cfg_scale': 1.3,
        'p_null': 0.1,               # 条件丢弃概率
        'latent_mode': False,        # 是否在潜空间做扩散
        'latent_channels': 4,
        'ae_steps': 2000,            # 自编码器预训练步数
        'bce_target': 'encoder',     # 引导损失的目标掩码
    },
    # 注意力引导配置
    'guidance': {
        'mode': 'joint',
        'lambda': 0.1,
        'warmup_frac': 0.2,
    },
    # 视频扩展配置
    'temporal': {
        'mode': 'off',               # off / v1 / v2
        'layers': 2,
        'heads': 4,
        'register_source': 'features',
        'register_aggregator': True,
        'frames_per_step': 1,        # 1 即单帧训练
    },
    # 训练配置
    'train': {
        'steps': 10000,
        'lr': 3e-4,
        'lr_warmup': 500,
        'batch': 32,
        'seed': 0,
        'two_phase': False,
        'phase1_frac': 0.5,
        'threads': 1,
        'precision': 'float32',
    },
    # 输入输出配置
    'io': {
        'out_dir': 'runs/default',
        'checkpoint_every': 1000,
        'plot_every': 1000,
    },
    # 评估配置
    'eval': {
        'split': 'val',
        'max_samples': 0,            # 0 表示全部
        'reconstruct': True,
        'probe': False,
        'probe_steps': 500,
        'exclude_background': True,
    },
    # 采样配置
    'sample': {
        'count': 4,
        'drop_register': False,
    },
}

# 训练与并发常量
MAX_WORKERS = max(1, (os.cpu_count() or 2) - 1)
LOSS_LOG_NAME = 'loss.log'
LOSS_PLOT_NAME = 'loss.ppm'
CHECKPOINT_NAME = 'model.ckpt'
MEMORY_WARNING_PERCENT = 75.0
MEMORY_CRITICAL_PERCENT = 85.0


def _flatten_defaults():
    flat = {}
    for section, values in DEFAULT_CONFIG.items():
        for key, value in values.items():
            flat[f'{section}.{key}'] = value
    return flat


def env_name(key: str) -> str:
    """配置键对应的环境变量名"""
    return ENV_PREFIX + key.upper().replace('.', '_')


def _parse_value(key: str, raw: str, default):
    text = raw.strip()
    if isinstance(default, bool):
        lowered = text.lower()
        if lowered in ('true', '1', 'yes', 'on'):
            return True
        if lowered in ('false', '0', 'no', 'off'):
            return False
        raise ValueError(f"配置项 {key} 需要布尔值: {raw!r}")
    if isinstance(default, int):
        try:
            return int(text)
        except ValueError:
            raise ValueError(f"配置项 {key} 需要整数: {raw!r}") from None
    if isinstance(default, float):
        try:
            return float(text)
        except ValueError:
            raise ValueError(f"配置项 {key} 需要实数: {raw!r}") from None
    if key in ENUM_KEYS:
        allowed = [member.value for member in ENUM_KEYS[key]]
        if text not in allowed:
            raise ValueError(f"配置项 {key} 取值必须是 {allowed} 之一: {raw!r}")
    return text


def _format_value(value) -> str:
    if isinstance(value, bool):
        return 'true' if value else 'false'
    return repr(value) if isinstance(value, float) else str(value)


class Config:
    """扁平键值配置：默认值 < 配置文件 < 环境变量 < 命令行覆盖"""

    def __init__(self, values=None):
        self._defaults = _flatten_defaults()
        self._values = dict(self._defaults)
        for key, value in (values or {}).items():
            self.set(key, value)
        self._validate()

    @classmethod
    def from_text(cls, text: str, source: str = '<text>'):
        config = cls()
        config.update_from_text(text, source)
        return config

    @classmethod
    def load(cls, path=None, overrides=None, use_env: bool = True, base_text=None):
        """加载配置文件、环境变量与命令行覆盖；base_text 为检查点内保存的配置快照"""
        config = cls.from_text(base_text, '<checkpoint>') if base_text is not None else cls()
        if path is not None:
            path = Path(path)
            if not path.exists():
                raise FileNotFoundError(f"配置文件不存在: {path}")
            config.update_from_text(path.read_text(encoding='utf-8'), str(path))
        if use_env:
            for key in config._defaults:
                raw = os.getenv(env_name(key))
                if raw is not None:
                    config.set(key, raw)
        for item in overrides or []:
            if '=' not in item:
                raise ValueError(f"覆盖项格式应为 key=value: {item!r}")
            key, raw = item.split('=', 1)
            config.set(key.strip(), raw)
        config._validate()
        return config

    def update_from_text(self, text: str, source: str = '<text>'):
        for lineno, line in enumerate(text.splitlines(), start=1):
            stripped = line.split('#', 1)[0].strip()
            if not stripped:
                continue
            if '=' not in stripped:
                raise ValueError(f"{source}:{lineno} 无法解析的配置行: {line!r}")
            key, raw = stripped.split('=', 1)
            self.set(key.strip(), raw)
        self._validate()

    def set(self, key: str, value):
        if key not in self._defaults:
            raise ValueError(f"未知配置项: {key}")
        default = self._defaults[key]
        if isinstance(value, str):
            value = _parse_value(key, value, default)
        elif isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        elif key in ENUM_KEYS and isinstance(value, Enum):
            value = value.value
        self._values[key] = value

    def get(self, key: str):
        if key not in self._values:
            raise ValueError(f"未知配置项: {key}")
        return self._values[key]

    def __getitem__(self, key: str):
        return self.get(key)

    def enum(self, key: str):
        return ENUM_KEYS[key](self.get(key))

    def keys(self):
        return list(self._values.keys())

    def copy(self, updates=None):
        values = dict(self._values)
        values.update(updates or {})
        return Config(values)

    def to_text(self) -> str:
        """排序后的配置快照，可由 from_text 重新解析"""
        return ''.join(f'{key} = {_format_value(self._values[key])}\n' for key in sorted(self._values))

    def _validate(self):
        v = self._values
        if v['data.height'] < 16 or v['data.width'] < 16:
            raise ValueError("图像尺寸必须不小于16")
        if not 0 <= v['data.min_objects'] <= v['data.max_objects'] <= 8:
            raise ValueError("物体数量范围必须满足 0 <= min <= max <= 8")
        if not 0.05 <= v['data.scale_min'] <= v['data.scale_max'] <= 0.6:
            raise ValueError("精灵尺寸范围必须位于 [0.05, 0.6]")
        if v['data.clip_length'] < 1:
            raise ValueError("视频片段长度必须不小于1")
        if v['data.background'] not in ('gray', 'gradient'):
            raise ValueError(f"未知背景类型: {v['data.background']}")
        if v['encoder.iters'] < 1:
            raise ValueError("迭代次数必须不小于1")
        if v['guidance.lambda'] < 0:
            raise ValueError("引导权重 lambda 必须非负")
        if not 0.0 <= v['guidance.warmup_frac'] <= 1.0:
            raise ValueError("warmup_frac 必须位于 [0, 1]")
        if not 0.0 <= v['decoder.p_null'] < 1.0:
            raise ValueError("p_null 必须位于 [0, 1)")
        if v['decoder.cfg_scale'] < 0:
            raise ValueError("cfg_scale 必须非负")
        if v['train.precision'] not in ('float32', 'float64'):
            raise ValueError(f"未知精度: {v['train.precision']}")
        if v['train.threads'] < 1:
            raise ValueError("线程数必须不小于1")
        for block in v['decoder.adapter_blocks'].split('+'):
            if block not in ('down', 'mid', 'up', ''):
                raise ValueError(f"未知适配器块: {block}")
        for key, enum_type in ENUM_KEYS.items():
            enum_type(v[key])

    # 派生值
    @property
    def num_slots(self) -> int:
        k = self._values['encoder.num_slots']
        return k if k > 0 else self._values['data.max_objects'] + 1

    @property
    def warmup_iters(self) -> int:
        return int(self._values['guidance.warmup_frac'] * self._values['train.steps'])

    @property
    def out_dir(self) -> Path:
        return Path(self._values['io.out_dir'])

    @property
    def data_dir(self) -> Path:
        return Path(self._values['data.dir'])


def get_memory_usage():
    """获取当前内存使用率"""
    import psutil
    return psutil.virtual_memory().percent


def get_memory_available():
    """获取当前可用内存"""
    import psutil
    return psutil.virtual_memory().available


def get_dynamic_worker_count(requested: int = MAX_WORKERS) -> int:
    """根据当前内存使用情况动态调整并行工作线程数"""
    memory_percent = get_memory_usage()

    if memory_percent > MEMORY_CRITICAL_PERCENT:
        # 内存紧张，单线程
        return 1
    elif memory_percent > MEMORY_WARNING_PERCENT:
        # 内存较紧张，减半
        return max(1, requested // 2)
    return max(1, requested)
