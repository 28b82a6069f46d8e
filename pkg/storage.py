"""
数据集存储模块
PPM/PGM 图像读写、数据集导出导入、清单与属性记录、槽文件、损失曲线图
所有写入均为原子写入（临时文件 + 重命名）
"""
import os
import time
import logging
import tempfile
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import polars as pl

from scene_synth import SceneSample, SpriteKind, SpriteSpec, VideoSample

MANIFEST_NAME = 'manifest.txt'
ATTRIBUTES_NAME = 'attributes.txt'
MANIFEST_SCHEMA = {'path_image': pl.Utf8, 'path_mask': pl.Utf8, 'seed': pl.Int64}
SPRITE_FIELDS = 12

PathLike = Union[str, Path]


def atomic_write_bytes(output_path: PathLike, data: bytes):
    """原子写入：先写临时文件，再替换目标文件"""
    output_path = Path(output_path)
    output_path.parent.mkdir(parents=True, exist_ok=True)
    tmp_path = None
    try:
        with tempfile.NamedTemporaryFile(delete=False, dir=output_path.parent, suffix='.tmp') as tmp_file:
            tmp_path = Path(tmp_file.name)
            tmp_file.write(data)
        os.replace(tmp_path, output_path)
    except OSError as e:
        if tmp_path is not None and tmp_path.exists():
            tmp_path.unlink()
        logging.error(f"写入文件 {output_path} 失败: {str(e)}")
        raise OSError(f"写入文件失败: {output_path}: {e}") from e


def atomic_write_text(output_path: PathLike, text: str):
    atomic_write_bytes(output_path, text.encode('utf-8'))


def _to_bytes(image: np.ndarray) -> np.ndarray:
    if image.dtype == np.uint8:
        return image
    return np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path: PathLike, image: np.ndarray):
    """写入 P6 二进制 PPM；浮点输入视为 [0,1]"""
    data = _to_bytes(image)
    if data.ndim != 3 or data.shape[2] != 3:
        raise ValueError(f"PPM 需要 H×W×3 图像，实际形状 {data.shape}")
    header = f"P6\n{data.shape[1]} {data.shape[0]}\n255\n".encode('ascii')
    atomic_write_bytes(path, header + data.tobytes())


def write_pgm(path: PathLike, mask: np.ndarray):
    """写入 P5 二进制 PGM，像素值即实例编号"""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"PGM 需要 H×W 掩码，实际形状 {mask.shape}")
    if mask.size and (mask.min() < 0 or mask.max() > 255):
        raise ValueError("PGM 掩码取值必须位于 [0, 255]")
    data = mask.astype(np.uint8)
    header = f"P5\n{data.shape[1]} {data.shape[0]}\n255\n".encode('ascii')
    atomic_write_bytes(path, header + data.tobytes())


def _read_netpbm(path: PathLike, magic: bytes) -> Tuple[int, int, bytes]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise OSError(f"读取文件失败: {path}: {e}") from e
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b'#':
            while pos < len(raw) and raw[pos:pos + 1] not in (b'\n', b'\r'):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"文件头不完整: {path}")
        tokens.append(raw[start:pos])
    if tokens[0] != magic:
        raise ValueError(f"格式错误 {path}: 需要 {magic.decode()}，实际 {tokens[0]!r}")
    width, height, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ValueError(f"仅支持8位图像: {path}")
    return width, height, raw[pos + 1:]


def read_ppm(path: PathLike) -> np.ndarray:
    width, height, body = _read_netpbm(path, b'P6')
    if len(body) < width * height * 3:
        raise ValueError(f"图像数据被截断: {path}")
    data = np.frombuffer(body[:width * height * 3], dtype=np.uint8).reshape(height, width, 3)
    return (data.astype(np.float32) / 255.0).astype(np.float32)


def read_pgm(path: PathLike) -> np.ndarray:
    width, height, body = _read_netpbm(path, b'P5')
    if len(body) < width * height:
        raise ValueError(f"掩码数据被截断: {path}")
    return np.frombuffer(body[:width * height], dtype=np.uint8).reshape(height, width).copy()


def format_attributes(index: int, sample: Union[SceneSample, VideoSample]) -> str:
    """属性记录：index seed n L，随后每个精灵 12 个字段与 2L 个轨迹值"""
    tracks = getattr(sample, 'tracks', None)
    length = 0 if tracks is None else tracks.shape[1]
    fields = [str(index), str(sample.seed), str(len(sample.sprites)), str(length)]
    for i, s in enumerate(sample.sprites):
        fields += [str(s.instance_id), s.kind.value, str(s.category),
                   repr(s.position[0]), repr(s.position[1]), repr(s.scale[0]), repr(s.scale[1]),
                   repr(s.velocity[0]), repr(s.velocity[1]),
                   repr(s.color[0]), repr(s.color[1]), repr(s.color[2])]
        if length:
            fields += [repr(float(v)) for v in tracks[i].reshape(-1)]
    return ' '.join(fields)


def parse_attributes(line: str) -> Tuple[int, int, List[SpriteSpec], Optional[np.ndarray]]:
    parts = line.split()
    if len(parts) < 4:
        raise ValueError(f"属性记录字段不足: {line!r}")
    index, seed, count, length = (int(p) for p in parts[:4])
    per_sprite = SPRITE_FIELDS + 2 * length
    if len(parts) != 4 + count * per_sprite:
        raise ValueError(f"属性记录字段数错误: 样本 {index}")
    sprites, tracks = [], np.zeros((count, length, 2), dtype=np.float64)
    for i in range(count):
        f = parts[4 + i * per_sprite: 4 + (i + 1) * per_sprite]
        sprites.append(SpriteSpec(
            kind=SpriteKind(f[1]), color=(float(f[9]), float(f[10]), float(f[11])),
            position=(float(f[3]), float(f[4])), scale=(float(f[5]), float(f[6])),
            velocity=(float(f[7]), float(f[8])), category=int(f[2]), depth=i, instance_id=int(f[0]),
        ))
        if length:
            tracks[i] = np.array([float(v) for v in f[SPRITE_FIELDS:]]).reshape(length, 2)
    return index, seed, sprites, (tracks if length else None)


def export_dataset(samples: Sequence[Union[SceneSample, VideoSample]], directory: PathLike) -> pl.DataFrame:
    """导出数据集，返回清单（按生成顺序）"""
    start_time = time.time()
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"无法创建目录: {directory}: {e}") from e

    rows, records = [], []
    for index, sample in enumerate(samples):
        stem = f'{index:06d}'
        if isinstance(sample, VideoSample):
            clip_dir = Path('clips') / stem
            for t in range(sample.frames.shape[0]):
                write_ppm(directory / clip_dir / f'frame_{t:02d}.ppm', sample.frames[t])
                write_pgm(directory / clip_dir / f'mask_{t:02d}.pgm', sample.masks[t])
            image_path = mask_path = clip_dir.as_posix()
        else:
            image_path = f'images/{stem}.ppm'
            mask_path = f'masks/{stem}.pgm'
            write_ppm(directory / image_path, sample.image)
            write_pgm(directory / mask_path, sample.mask)
        rows.append((image_path, mask_path, sample.seed))
        records.append(format_attributes(index, sample))

    manifest = pl.DataFrame(rows, schema=MANIFEST_SCHEMA,
                            orient='row')
    atomic_write_text(directory / MANIFEST_NAME, manifest.write_csv(separator=' ', include_header=False))
    atomic_write_text(directory / ATTRIBUTES_NAME, ''.join(r + '\n' for r in records))
    logging.info(f"导出数据集 {directory}: {len(rows)} 个样本，耗时 {time.time() - start_time:.2f}s")
    return manifest


def read_manifest(directory: PathLike) -> pl.DataFrame:
    path = Path(directory) / MANIFEST_NAME
    if not path.exists():
        raise FileNotFoundError(f"数据集清单不存在: {path}")
    if path.stat().st_size == 0:
        return pl.DataFrame(schema=MANIFEST_SCHEMA)
    return pl.read_csv(path, separator=' ', has_header=False, schema=MANIFEST_SCHEMA)


def import_dataset(directory: PathLike, limit: int = 0) -> List[Union[SceneSample, VideoSample]]:
    directory = Path(directory)
    manifest = read_manifest(directory)
    attribute_path = directory / ATTRIBUTES_NAME
    attributes = attribute_path.read_text(encoding='utf-8').splitlines() if attribute_path.exists() else []
    if len(attributes) != manifest.height:
        raise ValueError(f"属性记录数 {len(attributes)} 与清单条目数 {manifest.height} 不一致: {directory}")

    samples = []
    for row, line in zip(manifest.iter_rows(named=True), attributes):
        if limit and len(samples) >= limit:
            break
        _, seed, sprites, tracks = parse_attributes(line)
        image_path = directory / row['path_image']
        if image_path.is_dir():
            frame_files = sorted(image_path.glob('frame_*.ppm'))
            frames = np.stack([read_ppm(p) for p in frame_files])
            masks = np.stack([read_pgm(image_path / p.name.replace('frame_', 'mask_').replace('.ppm', '.pgm'))
                              for p in frame_files])
            samples.append(VideoSample(frames=frames, masks=masks, tracks=tracks, sprites=sprites, seed=seed))
        else:
            samples.append(SceneSample(image=read_ppm(image_path), mask=read_pgm(directory / row['path_mask']),
                                       sprites=sprites, seed=seed))
    logging.info(f"导入数据集 {directory}: {len(samples)} 个样本")
    return samples


def write_slot_file(path: PathLike, slots: np.ndarray, register: Optional[np.ndarray] = None):
    """槽文件：首行 'K D'，随后 K 行各 D 个实数；可选 'register' 行"""
    slots = np.asarray(slots, dtype=np.float64)
    lines = [f'{slots.shape[0]} {slots.shape[1]}']
    lines += [' '.join(repr(float(v)) for v in row) for row in slots]
    if register is not None:
        lines.append('register ' + ' '.join(repr(float(v)) for v in np.asarray(register).reshape(-1)))
    atomic_write_text(path, '\n'.join(lines) + '\n')


def read_slot_file(path: PathLike) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    path = Path(path)
    try:
        lines = [l for l in path.read_text(encoding='utf-8').splitlines() if l.strip()]
    except OSError as e:
        raise OSError(f"读取槽文件失败: {path}: {e}") from e
    try:
        k, d = (int(v) for v in lines[0].split())
        slots = np.array([[float(v) for v in line.split()] for line in lines[1:1 + k]], dtype=np.float64)
        register = None
        if len(lines) > 1 + k:
            parts = lines[1 + k].split()
            if parts[0] != 'register':
                raise ValueError("多余的行")
            register = np.array([float(v) for v in parts[1:]], dtype=np.float64)
    except (ValueError, IndexError) as e:
        raise ValueError(f"无效的槽文件 {path}: {e}") from None
    if slots.shape != (k, d) or (register is not None and register.shape != (d,)):
        raise ValueError(f"无效的槽文件 {path}: 形状与声明的 {k}x{d} 不符")
    return slots, register


SERIES_COLORS = ((0, 0, 0), (31, 119, 180), (214, 39, 40))


def write_loss_chart(path: PathLike, iterations: Sequence[int], series: Sequence[Sequence[float]],
                     height: int = 200, width: int = 400):
    """以 PPM 折线图绘制损失曲线（对数纵轴）"""
    canvas = np.full((height, width, 3), 255, dtype=np.uint8)
    margin = 8
    if len(iterations) >= 1:
        values = np.log10(np.maximum(np.asarray(series, dtype=np.float64), 1e-8))
        lo, hi = float(values.min()), float(values.max())
        span_y = max(hi - lo, 1e-12)
        its = np.asarray(iterations, dtype=np.float64)
        span_x = max(its.max() - its.min(), 1.0)
        xs = margin + (its - its.min()) / span_x * (width - 2 * margin - 1)
        for row, color in zip(values, SERIES_COLORS):
            ys = height - margin - 1 - (row - lo) / span_y * (height - 2 * margin - 1)
            for i in range(len(xs)):
                x0, y0 = xs[max(i - 1, 0)], ys[max(i - 1, 0)]
                steps = int(max(abs(xs[i] - x0), abs(ys[i] - y0))) + 1
                px = np.rint(np.linspace(x0, xs[i], steps)).astype(int)
                py = np.rint(np.linspace(y0, ys[i], steps)).astype(int)
                canvas[py, px] = color
    write_ppm(path, canvas)
