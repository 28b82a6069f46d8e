"""
命令实现：数据生成、评估、采样与编辑
"""
import time
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import polars as pl
import torch

from config import Config, DecoderPath, get_dynamic_worker_count
from checkpoint import Checkpoint, restore
from broadcast_decoder import PerSlotRender, alpha_composite
from diffusion_decoder import ConditioningBundle, EditKind, EditOp, edit_bundle
from metrics import build_report, fg_ari, format_report, mbo, miou, psnr, report_summary, ssim
from models import Encoding, SlotModel, VideoEncoding, VideoModel, build_model
from numerics import set_precision
from probing import evaluate_probe, fit_probe, match_slots_to_objects, probe_targets, split_indices
from scene_synth import SceneSample, VideoSample, config_from, generate_split, split_seeds
from temporal import VideoConditioning
from storage import atomic_write_text, export_dataset, read_slot_file, write_pgm, write_ppm
from training import load_split, stack_samples, stack_valid

EVAL_BATCH = 16
DONOR_SEED_OFFSET = 7919


def cmd_gen_data(config: Config, out_dir: Optional[Path] = None) -> Path:
    """按配置生成 train/val 划分"""
    start_time = time.time()
    out_dir = Path(out_dir) if out_dir is not None else config.data_dir
    cfg = config_from(config)
    video = config['data.video']
    workers = get_dynamic_worker_count()
    for split, size in (('train', config['data.train_size']), ('val', config['data.val_size'])):
        seeds = split_seeds(config['data.seed'], split, size)
        samples = generate_split(seeds, cfg, video=video, workers=workers)
        export_dataset(samples, out_dir / split)
    logging.info(f"数据集生成完成: {out_dir}，耗时 {time.time() - start_time:.2f}s")
    return out_dir


def model_from_checkpoint(ckpt: Checkpoint, config: Config) -> SlotModel:
    set_precision(config['train.precision'])
    model = build_model(config)
    restore(ckpt, model)
    model.eval()
    return model


def to_image(tensor: torch.Tensor) -> np.ndarray:
    """[3, H, W] → H×W×3"""
    return tensor.detach().permute(1, 2, 0).cpu().numpy()


def score_segmentation(gt: np.ndarray, pred: np.ndarray, categories: Mapping[int, int],
                       exclude_background: bool = True) -> Dict[str, float]:
    return {
        'fg_ari': fg_ari(gt, pred),
        'miou': miou(gt, pred, exclude_background),
        'mbo_instance': mbo(gt, pred, 'instance', exclude_background=exclude_background),
        'mbo_class': mbo(gt, pred, 'class', categories, exclude_background),
    }


def score_reconstruction(reference: np.ndarray, output: np.ndarray) -> Dict[str, float]:
    """图像 H×W×3 或片段 L×H×W×3（逐帧平均）"""
    if reference.ndim == 3:
        reference, output = reference[None], output[None]
    return {
        'psnr': float(np.mean([psnr(a, b) for a, b in zip(reference, output)])),
        'ssim': float(np.mean([ssim(a, b) for a, b in zip(reference, output)])),
    }


@dataclass
class EncodedBatch:
    masks: torch.Tensor     # [B, K, H, W] 或 [B, L, K, H, W]
    cond: Union[ConditioningBundle, VideoConditioning]
    slots: torch.Tensor
    encoding: Union[Encoding, VideoEncoding]


def encode_batch(model: SlotModel, batch: torch.Tensor, rng: torch.Generator,
                 valid: Optional[torch.Tensor] = None) -> EncodedBatch:
    """valid: 视频批次的 [B, L] 有效帧掩码，补齐帧不参与时间聚合"""
    if isinstance(model, VideoModel):
        enc = model.encode_frames(batch, rng)
        return EncodedBatch(masks=model.masks(enc), cond=model.condition_frames(enc, valid), slots=enc.slots,
                            encoding=enc)
    enc = model.encode(batch, rng)
    return EncodedBatch(masks=model.masks(enc), cond=model.condition(enc), slots=enc.slots, encoding=enc)


def frame_condition(cond, t: int, drop_register: bool = False) -> ConditioningBundle:
    frame = torch.full((cond.slots.shape[0],), t, dtype=torch.long)
    bundle = cond.frame_bundle(frame)
    bundle.drop_register = drop_register
    return bundle


def decode_batch(model: SlotModel, batch: torch.Tensor, encoded: EncodedBatch, rng: torch.Generator,
                 drop_register: bool = False) -> torch.Tensor:
    """重建：广播路径直接合成，扩散路径以编码结果为条件采样；形状与 batch 相同"""
    count = batch.shape[0]
    if model.path is DecoderPath.BROADCAST:
        if isinstance(model, VideoModel):
            renders = model.render_frames(encoded.encoding)
            return torch.stack([alpha_composite(r)[0].permute(0, 3, 1, 2) for r in renders], dim=1)
        return alpha_composite(model.render(encoded.encoding))[0].permute(0, 3, 1, 2)
    if isinstance(model, VideoModel):
        frames = [model.sample(frame_condition(encoded.cond, t, drop_register), rng, count)
                  for t in range(batch.shape[1])]
        return torch.stack(frames, dim=1)
    cond = encoded.cond
    cond.drop_register = drop_register
    return model.sample(cond, rng, count)


def _probe_metrics(features: List[np.ndarray], sprites: List, steps: int, seed: int) -> Dict[str, float]:
    if len(features) < 5:
        logging.warning(f"匹配到的槽过少（{len(features)}），跳过探针评估")
        return {}
    x = torch.from_numpy(np.stack(features)).to(torch.get_default_dtype())
    targets = probe_targets(sprites)
    train, test = split_indices(len(features), 0.8, seed)
    results = {}
    for kind, name in (('category', 'probe_category_acc'), ('position', 'probe_position_mse'),
                       ('bbox', 'probe_bbox_mse')):
        probe = fit_probe(x[train], targets[kind][train], kind, steps, seed)
        results[name] = evaluate_probe(probe, x[test], targets[kind][test])
    return results


def cmd_eval(config: Config, model: SlotModel, data_dir: Optional[Path] = None) -> pl.DataFrame:
    """在验证集上评估编码器掩码（及重建），返回指标报告"""
    start_time = time.time()
    split = config['eval.split']
    data_dir = Path(data_dir) if data_dir is not None else config.data_dir
    samples = load_split(data_dir / split, config, config['eval.max_samples'])
    if not samples:
        raise ValueError(f"评估数据为空: {data_dir / split}")
    rng = torch.Generator().manual_seed(config['train.seed'])
    exclude_background = config['eval.exclude_background']
    reconstruct = config['eval.reconstruct']
    per_sample: Dict[str, List[float]] = {}
    probe_features, probe_sprites = [], []

    with torch.no_grad():
        for start in range(0, len(samples), EVAL_BATCH):
            chunk = samples[start:start + EVAL_BATCH]
            batch = stack_samples(chunk)
            valid = stack_valid(chunk)
            encoded = encode_batch(model, batch, rng, valid)
            segmentation = encoded.masks.argmax(dim=-3).cpu().numpy()
            outputs = decode_batch(model, batch, encoded, rng) if reconstruct else None
            for i, sample in enumerate(chunk):
                if isinstance(sample, VideoSample):
                    # 只评估有效帧
                    keep = sample.frame_valid
                    gt, predicted = sample.masks[keep], segmentation[i][keep]
                else:
                    gt, predicted = sample.mask, segmentation[i]
                scores = score_segmentation(gt, predicted, sample.categories, exclude_background)
                if outputs is not None:
                    if isinstance(sample, VideoSample):
                        reference = sample.frames[keep]
                        output = outputs[i].permute(0, 2, 3, 1).cpu().numpy()[keep]
                    else:
                        reference, output = sample.image, to_image(outputs[i])
                    scores.update(score_reconstruction(reference, output))
                for name, value in scores.items():
                    per_sample.setdefault(name, []).append(value)
                if config['eval.probe'] and isinstance(sample, SceneSample):
                    by_id = {s.instance_id: s for s in sample.sprites}
                    for label, slot in match_slots_to_objects(encoded.masks[i].cpu().numpy(), gt):
                        probe_features.append(encoded.slots[i, slot].cpu().numpy())
                        probe_sprites.append(by_id[label])

    if config['eval.probe']:
        for name, value in _probe_metrics(probe_features, probe_sprites, config['eval.probe_steps'],
                                          config['train.seed']).items():
            per_sample[name] = [value]
    report = build_report(per_sample, split)
    out_dir = config.out_dir
    atomic_write_text(out_dir / f'eval_{split}.txt', format_report(report))
    for row in report_summary(report).iter_rows(named=True):
        logging.info(f"评估 {row['split']} {row['metric']}: {row['value']:.4f}")
    logging.info(f"评估完成: {len(samples)} 个样本，耗时 {time.time() - start_time:.2f}s")
    return report


def _write_masks(out_dir: Path, stem: str, masks: torch.Tensor) -> List[Path]:
    paths = []
    for k in range(masks.shape[0]):
        path = out_dir / f'{stem}_mask_{k}.pgm'
        write_pgm(path, np.rint(masks[k].clamp(0, 1).cpu().numpy() * 255).astype(np.uint8))
        paths.append(path)
    return paths


def _write_pair(out_dir: Path, stem: str, left: np.ndarray, right: np.ndarray) -> List[Path]:
    """单独的输入/输出图像与左右并排图"""
    paths = [out_dir / f'{stem}_input.ppm', out_dir / f'{stem}_output.ppm', out_dir / f'{stem}_pair.ppm']
    write_ppm(paths[0], left)
    write_ppm(paths[1], right)
    write_ppm(paths[2], np.concatenate([left, right], axis=1))
    return paths


def _frames(tensor: torch.Tensor) -> List[np.ndarray]:
    """[3, H, W] 或 [L, 3, H, W] → 帧列表"""
    if tensor.dim() == 3:
        return [to_image(tensor)]
    return [to_image(frame) for frame in tensor]


def bundle_from_slot_file(path: Path, model: SlotModel) -> ConditioningBundle:
    slots, register = read_slot_file(path)
    expected = model.denoiser.slot_dim
    if slots.shape[1] != expected:
        raise ValueError(f"槽文件维度 {slots.shape[1]} 与模型条件维度 {expected} 不符: {path}")
    slot_tensor = torch.from_numpy(slots).to(torch.get_default_dtype())[None]
    if register is None:
        register_tensor = slot_tensor.mean(dim=1, keepdim=True)
    else:
        register_tensor = torch.from_numpy(register).to(torch.get_default_dtype()).reshape(1, 1, -1)
    if register_tensor.shape[-1] != model.denoiser.register_dim:
        raise ValueError(f"注册令牌维度 {register_tensor.shape[-1]} 与模型不符: {path}")
    return ConditioningBundle(slots=slot_tensor, register=register_tensor)


def cmd_sample(config: Config, model: SlotModel, seed: int = 0, source: str = 'image',
               slots_file: Optional[Path] = None, index: int = 0, data_dir: Optional[Path] = None) -> List[Path]:
    """编码输入（或读取槽文件）后采样，输出输入/输出/掩码文件"""
    out_dir = config.out_dir / 'samples'
    drop_register = config['sample.drop_register']
    written: List[Path] = []
    if source == 'slots':
        if slots_file is None:
            raise ValueError("--source slots 需要 --slots 文件")
        model.require_diffusion()
        cond = bundle_from_slot_file(Path(slots_file), model)
        cond.drop_register = drop_register
        with torch.no_grad():
            output = model.sample(cond, torch.Generator().manual_seed(seed), 1)[0]
        path = out_dir / f'slots_{seed}_output.ppm'
        write_ppm(path, to_image(output))
        return [path]
    if source != 'image':
        raise ValueError(f"未知采样来源: {source}")

    data_dir = Path(data_dir) if data_dir is not None else config.data_dir
    samples = load_split(data_dir / config['eval.split'], config)
    count = config['sample.count']
    if not 0 <= index < len(samples):
        raise ValueError(f"样本索引越界: {index}（共 {len(samples)} 个）")
    with torch.no_grad():
        for offset, sample in enumerate(samples[index:index + count]):
            rng = torch.Generator().manual_seed(seed + offset)
            batch = stack_samples([sample])
            encoded = encode_batch(model, batch, rng, stack_valid([sample]))
            output = decode_batch(model, batch, encoded, rng, drop_register)[0]
            inputs = _frames(batch[0])
            for t, (left, right) in enumerate(zip(inputs, _frames(output))):
                stem = f'sample_{index + offset:06d}' + (f'_f{t:02d}' if len(inputs) > 1 else '')
                written += _write_pair(out_dir, stem, left, right)
                masks = encoded.masks[0, t] if encoded.masks.dim() == 5 else encoded.masks[0]
                written += _write_masks(out_dir, stem, masks)
    logging.info(f"采样完成: 输出 {len(written)} 个文件到 {out_dir}")
    return written


@dataclass
class EditLine:
    kind: EditKind
    index: Optional[int]
    donor_index: Optional[int]
    lineno: int


def parse_edit_script(text: str) -> List[EditLine]:
    """每行一个操作：remove j / replace j d / add d / mix j d；# 开头为注释"""
    edits = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        parts = line.split('#', 1)[0].split()
        if not parts:
            continue
        op, args = parts[0], parts[1:]
        expected = {'remove': 1, 'replace': 2, 'mix': 2, 'add': 1}
        if op not in expected:
            raise ValueError(f"编辑脚本第 {lineno} 行: 未知操作 {op!r}")
        if len(args) != expected[op]:
            raise ValueError(f"编辑脚本第 {lineno} 行: {op} 需要 {expected[op]} 个参数")
        try:
            numbers = [int(a) for a in args]
        except ValueError:
            raise ValueError(f"编辑脚本第 {lineno} 行: 槽索引必须是整数") from None
        if op == 'remove':
            edits.append(EditLine(EditKind.REMOVE, numbers[0], None, lineno))
        elif op == 'add':
            edits.append(EditLine(EditKind.ADD, None, numbers[0], lineno))
        else:
            edits.append(EditLine(EditKind.REPLACE, numbers[0], numbers[1], lineno))
    return edits


def _check_donor(edit: EditLine, donor_slots: int):
    if edit.donor_index is not None and not 0 <= edit.donor_index < donor_slots:
        raise ValueError(f"编辑脚本第 {edit.lineno} 行: 供体槽索引越界: {edit.donor_index}（共 {donor_slots} 个槽）")


def apply_render_edits(render: PerSlotRender, donor: PerSlotRender, edits: Sequence[EditLine]) -> PerSlotRender:
    """广播路径：在逐槽渲染上执行编辑，合成恒等式精确成立"""
    for edit in edits:
        _check_donor(edit, donor.rgb.shape[1])
        k = render.rgb.shape[1]
        if edit.kind is not EditKind.ADD and not 0 <= edit.index < k:
            raise ValueError(f"编辑脚本第 {edit.lineno} 行: 槽索引越界: {edit.index}（共 {k} 个槽）")
        if edit.kind is EditKind.REMOVE:
            if k == 1:
                raise ValueError("不能删除唯一的槽")
            render = render.drop(edit.index)
            continue
        piece = PerSlotRender(donor.rgb[:, edit.donor_index:edit.donor_index + 1],
                              donor.alpha_logits[:, edit.donor_index:edit.donor_index + 1])
        if edit.kind is EditKind.ADD:
            render = render.concat(piece)
        else:
            j = edit.index
            render = PerSlotRender(
                torch.cat([render.rgb[:, :j], piece.rgb, render.rgb[:, j + 1:]], dim=1),
                torch.cat([render.alpha_logits[:, :j], piece.alpha_logits, render.alpha_logits[:, j + 1:]], dim=1),
            )
    return render


def apply_bundle_edits(cond: ConditioningBundle, donor: ConditioningBundle, edits: Sequence[EditLine],
                       recompute_register: bool) -> ConditioningBundle:
    for edit in edits:
        _check_donor(edit, donor.slots.shape[1])
        slot = None if edit.donor_index is None else donor.slots[:, edit.donor_index]
        try:
            cond = edit_bundle(cond, EditOp(edit.kind, edit.index, slot), recompute_register)
        except ValueError as e:
            raise ValueError(f"编辑脚本第 {edit.lineno} 行: {e}") from None
    return cond


def cmd_edit(config: Config, model: SlotModel, script: str, seed: int = 0, index: int = 0, donor: int = 1,
             data_dir: Optional[Path] = None) -> Tuple[List[np.ndarray], List[np.ndarray]]:
    """
    槽空间编辑：对基础样本的条件执行脚本中的编辑，返回 (编辑前, 编辑后) 帧列表

    扩散路径编辑前后使用相同的采样噪声；视频对每一帧的条件执行同样的编辑
    """
    edits = parse_edit_script(script)
    data_dir = Path(data_dir) if data_dir is not None else config.data_dir
    samples = load_split(data_dir / config['eval.split'], config)
    for name, value in (('基础', index), ('供体', donor)):
        if not 0 <= value < len(samples):
            raise ValueError(f"{name}样本索引越界: {value}（共 {len(samples)} 个）")
    drop_register = config['sample.drop_register']
    rng = torch.Generator().manual_seed(seed)
    donor_rng = torch.Generator().manual_seed(seed + DONOR_SEED_OFFSET)

    with torch.no_grad():
        base_batch = stack_samples([samples[index]])
        base = encode_batch(model, base_batch, rng, stack_valid([samples[index]]))
        donor_enc = encode_batch(model, stack_samples([samples[donor]]), donor_rng, stack_valid([samples[donor]]))
        if model.path is DecoderPath.BROADCAST:
            if isinstance(model, VideoModel):
                pairs = zip(model.render_frames(base.encoding), model.render_frames(donor_enc.encoding))
            else:
                pairs = [(model.render(base.encoding), model.render(donor_enc.encoding))]
            before, after = [], []
            for render, donor_render in pairs:
                before.append(to_image(alpha_composite(render)[0][0].permute(2, 0, 1)))
                edited = apply_render_edits(render, donor_render, edits)
                after.append(to_image(alpha_composite(edited)[0][0].permute(2, 0, 1)))
        else:
            state = rng.get_state()
            if isinstance(model, VideoModel):
                bundles = [(frame_condition(base.cond, t, drop_register), frame_condition(donor_enc.cond, t))
                           for t in range(base_batch.shape[1])]
                recompute = False
            else:
                base.cond.drop_register = drop_register
                bundles = [(base.cond, donor_enc.cond)]
                recompute = model.recompute_register
            edited = [apply_bundle_edits(cond, donor_cond, edits, recompute) for cond, donor_cond in bundles]
            rng.set_state(state)
            before = [to_image(model.sample(cond, rng, 1)[0]) for cond, _ in bundles]
            rng.set_state(state)
            after = [to_image(model.sample(cond, rng, 1)[0]) for cond in edited]

    out_dir = config.out_dir / 'edits'
    for t, (left, right) in enumerate(zip(before, after)):
        stem = f'edit_{index:06d}' + (f'_f{t:02d}' if len(before) > 1 else '')
        write_ppm(out_dir / f'{stem}_before.ppm', left)
        write_ppm(out_dir / f'{stem}_after.ppm', right)
        write_ppm(out_dir / f'{stem}_pair.ppm', np.concatenate([left, right], axis=1))
    logging.info(f"编辑完成: {len(edits)} 个操作，输出 {len(before)} 对图像到 {out_dir}")
    return before, after
