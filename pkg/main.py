import sys
import logging
import unittest
from pathlib import Path
from typing import Dict, List, Optional, Tuple

from config import APP_DIR, TESTS_DIR, Config
from checkpoint import checkpoint_load
from diagnostics import TOLERANCES, gradient_suite
from evaluation import cmd_edit, cmd_eval, cmd_gen_data, cmd_sample, model_from_checkpoint
from training import cmd_train

COMMANDS = ('gen-data', 'train', 'eval', 'sample', 'edit', 'grad-check', 'selftest')
# 各命令接受的选项（是否需要取值）
OPTIONS = {
    'gen-data': {'--out': True},
    'train': {'--data': True},
    'eval': {'--checkpoint': True, '--data': True},
    'sample': {'--checkpoint': True, '--seed': True, '--source': True, '--slots': True, '--index': True,
               '--data': True},
    'edit': {'--checkpoint': True, '--script': True, '--seed': True, '--index': True, '--donor': True,
             '--data': True},
    'grad-check': {},
    'selftest': {},
}
COMMON_OPTIONS = {'--config': True, '--set': True, '--threads': True}


class UsageError(ValueError):
    """命令行用法错误"""


def setup_logging(log_dir: Optional[Path] = None):
    """设置日志系统"""
    try:
        log_dir = Path(log_dir) if log_dir is not None else APP_DIR / 'logs'
        log_dir.mkdir(parents=True, exist_ok=True)

        logger = logging.getLogger()
        logger.setLevel(logging.INFO)
        for handler in list(logger.handlers):
            logger.removeHandler(handler)
            handler.close()

        # 每天一个日志文件，最多保留7天
        from logging.handlers import TimedRotatingFileHandler
        file_handler = TimedRotatingFileHandler(
            log_dir / 'app.log',
            when='midnight',
            interval=1,
            backupCount=7,
            encoding='utf-8'
        )
        file_handler.setLevel(logging.INFO)

        console_handler = logging.StreamHandler()
        console_handler.setLevel(logging.INFO)

        formatter = logging.Formatter(
            '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
        )
        file_handler.setFormatter(formatter)
        console_handler.setFormatter(formatter)

        logger.addHandler(file_handler)
        logger.addHandler(console_handler)

        logging.info("日志系统初始化完成")

    except Exception as e:
        print(f"日志系统初始化失败: {str(e)}")
        raise


def parse_args(argv: List[str]) -> Tuple[str, Dict[str, str], List[str]]:
    """解析 `<command> [--option value ...]`，返回 (命令, 选项, --set 覆盖列表)"""
    if not argv:
        raise UsageError("缺少命令")
    command = argv[0]
    if command not in COMMANDS:
        raise UsageError(f"未知命令: {command}")
    allowed = {**COMMON_OPTIONS, **OPTIONS[command]}
    options: Dict[str, str] = {}
    overrides: List[str] = []
    index = 1
    while index < len(argv):
        name = argv[index]
        if name not in allowed:
            raise UsageError(f"命令 {command} 不支持选项: {name}")
        if index + 1 >= len(argv):
            raise UsageError(f"选项 {name} 需要取值")
        value = argv[index + 1]
        if name == '--set':
            overrides.append(value)
        else:
            options[name] = value
        index += 2
    return command, options, overrides


def _int_option(options: Dict[str, str], name: str, default: int) -> int:
    if name not in options:
        return default
    try:
        return int(options[name])
    except ValueError:
        raise UsageError(f"选项 {name} 需要整数: {options[name]!r}") from None


def build_config(options: Dict[str, str], overrides: List[str], base_text: Optional[str] = None) -> Config:
    """
    配置优先级：默认值 < 配置文件（或检查点内的配置快照）< 环境变量 < --set

    未提供 --config 且有检查点时，使用检查点保存的配置
    """
    sets = list(overrides)
    if '--threads' in options:
        sets.append(f"train.threads={_int_option(options, '--threads', 1)}")
    if '--config' in options:
        return Config.load(options['--config'], sets)
    return Config.load(None, sets, base_text=base_text)


def run_gen_data(config: Config, options: Dict[str, str]):
    logging.info("开始生成数据集...")
    try:
        out = cmd_gen_data(config, Path(options['--out']) if '--out' in options else None)
        logging.info(f"数据集已写入: {out}")
    except Exception as e:
        logging.error(f"数据集生成失败: {str(e)}")
        raise


def run_train(config: Config, options: Dict[str, str]):
    logging.info("开始训练...")
    try:
        result = cmd_train(config, Path(options['--data']) if '--data' in options else None)
        logging.info(f"训练结束，检查点: {result.checkpoint_path}")
    except Exception as e:
        logging.error(f"训练失败: {str(e)}")
        raise


def _require(options: Dict[str, str], name: str) -> str:
    if name not in options:
        raise UsageError(f"缺少必需选项 {name}")
    return options[name]


def run_with_checkpoint(command: str, options: Dict[str, str], overrides: List[str]):
    ckpt = checkpoint_load(_require(options, '--checkpoint'))
    config = build_config(options, overrides, ckpt.config_text)
    setup_logging(config.out_dir / 'logs')
    logging.info(f"开始 {command}，检查点迭代 {ckpt.iteration}")
    data_dir = Path(options['--data']) if '--data' in options else None
    try:
        model = model_from_checkpoint(ckpt, config)
        if command == 'eval':
            cmd_eval(config, model, data_dir)
        elif command == 'sample':
            slots = options.get('--slots')
            cmd_sample(config, model, seed=_int_option(options, '--seed', 0),
                       source=options.get('--source', 'image'), slots_file=Path(slots) if slots else None,
                       index=_int_option(options, '--index', 0), data_dir=data_dir)
        else:
            script = Path(_require(options, '--script'))
            if not script.exists():
                raise FileNotFoundError(f"编辑脚本不存在: {script}")
            cmd_edit(config, model, script.read_text(encoding='utf-8'), seed=_int_option(options, '--seed', 0),
                     index=_int_option(options, '--index', 0), donor=_int_option(options, '--donor', 1),
                     data_dir=data_dir)
    except Exception as e:
        logging.error(f"{command} 失败: {str(e)}")
        raise


def run_grad_check():
    logging.info("开始梯度校验...")
    results = gradient_suite()
    failed = {name: err for name, err in results.items() if not err < TOLERANCES[name]}
    if failed:
        logging.error(f"梯度校验未通过: {failed}")
        raise RuntimeError(f"梯度校验未通过: {sorted(failed)}")
    logging.info(f"梯度校验全部通过（{len(results)} 条路径）")


def run_selftest() -> bool:
    suite = unittest.defaultTestLoader.discover(str(TESTS_DIR))
    result = unittest.TextTestRunner(verbosity=1).run(suite)
    return result.wasSuccessful()


def main(argv: Optional[List[str]] = None) -> int:
    """主函数，返回退出码：0 成功，1 运行错误，2 用法错误"""
    argv = sys.argv[1:] if argv is None else argv
    try:
        command, options, overrides = parse_args(argv)
        if command in ('eval', 'sample', 'edit'):
            run_with_checkpoint(command, options, overrides)
            return 0
        config = build_config(options, overrides)
        setup_logging(config.out_dir / 'logs')
        if command == 'gen-data':
            run_gen_data(config, options)
        elif command == 'train':
            run_train(config, options)
        elif command == 'grad-check':
            run_grad_check()
        else:
            return 0 if run_selftest() else 1
        return 0
    except UsageError as e:
        print(f"UsageError: {e}", file=sys.stderr)
        print(f"用法: python main.py <{'|'.join(COMMANDS)}> [--config FILE] [--set key=value ...] "
              f"[--threads N] [选项]", file=sys.stderr)
        return 2
    except Exception as e:
        print(f"{type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
