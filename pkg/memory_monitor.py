"""
内存监控模块
训练与数据生成期间在后台线程中检查系统内存，超过阈值时记录警告
"""
import logging
from threading import Event, Thread
from typing import Callable, List, Optional

import psutil

from config import MEMORY_CRITICAL_PERCENT, MEMORY_WARNING_PERCENT, get_memory_usage


class MemoryMonitor:
    """
    内存监控器
    后台守护线程按固定间隔检查内存使用率，可作为上下文管理器使用
    """

    def __init__(self, warning_threshold: float = MEMORY_WARNING_PERCENT,
                 critical_threshold: float = MEMORY_CRITICAL_PERCENT,
                 check_interval: float = 30.0, alert_callback: Optional[Callable] = None):
        """
        Args:
            warning_threshold: 警告阈值百分比
            critical_threshold: 严重阈值百分比
            check_interval: 检查间隔（秒）
            alert_callback: 警告回调 (level, percent, message)
        """
        if not 0 < warning_threshold <= critical_threshold <= 100:
            raise ValueError(f"无效的内存阈值: {warning_threshold}/{critical_threshold}")
        self.warning_threshold = warning_threshold
        self.critical_threshold = critical_threshold
        self.check_interval = check_interval
        self.alert_callback = alert_callback
        self.alerts: List[str] = []
        self._stop_event = Event()
        self._monitor_thread = None

    @property
    def is_monitoring(self) -> bool:
        return self._monitor_thread is not None

    def start_monitoring(self):
        if self._monitor_thread is None:
            self._stop_event.clear()
            self._monitor_thread = Thread(target=self._monitor_loop, daemon=True)
            self._monitor_thread.start()
            logging.info(f"内存监控已启动，检查间隔: {self.check_interval}秒")

    def stop_monitoring(self):
        if self._monitor_thread is not None:
            self._stop_event.set()
            self._monitor_thread.join()
            self._monitor_thread = None
            logging.info("内存监控已停止")

    def __enter__(self):
        self.start_monitoring()
        return self

    def __exit__(self, exc_type, exc, tb):
        self.stop_monitoring()
        return False

    def check(self, memory_percent: Optional[float] = None) -> Optional[str]:
        """检查一次内存；超过阈值时返回告警级别"""
        if memory_percent is None:
            memory_percent = get_memory_usage()
        if memory_percent >= self.critical_threshold:
            self._trigger_alert('critical', memory_percent)
            return 'critical'
        if memory_percent >= self.warning_threshold:
            self._trigger_alert('warning', memory_percent)
            return 'warning'
        return None

    def _monitor_loop(self):
        while not self._stop_event.is_set():
            try:
                self.check()
            except Exception as e:
                logging.error(f"内存监控出错: {str(e)}")
            if self._stop_event.wait(timeout=self.check_interval):
                break

    def _trigger_alert(self, level: str, memory_percent: float):
        threshold = self.critical_threshold if level == 'critical' else self.warning_threshold
        message = f"内存使用率过高: {memory_percent:.1f}% (阈值: {threshold}%)"
        if level == 'warning':
            logging.warning(message)
        else:
            logging.error(message)
        self.alerts.append(message)
        if len(self.alerts) > 100:
            self.alerts = self.alerts[-50:]
        if self.alert_callback:
            try:
                self.alert_callback(level, memory_percent, message)
            except Exception as e:
                logging.error(f"执行内存警告回调时出错: {str(e)}")


def log_memory_usage(context: str) -> float:
    """记录一次内存快照，返回使用率"""
    memory = psutil.virtual_memory()
    process_mb = psutil.Process().memory_info().rss / (1024 * 1024)
    logging.info(f"{context}，内存使用率: {memory.percent}%，进程占用: {process_mb:.1f}MB")
    return memory.percent
