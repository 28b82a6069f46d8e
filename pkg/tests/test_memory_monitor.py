import unittest
import sys
import os
from unittest import mock

# Add the project root to the Python path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

from memory_monitor import MemoryMonitor, log_memory_usage


class TestMemoryMonitor(unittest.TestCase):
    """Test cases for the background memory monitor"""

    def test_threshold_levels(self):
        calls = []
        monitor = MemoryMonitor(70.0, 90.0, alert_callback=lambda *args: calls.append(args[0]))
        self.assertIsNone(monitor.check(50.0))
        with self.assertLogs(level='WARNING'):
            self.assertEqual(monitor.check(75.0), 'warning')
        with self.assertLogs(level='ERROR'):
            self.assertEqual(monitor.check(95.0), 'critical')
        self.assertEqual(calls, ['warning', 'critical'])
        self.assertEqual(len(monitor.alerts), 2)

    def test_callback_errors_are_logged(self):
        def broken(*args):
            raise RuntimeError('boom')

        monitor = MemoryMonitor(70.0, 90.0, alert_callback=broken)
        with self.assertLogs(level='ERROR') as logs:
            monitor.check(80.0)
        self.assertTrue(any('boom' in line for line in logs.output))

    def test_invalid_thresholds(self):
        with self.assertRaises(ValueError):
            MemoryMonitor(90.0, 80.0)
        with self.assertRaises(ValueError):
            MemoryMonitor(0.0, 80.0)

    def test_context_manager_starts_and_stops(self):
        with mock.patch('memory_monitor.get_memory_usage', return_value=10.0):
            with MemoryMonitor(check_interval=0.01) as monitor:
                self.assertTrue(monitor.is_monitoring)
            self.assertFalse(monitor.is_monitoring)

    def test_log_memory_usage(self):
        with self.assertLogs(level='INFO'):
            percent = log_memory_usage('测试')
        self.assertGreaterEqual(percent, 0.0)


if __name__ == '__main__':
    unittest.main()
