"""
pytest 共用設定

標記為 slow 的測試（完整預設訓練量）只在加上 --runslow 時執行。
"""

import pytest


def pytest_addoption(parser):
    parser.addoption('--runslow', action='store_true', default=False, help='執行 slow 測試')


def pytest_configure(config):
    config.addinivalue_line('markers', 'slow: 完整訓練量的慢速測試')


def pytest_collection_modifyitems(config, items):
    if config.getoption('--runslow'):
        return
    skip_slow = pytest.mark.skip(reason='需要 --runslow')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)
