import os
import random
import sys

import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from pmem import Backend  # noqa: E402
from pool import PoolOptions, pool_create  # noqa: E402

# 桌面规模；PGL_TEST_SCALE 放大随机试验次数
SCALE = max(1, int(os.getenv('PGL_TEST_SCALE', '1')))

# 4 MiB 池、16 行、16 KiB 块：单区，14 列块
SMALL = dict(pool_size=4 << 20, rows_per_zone=16, chunk_size=16384, tx_slots=4,
             log_per_zone=256 << 10, overflow_chunks=2)

# 64 MiB、16 行、256 KiB 块：单页介质错误演练用
DRILL = dict(pool_size=64 << 20, rows_per_zone=16, chunk_size=262144, tx_slots=8,
             log_per_zone=1 << 20, overflow_chunks=8)


def pytest_configure(config):
    config.addinivalue_line('markers', 'slow: 按验收规模运行的长测试，可用 -m "not slow" 跳过')


def make_options(mode='mlpc', backend=Backend.SIMULATED, **kwargs):
    kwargs.setdefault('start_scrub_worker', False)
    return PoolOptions(mode=mode, backend=backend, **kwargs)


def make_pool(path=None, mode='mlpc', backend=Backend.SIMULATED, geometry=None, **kwargs):
    layout = dict(SMALL, **(geometry or {}))
    size = layout.pop('pool_size')
    return pool_create(path, size, options=make_options(mode, backend, **kwargs), **layout)


def populate(pool, count, seed=0, max_size=2048, per_tx=8):
    """分配 count 个随机大小、随机内容的对象，返回 {ref: payload}"""
    rng = random.Random(seed)
    objects = {}
    remaining = count
    while remaining:
        batch = min(per_tx, remaining)
        with pool.transaction() as tx:
            for _ in range(batch):
                size = rng.randint(8, max_size)
                data = rng.randbytes(size)
                ref = tx.alloc(size, type_id=7)
                tx.open(ref).write(0, data)
                objects[ref] = data
        remaining -= batch
    return objects


@pytest.fixture
def sim_pool():
    pool = make_pool()
    yield pool
    pool.close()


@pytest.fixture
def file_pool(tmp_path):
    pool = make_pool(str(tmp_path / 'pool.pgl'), backend=Backend.FILE_MAPPED)
    yield pool
    pool.close()


@pytest.fixture
def pool_factory():
    created = []

    def factory(mode='mlpc', **kwargs):
        pool = make_pool(mode=mode, **kwargs)
        created.append(pool)
        return pool

    yield factory
    for pool in created:
        pool.close()
