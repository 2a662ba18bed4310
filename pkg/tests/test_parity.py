import random
import threading

import numpy as np
import pytest

from conftest import populate
from errors import StoreError
from pmem import Backend
from parity import ReadWriteLock, column_pieces, delta_compute, parity_check_zone
from tx import pgl_read


def test_delta_is_xor():
    delta = delta_compute(b'\x0f\xf0\xaa', b'\xff\xff\xaa', column_offset=12)
    assert delta.column_offset == 12
    assert delta.delta.tolist() == [0xF0, 0x0F, 0x00]
    with pytest.raises(StoreError):
        delta_compute(b'ab', b'abc')


def test_column_pieces_split_at_row_boundary(sim_pool):
    header = sim_pool.header
    start = header.zone_offset(0) + header.row_size - 100
    pieces = column_pieces(header, start, 300)
    assert pieces == [(0, header.row_size - 100, start, 100),
                      (0, 0, start + 100, 200)]
    parity_row = header.parity_offset(0)
    assert column_pieces(header, parity_row, 64) == []


def test_fresh_pool_parity_consistent(sim_pool):
    assert parity_check_zone(sim_pool, 0) == []


def test_commits_keep_parity_consistent(sim_pool):
    populate(sim_pool, 60, seed=1)
    assert parity_check_zone(sim_pool, 0) == []


def test_vector_path_keeps_parity_consistent(pool_factory):
    pool = pool_factory(parity_threshold=0)
    populate(pool, 30, seed=2)
    assert parity_check_zone(pool, 0) == []
    assert pool.stats.counters['parity_vector'] > 0
    assert pool.stats.counters['parity_atomic'] == 0


@pytest.mark.parametrize('backend', [Backend.SIMULATED, Backend.FILE_MAPPED])
def test_concurrent_updates_commute(pool_factory, tmp_path, backend):
    """8 个线程并发提交随机区间，对象分布在不同行且列区间重叠，大小混合"""
    path = str(tmp_path / 'pool.pgl') if backend is Backend.FILE_MAPPED else None
    pool = pool_factory(path=path, backend=backend)
    sizes = [12 << 10 if i % 2 == 0 else 256 for i in range(48)]
    refs = []
    for size in sizes:
        with pool.transaction() as tx:
            refs.append(tx.alloc(size))
    header = pool.header
    rows = {(ref.offset - header.zone_offset(0)) // header.row_size for ref in refs}
    assert len(rows) >= 2
    expected = [bytes(size) for size in sizes]
    errors = []

    def worker(t):
        rng = random.Random(t)
        # 线程 t 拥有第 t、t+8、t+16 对 (12 KiB, 256 B) 对象
        owned = [i for i in range(48) if (i // 2) % 8 == t]
        try:
            for _ in range(150):
                with pool.transaction() as tx:
                    for i in rng.sample(owned, rng.randint(1, 2)):
                        offset = rng.randrange(sizes[i])
                        data = rng.randbytes(rng.randint(1, sizes[i] - offset))
                        tx.open(refs[i]).write(offset, data)
                        expected[i] = expected[i][:offset] + data + expected[i][offset + len(data):]
        except Exception as e:
            errors.append(e)

    threads = [threading.Thread(target=worker, args=(t,)) for t in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not errors
    assert pool.stats.counters['parity_vector'] > 0
    assert pool.stats.counters['parity_atomic'] > 0
    assert parity_check_zone(pool, 0) == []
    assert pool.check()['ok']
    for ref, data in zip(refs, expected):
        assert pgl_read(pool, ref, 0, len(data)) == data


def test_parity_disabled_mode_drifts(pool_factory):
    pool = pool_factory(mode='ml')
    refs = populate(pool, 4, seed=3)
    assert parity_check_zone(pool, 0) != []
    ref, data = next(iter(refs.items()))
    assert pgl_read(pool, ref, 0, len(data)) == data


def test_rwlock_excludes_writers():
    lock = ReadWriteLock()
    counter = np.zeros(1, dtype=np.int64)

    def bump():
        for _ in range(200):
            with lock.exclusive():
                value = int(counter[0])
                counter[0] = value + 1

    threads = [threading.Thread(target=bump) for _ in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert counter[0] == 800
    with lock.shared():
        with lock.shared():
            pass
