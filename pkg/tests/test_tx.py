import threading

import pytest

from conftest import make_options, make_pool
from errors import (DoubleFreeError, LogSpaceExhausted, ObjectBusyError, OutOfSpaceError,
                    PoolFrozenError, TxAbortedError, TxError)
from mbuf import object_is_valid
from pmem import SimulatedStore
from pool import pool_open
from tx import (RedoLogEntry, current_tx, pgl_get, pgl_read, transaction, tx_abort, tx_alloc,
                tx_begin, tx_commit, tx_open, zalloc, zfree)


def test_commit_makes_writes_durable(sim_pool):
    with sim_pool.transaction() as tx:
        ref = tx.alloc(200, type_id=3)
        tx.open(ref).write(5, b'durable')
    assert current_tx() is None
    assert pgl_read(sim_pool, ref, 5, 7) == b'durable'
    extent = sim_pool.object_extent(ref.offset)
    assert object_is_valid(sim_pool.store.read_raw(ref.offset, extent), extent)
    reopened = pool_open(options=make_options(),
                         store=SimulatedStore(image=sim_pool.store.committed_image()))
    assert pgl_read(reopened, ref, 5, 7) == b'durable'
    reopened.close()


def test_exception_aborts_everything(sim_pool):
    with sim_pool.transaction() as tx:
        ref = tx.alloc(64)
        tx.open(ref).write(0, b'before')
    image = sim_pool.store.read_raw(0, sim_pool.header.pool_size)
    with pytest.raises(KeyError):
        with sim_pool.transaction() as tx:
            tx.open(ref).write(0, b'after!')
            tx.alloc(500)
            raise KeyError('stop')
    assert sim_pool.store.read_raw(0, sim_pool.header.pool_size) == image
    assert sim_pool.stats.counters['aborts'] == 1


def test_nested_abort_aborts_outer(sim_pool):
    with sim_pool.transaction() as outer:
        ref = outer.alloc(64)
        with pytest.raises(TxAbortedError):
            with sim_pool.transaction() as inner:
                assert inner is outer
                tx_abort()
        with pytest.raises(TxAbortedError):
            outer.alloc(8)
    assert current_tx() is None
    assert sim_pool.object_extent(ref.offset) is None


def test_nested_commit_happens_at_outermost(sim_pool):
    with sim_pool.transaction() as outer:
        with sim_pool.transaction() as inner:
            ref = inner.alloc(64)
        assert sim_pool.object_extent(ref.offset) is None
    assert sim_pool.object_extent(ref.offset) == 128


def test_functional_api(sim_pool):
    tx_begin(sim_pool)
    ref = tx_alloc(32)
    tx_open(ref).set_u64(0, 42)
    assert int.from_bytes(pgl_get(sim_pool, ref)[:8], 'little') == 42
    tx_commit()
    assert current_tx() is None
    assert int.from_bytes(pgl_get(sim_pool, ref)[:8], 'little') == 42
    with pytest.raises(TxError):
        tx_alloc(8)


def test_double_free(sim_pool):
    with sim_pool.transaction() as tx:
        ref = tx.alloc(64)
    with pytest.raises(DoubleFreeError):
        with sim_pool.transaction() as tx:
            tx.free(ref)
            tx.free(ref)
    assert sim_pool.object_extent(ref.offset) == 128
    with sim_pool.transaction() as tx:
        tx.free(ref)
    with pytest.raises(DoubleFreeError):
        with sim_pool.transaction() as tx:
            tx.free(ref)


def test_zalloc_and_zfree_follow_the_transaction(sim_pool):
    with pytest.raises(TxError):
        zalloc(sim_pool, 56)
    with sim_pool.transaction():
        ref = zalloc(sim_pool, 56, type_id=3)
        assert sim_pool.object_extent(ref.offset) is None
    assert sim_pool.object_extent(ref.offset) == 128
    with sim_pool.transaction():
        zfree(sim_pool, ref)
    assert sim_pool.object_extent(ref.offset) is None
    with pytest.raises(DoubleFreeError):
        with sim_pool.transaction():
            zfree(sim_pool, ref)


def test_zalloc_rejects_a_foreign_transaction(sim_pool):
    other = make_pool()
    try:
        with pytest.raises(TxError):
            with other.transaction():
                zalloc(sim_pool, 8)
    finally:
        other.close()


def test_free_of_own_alloc_releases_reservation(sim_pool):
    before = sim_pool.capacity()
    with sim_pool.transaction() as tx:
        ref = tx.alloc(64)
        tx.free(ref)
    assert sim_pool.capacity() == before


def test_out_of_space(sim_pool):
    with pytest.raises(OutOfSpaceError):
        with sim_pool.transaction() as tx:
            tx.alloc(16 << 20)
    assert sim_pool.stats.counters['aborts'] == 1


def test_large_log_spills_into_overflow(sim_pool):
    data = bytes(range(256)) * 160
    with sim_pool.transaction() as tx:
        ref = tx.alloc(len(data))
        tx.open(ref).write(0, data)
    assert pgl_read(sim_pool, ref, 0, len(data)) == data
    assert sim_pool.check()['ok']
    with pytest.raises(LogSpaceExhausted):
        with sim_pool.transaction() as tx:
            big = tx.alloc(60000)
            tx.open(big).write(0, b'\x01' * 60000)


def test_root_object_survives_reopen(file_pool):
    ref = file_pool.root(64, type_id=0x100)
    assert file_pool.root(64) == ref
    with file_pool.transaction() as tx:
        tx.open(ref).set_u64(0, 7)
    path = file_pool.path
    file_pool.close()
    reopened = pool_open(path, make_options(backend=file_pool.options.backend))
    assert reopened.header.root_offset == ref.offset
    assert reopened.root(64) == ref
    assert pgl_read(reopened, ref, 0, 8) == (7).to_bytes(8, 'little')
    assert reopened.check()['ok']
    reopened.close()


def test_freeze_blocks_new_transactions(pool_factory):
    pool = pool_factory(freeze_policy='fail')
    pool.freeze()
    assert pool.frozen
    with pytest.raises(PoolFrozenError):
        with pool.transaction():
            pass
    pool.thaw()
    with pool.transaction() as tx:
        tx.alloc(8)

    waiting = pool_factory(freeze_timeout=0.05)
    waiting.freeze()
    with pytest.raises(PoolFrozenError):
        with waiting.transaction():
            pass
    waiting.thaw()


def test_debug_object_locks_detect_conflicts(pool_factory):
    pool = pool_factory(debug_object_locks=True)
    with pool.transaction() as tx:
        ref = tx.alloc(64)
    errors = []

    def other():
        try:
            with transaction(pool) as tx:
                tx.open(ref)
        except ObjectBusyError as e:
            errors.append(e)

    with pool.transaction() as tx:
        tx.open(ref)
        worker = threading.Thread(target=other)
        worker.start()
        worker.join()
    assert len(errors) == 1


def test_log_entry_checksum():
    entry = RedoLogEntry(0x8000, 5, b'hello')
    raw = bytearray(entry.encode() + RedoLogEntry(0x9000, 64, zero_fill=True).encode())
    decoded = RedoLogEntry.decode_all(bytes(raw), 2)
    assert decoded[0] == entry
    assert decoded[1].new_bytes() == bytes(64)
    raw[22] ^= 1
    assert RedoLogEntry.decode_all(bytes(raw), 2) is None
