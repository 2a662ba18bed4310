#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
校验行模块
行/列换算、增量校验（old XOR new）、按粒度加读写锁的混合更新、
页列重建、校验一致性检查与重算
"""

import logging
import threading
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from errors import StoreError, UnrecoverableCorruption
from layout import PoolHeader
from pmem import PAGE_SIZE

DEFAULT_LOCK_GRANULE = 8192
DEFAULT_PARITY_THRESHOLD = 8192


class ReadWriteLock:
    """
    读写锁：共享持有者可以并发，独占持有者在其粒度内独占
    """

    def __init__(self):
        self._cond = threading.Condition(threading.Lock())
        self._readers = 0
        self._writer = False

    def acquire_read(self):
        with self._cond:
            while self._writer:
                self._cond.wait()
            self._readers += 1

    def release_read(self):
        with self._cond:
            self._readers -= 1
            if self._readers == 0:
                self._cond.notify_all()

    def acquire_write(self):
        with self._cond:
            while self._writer or self._readers > 0:
                self._cond.wait()
            self._writer = True

    def release_write(self):
        with self._cond:
            self._writer = False
            self._cond.notify_all()

    def shared(self) -> 'LockContext':
        return LockContext(self.acquire_read, self.release_read)

    def exclusive(self) -> 'LockContext':
        return LockContext(self.acquire_write, self.release_write)


class LockContext:
    """读/写锁上下文管理器"""

    def __init__(self, acquire, release):
        self._acquire = acquire
        self._release = release

    def __enter__(self):
        self._acquire()
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        self._release()


@dataclass(frozen=True)
class ParityGeometry:
    """区的行列几何：任何数据行偏移 o 的校验偏移为 parity_base + (o mod row_size)"""
    row_size: int
    data_rows: int
    parity_base: int
    lock_granule: int
    zone_offset: int

    @classmethod
    def for_zone(cls, header: PoolHeader, zone_id: int,
                 lock_granule: int = DEFAULT_LOCK_GRANULE) -> 'ParityGeometry':
        return cls(row_size=header.row_size, data_rows=header.data_rows,
                   parity_base=header.data_rows * header.row_size,
                   lock_granule=lock_granule, zone_offset=header.zone_offset(zone_id))

    @property
    def lock_count(self) -> int:
        return -(-self.row_size // self.lock_granule)

    @property
    def rows(self) -> int:
        return self.data_rows + 1

    def parity_offset(self, zone_rel: int) -> int:
        return self.parity_base + zone_rel % self.row_size

    def row_offset(self, row: int, column: int) -> int:
        """行 row 中列偏移 column 的池内绝对偏移"""
        return self.zone_offset + row * self.row_size + column

    def granules(self, column_offset: int, length: int) -> range:
        return range(column_offset // self.lock_granule,
                     (column_offset + length - 1) // self.lock_granule + 1)


@dataclass
class RangeDelta:
    """列偏移与增量字节（old XOR new）"""
    column_offset: int
    delta: np.ndarray

    @property
    def length(self) -> int:
        return len(self.delta)


def delta_compute(old, new, column_offset: int = 0) -> RangeDelta:
    """按字节计算 old XOR new"""
    if len(old) != len(new):
        raise StoreError(f"增量计算长度不一致: {len(old)} != {len(new)}")
    a = np.frombuffer(bytes(old), dtype=np.uint8)
    b = np.frombuffer(bytes(new), dtype=np.uint8)
    return RangeDelta(column_offset, np.bitwise_xor(a, b))


def column_pieces(header: PoolHeader, offset: int, length: int) -> List[Tuple[int, int, int, int]]:
    """
    把池内区间按行切开

    Returns:
        List: (区号, 列偏移, 绝对偏移, 长度)，只包含落在数据行内的部分
    """
    pieces = []
    end = offset + length
    pos = offset
    while pos < end:
        zone_id = header.zone_of(pos)
        if zone_id is None:
            raise StoreError(f"区间 0x{offset:x}+{length} 不在任何区内")
        rel = pos - header.zone_offset(zone_id)
        row, column = divmod(rel, header.row_size)
        step = min(end - pos, header.row_size - column)
        if row < header.data_rows:
            pieces.append((zone_id, column, pos, step))
        pos += step
    return pieces


def parity_apply(pool, zone_id: int, column_offset: int, delta: RangeDelta) -> None:
    """
    把增量异或进校验行并持久化

    小于阈值的增量在共享锁下用原子异或；否则在独占锁下整段异或。
    跨多个粒度时逐个粒度加锁，按偏移升序。
    """
    geometry = pool.geometry(zone_id)
    n = delta.length
    if n == 0:
        return
    if column_offset < 0 or column_offset + n > geometry.row_size:
        raise StoreError(f"列区间 [{column_offset}, {column_offset + n}) 超出行大小 {geometry.row_size}")
    store = pool.store
    locks = pool.parity_locks[zone_id]
    base = geometry.zone_offset + geometry.parity_base
    small = n < pool.options.parity_threshold
    for g in geometry.granules(column_offset, n):
        lo = max(column_offset, g * geometry.lock_granule)
        hi = min(column_offset + n, (g + 1) * geometry.lock_granule)
        piece = delta.delta[lo - column_offset:hi - column_offset]
        if small:
            with locks[g].shared():
                store.atomic_xor(base + lo, piece)
        else:
            with locks[g].exclusive():
                store.xor_into(base + lo, piece)
    store.persist(base + column_offset, n)
    pool.stats.add(parity_atomic=1 if small else 0, parity_vector=0 if small else 1,
                   parity_bytes=n)


def _overflow_mask(pool, zone_id: int, member: int, length: int) -> Tuple[int, int]:
    """member 区间中落在溢出日志区的部分（相对 member 的 [lo, hi)）"""
    header = pool.header
    if zone_id != 0 or header.overflow_chunks == 0:
        return 0, 0
    ov_lo = header.overflow_offset
    ov_hi = ov_lo + header.overflow_chunks * header.chunk_size
    lo = max(member, ov_lo)
    hi = min(member + length, ov_hi)
    if lo >= hi:
        return 0, 0
    return lo - member, hi - member


def row_xor(pool, zone_id: int, column_offset: int, length: int, skip_row: int = -1) -> np.ndarray:
    """列区间上除 skip_row 外所有行的异或，溢出日志区视为零"""
    geometry = pool.geometry(zone_id)
    store = pool.store
    acc = np.zeros(length, dtype=np.uint8)
    for row in range(geometry.rows):
        if row == skip_row:
            continue
        member = geometry.row_offset(row, column_offset)
        data = store.array(member, length)
        lo, hi = _overflow_mask(pool, zone_id, member, length)
        if hi > lo:
            data = data.copy()
            data[lo:hi] = 0
        acc ^= data
    return acc


def column_reconstruct(pool, zone_id: int, page_offset: int) -> bytes:
    """
    重建页列中的一页（数据页或校验页），写回并持久化

    Args:
        page_offset: 页的池内绝对偏移

    Returns:
        bytes: 4096 字节的恢复结果
    """
    if not pool.frozen:
        raise StoreError("页列重建要求池处于冻结状态")
    geometry = pool.geometry(zone_id)
    store = pool.store
    rel = page_offset - geometry.zone_offset
    if page_offset % PAGE_SIZE or rel < 0 or rel >= geometry.rows * geometry.row_size:
        raise StoreError(f"页 0x{page_offset:x} 不属于区 {zone_id}")
    row, column = divmod(rel, geometry.row_size)
    damaged = [geometry.row_offset(r, column) for r in range(geometry.rows)
               if r != row and store.is_poisoned(geometry.row_offset(r, column))]
    if damaged:
        logging.error(f"页列重叠损坏: 0x{page_offset:x} 与 {[hex(p) for p in damaged]}")
        raise UnrecoverableCorruption(f"页 0x{page_offset:x} 所在页列还有其他损坏页", [page_offset] + damaged)
    recovered = row_xor(pool, zone_id, column, PAGE_SIZE, skip_row=row)
    lo, hi = _overflow_mask(pool, zone_id, page_offset, PAGE_SIZE)
    if hi > lo:
        recovered[lo:hi] = 0
    store.unprotect_page(page_offset)
    store.write(page_offset, recovered.tobytes())
    store.persist(page_offset, PAGE_SIZE)
    return recovered.tobytes()


def _nonzero_runs(values: np.ndarray) -> List[Tuple[int, int]]:
    idx = np.flatnonzero(values)
    if len(idx) == 0:
        return []
    breaks = np.flatnonzero(np.diff(idx) > 1)
    starts = np.concatenate(([idx[0]], idx[breaks + 1]))
    ends = np.concatenate((idx[breaks], [idx[-1]])) + 1
    return [(int(s), int(e - s)) for s, e in zip(starts, ends)]


def parity_check_zone(pool, zone_id: int) -> List[Tuple[int, int]]:
    """
    检查区的校验一致性

    Returns:
        List: 不一致的 (列偏移, 长度)，溢出日志区不参与
    """
    geometry = pool.geometry(zone_id)
    acc = row_xor(pool, zone_id, 0, geometry.row_size)
    return _nonzero_runs(acc)


def parity_recompute_range(pool, zone_id: int, column_offset: int, length: int) -> None:
    """用数据行重算一段校验并持久化"""
    if length <= 0:
        return
    geometry = pool.geometry(zone_id)
    locks = pool.parity_locks[zone_id]
    granules = list(geometry.granules(column_offset, length))
    for g in granules:
        locks[g].acquire_write()
    try:
        fresh = row_xor(pool, zone_id, column_offset, length, skip_row=geometry.data_rows)
        target = geometry.zone_offset + geometry.parity_base + column_offset
        pool.store.write(target, fresh.tobytes())
        pool.store.persist(target, length)
    finally:
        for g in reversed(granules):
            locks[g].release_write()


def parity_recompute_zone(pool, zone_id: int) -> None:
    parity_recompute_range(pool, zone_id, 0, pool.geometry(zone_id).row_size)
