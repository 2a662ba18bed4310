#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
事务模块
失败原子事务：生命周期、带副本的重做日志、集成校验和与校验行的提交协议，
以及 tx_* / pgl_* 接口
"""

import logging
import struct
import threading
import time
from contextlib import contextmanager
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional, Tuple

from checksum import OBJ_HEADER_SIZE, adler32, object_checksum, object_checksum_replace
from errors import (CanaryViolation, FatalFaultError, LogSpaceExhausted, MediaError,
                    OutOfSpaceError, PoolError, SimulatedCrash, TxAbortedError, TxError)
from layout import (HEADER_OFF, HEADER_REPLICA_OFF, MARKER_DONE, MARKER_EMPTY,
                    MARKER_LOGS_COMPLETE, SLOT_HEADER_SIZE, SlotHeader)
from mbuf import (MicroBuffer, TxBufferIndex, mbuf_canary_check, mbuf_open, read_object,
                  read_range)
from parity import column_pieces, delta_compute, parity_apply
from zone import ObjectHeader, ObjectRef, Reservation

ZERO_FILL_FLAG = 1 << 63
_ENTRY_HEAD = struct.Struct('<QQ')
_ENTRY_CSUM = struct.Struct('<I')
ENTRY_HEADER_SIZE = _ENTRY_HEAD.size + _ENTRY_CSUM.size


class TxState(Enum):
    ACTIVE = 'active'
    COMMITTING = 'committing'
    ABORTED = 'aborted'
    DONE = 'done'


@dataclass
class RedoLogEntry:
    """
    重做日志条目

    线上格式: [u64 target][u64 length][u32 checksum][payload]，起始按 8 字节对齐。
    length 最高位表示清零条目，不携带载荷。
    """
    target: int
    length: int
    payload: bytes = b''
    zero_fill: bool = False

    def encode(self) -> bytes:
        length = self.length | (ZERO_FILL_FLAG if self.zero_fill else 0)
        head = _ENTRY_HEAD.pack(self.target, length)
        body = b'' if self.zero_fill else bytes(self.payload)
        raw = head + _ENTRY_CSUM.pack(adler32(body, adler32(head))) + body
        return raw + bytes(-len(raw) % 8)

    def new_bytes(self) -> bytes:
        return bytes(self.length) if self.zero_fill else self.payload

    @staticmethod
    def decode_all(raw: bytes, count: int) -> Optional[List['RedoLogEntry']]:
        """
        解析连续的日志条目

        Returns:
            条目列表；任何一条校验失败或越界返回 None
        """
        entries = []
        pos = 0
        for _ in range(count):
            if pos + ENTRY_HEADER_SIZE > len(raw):
                return None
            target, length = _ENTRY_HEAD.unpack_from(raw, pos)
            (stored,) = _ENTRY_CSUM.unpack_from(raw, pos + _ENTRY_HEAD.size)
            zero_fill = bool(length & ZERO_FILL_FLAG)
            length &= ~ZERO_FILL_FLAG
            body_len = 0 if zero_fill else length
            start = pos + ENTRY_HEADER_SIZE
            if start + body_len > len(raw):
                return None
            body = raw[start:start + body_len]
            head = raw[pos:pos + _ENTRY_HEAD.size]
            if adler32(body, adler32(head)) != stored:
                return None
            entries.append(RedoLogEntry(target, length, bytes(body), zero_fill))
            pos = start + body_len
            pos += -pos % 8
        return entries


_local = threading.local()


def current_tx() -> Optional['Transaction']:
    """当前线程的事务"""
    return getattr(_local, 'tx', None)


class Transaction:
    """
    线程绑定的事务

    嵌套 begin 只增加深度；任意一层中止都会中止最外层事务
    """

    def __init__(self, pool):
        self.pool = pool
        self.depth = 0
        self.state = TxState.ACTIVE
        self.index = TxBufferIndex()
        self.allocs: List[Reservation] = []
        self.frees: List[Tuple[int, int, int, int]] = []
        self.root_update: Optional[int] = None
        self.thread_id = threading.get_ident()
        self._locked_objects: List[int] = []
        self._zones_locked: List[int] = []
        self._slot: Optional[int] = None
        self._overflow_held = False

    # ---- 状态 ----

    def _check_active(self):
        if self.state is TxState.ABORTED:
            raise TxAbortedError("事务已中止")
        if self.state is not TxState.ACTIVE:
            raise TxError(f"事务状态为 {self.state.value}，不能继续操作")

    def register(self, buf: MicroBuffer):
        """把微缓冲区挂入本事务（调试模式下同时登记对象锁）"""
        if self.pool.options.debug_object_locks:
            self.pool.lock_object(buf.ref.offset, self)
            self._locked_objects.append(buf.ref.offset)
        self.index.add(buf)

    # ---- 对象访问 ----

    def open(self, ref: ObjectRef, verify: bool = True) -> MicroBuffer:
        """tx_open：返回对象的微缓冲区"""
        self._check_active()
        return mbuf_open(self, ref, verify)

    def add_range(self, ref: ObjectRef, offset: int, length: int) -> memoryview:
        """tx_add_range：先打开再标记修改区间"""
        return self.open(ref).add_range(offset, length)

    def get(self, ref: ObjectRef) -> memoryview:
        """事务内读取：已打开的对象返回影子载荷，否则直接读持久数据"""
        self._check_active()
        buf = self.index.get(ref)
        if buf is not None:
            return buf.payload
        return direct_payload(self.pool, ref)

    def read(self, ref: ObjectRef, offset: int, length: int) -> bytes:
        """事务内读取载荷的一段"""
        self._check_active()
        buf = self.index.get(ref)
        if buf is not None:
            return bytes(buf.payload[offset:offset + length])
        return read_range(self.pool, ref, offset, length, self.pool.mode.verify_reads)

    def alloc(self, size: int, type_id: int = 0) -> ObjectRef:
        """
        tx_alloc：预留空间并返回带隐式微缓冲区的新对象

        Args:
            size: 载荷大小
            type_id: 32 位类型号
        """
        self._check_active()
        res = self.pool.reserve(size)
        if res is None:
            self._fail(OutOfSpaceError(f"没有足够空间分配 {size} 字节"))
        self.allocs.append(res)
        ref = ObjectRef(self.pool.header.uuid_lo, res.offset)
        buf = MicroBuffer(ref, bytes(res.slot_size), allocated=True)
        buf.set_header(ObjectHeader(res.slot_size, type_id & 0xFFFFFFFF, 0))
        buf.requested_size = size
        buf.modified = True
        self.register(buf)
        return ref

    def free(self, ref: ObjectRef):
        """tx_free：在提交时清除分配位"""
        self._check_active()
        for i, res in enumerate(self.allocs):
            if res.offset == ref.offset:
                self.pool.release_reservation(res)
                del self.allocs[i]
                self.index.discard(ref)
                return
        if any(off == ref.offset for _, _, _, off in self.frees):
            self._fail_double(ref)
        heap = self.pool.heap_for(ref.offset)
        if heap is None:
            self._fail_double(ref)
        try:
            chunk, slot = heap.free_target(ref.offset)
        except PoolError as e:
            self._fail(e)
        self.frees.append((heap.zone_id, chunk, slot, ref.offset))
        self.index.discard(ref)

    def _fail_double(self, ref: ObjectRef):
        from errors import DoubleFreeError
        self._fail(DoubleFreeError(f"对象 0x{ref.offset:x} 重复释放"))

    def set_root(self, ref: ObjectRef):
        self._check_active()
        self.root_update = ref.offset

    def _fail(self, error: Exception):
        self.abort_all()
        raise error

    # ---- 中止 ----

    def abort_all(self):
        """丢弃全部微缓冲区和预留，不产生任何持久写"""
        if self.state in (TxState.ABORTED, TxState.DONE):
            return
        self.state = TxState.ABORTED
        self.pool.stats.add(aborts=1)
        self._release()

    def _release(self):
        pool = self.pool
        self._unlock_zones()
        for res in self.allocs:
            pool.release_reservation(res)
        self.allocs = []
        self.frees = []
        self.index.clear()
        for off in self._locked_objects:
            pool.unlock_object(off, self)
        self._locked_objects = []
        if self._overflow_held:
            pool.overflow_lock.release()
            self._overflow_held = False
        if self._slot is not None:
            pool.release_slot(self._slot)
            self._slot = None

    def _unlock_zones(self):
        for zone_id in reversed(self._zones_locked):
            self.pool.heaps[zone_id].lock.release()
        self._zones_locked = []

    # ---- 提交 ----

    def _collect_writes(self) -> Tuple[List[RedoLogEntry], Dict[str, int]]:
        pool = self.pool
        writes: List[RedoLogEntry] = []
        sizes = {'alloc_bytes': 0, 'alloc_objects': 0, 'mod_bytes': 0, 'mod_objects': 0}
        checksums = pool.mode.checksums
        for buf in self.index:
            base = buf.ref.offset
            image = buf.image
            if buf.allocated:
                final = bytearray(buf.size)
                ranges = [(off, length) for off, length in buf.modified_ranges
                          if off >= OBJ_HEADER_SIZE and any(image[off:off + length])]
                for off, length in ranges:
                    final[off:off + length] = image[off:off + length]
                header = buf.header
                if checksums:
                    header.checksum = object_checksum(header.pack(), final[OBJ_HEADER_SIZE:])
                buf.set_header(header)
                writes.append(RedoLogEntry(base, buf.size, zero_fill=True))
                writes.append(RedoLogEntry(base, OBJ_HEADER_SIZE, header.pack()))
                for off, length in ranges:
                    writes.append(RedoLogEntry(base + off, length, bytes(final[off:off + length])))
                sizes['alloc_bytes'] += buf.requested_size
                sizes['alloc_objects'] += 1
                continue
            ranges = [r for r in buf.modified_ranges if r[0] >= OBJ_HEADER_SIZE]
            if not ranges:
                continue
            changed = [(off, length) for off, length in ranges
                       if bytes(image[off:off + length]) != buf.origin[off:off + length]]
            if not changed:
                continue
            if checksums:
                total = ObjectHeader.unpack(buf.origin).checksum
                for off, length in changed:
                    total = object_checksum_replace(total, buf.size, off,
                                                    buf.origin[off:off + length], image[off:off + length])
                header = buf.header
                header.checksum = total
                buf.set_header(header)
                buf.mark_checksum()
            for off, length in buf.modified_ranges:
                if bytes(image[off:off + length]) != buf.origin[off:off + length]:
                    writes.append(RedoLogEntry(base + off, length, bytes(image[off:off + length])))
            sizes['mod_bytes'] += sum(length for _, length in changed)
            sizes['mod_objects'] += 1
        return writes, sizes

    def _lock_zones(self) -> List[int]:
        zones = sorted({res.zone_id for res in self.allocs} | {f[0] for f in self.frees})
        for zone_id in zones:
            self.pool.heaps[zone_id].lock.acquire()
            self._zones_locked.append(zone_id)
        return zones

    def _write_logs(self, writes: List[RedoLogEntry]):
        pool = self.pool
        header = pool.header
        store = pool.store
        encoded = b''.join(e.encode() for e in writes)
        cap = header.log_half_size - SLOT_HEADER_SIZE
        in_slot = encoded[:cap]
        spill = encoded[cap:]
        if len(spill) > header.overflow_half_size:
            raise LogSpaceExhausted(f"日志 {len(encoded)} 字节超出日志槽和溢出区容量")
        self._slot = pool.acquire_slot()
        if spill:
            pool.overflow_lock.acquire()
            self._overflow_held = True
        meta = SlotHeader(MARKER_EMPTY, len(writes), len(in_slot), len(spill))
        halves = [False, True] if pool.mode.replicate else [False]
        for replica in halves:
            slot_off = header.slot_offset(self._slot, replica)
            store.write(slot_off + SLOT_HEADER_SIZE, in_slot)
            store.persist(slot_off + SLOT_HEADER_SIZE, len(in_slot))
            if spill:
                ov_off = header.overflow_half_offset(replica)
                store.write(ov_off, spill)
                store.persist(ov_off, len(spill))
            store.write(slot_off + 8, meta.pack()[8:])
            store.persist(slot_off + 8, SLOT_HEADER_SIZE - 8)
        pool.stats.add(log_bytes=len(encoded), log_entries=len(writes))

    def _apply(self, writes: List[RedoLogEntry]):
        pool = self.pool
        store = pool.store
        parity = pool.mode.parity
        for entry in writes:
            new = entry.new_bytes()
            try:
                old = store.read(entry.target, entry.length) if parity else None
            except MediaError as e:
                pool.mark_failed(f"提交阶段遇到介质错误 0x{e.page_offset:x}")
                raise FatalFaultError(f"事务提交过程中检测到介质错误: 页 0x{e.page_offset:x}")
            store.write(entry.target, new)
            store.persist(entry.target, entry.length)
            if not parity or pool.header.zone_of(entry.target) is None:
                continue
            for zone_id, column, pos, length in column_pieces(pool.header, entry.target, entry.length):
                lo = pos - entry.target
                delta = delta_compute(old[lo:lo + length], new[lo:lo + length], column)
                parity_apply(pool, zone_id, column, delta)

    def _set_marker(self, value: int):
        off = self.pool.header.slot_offset(self._slot)
        self.pool.store.atomic_store64(off, value)
        self.pool.store.persist(off, 8)

    def commit(self):
        """
        tx_commit

        顺序：金丝雀检查 → 增量校验和 → 分配器计划 → 写日志与副本 → logs-complete 标记
        → 写回对象 → 校验行增量 → done/empty 标记 → 更新分配镜像
        """
        self._check_active()
        try:
            self._commit()
        except (SimulatedCrash, FatalFaultError):
            self.pool.mark_failed("提交过程中断")
            raise

    def _commit(self):
        pool = self.pool
        start = time.perf_counter()
        self.state = TxState.COMMITTING
        try:
            for buf in self.index:
                if not mbuf_canary_check(buf):
                    raise CanaryViolation(f"对象 0x{buf.ref.offset:x} 的微缓冲区金丝雀被破坏")
            writes, sizes = self._collect_writes()
            zones = self._lock_zones()
            plans = {}
            for zone_id in zones:
                heap = pool.heaps[zone_id]
                allocs = [r for r in self.allocs if r.zone_id == zone_id]
                frees = [(c, s) for z, c, s, _ in self.frees if z == zone_id]
                plans[zone_id] = heap.plan_commit(allocs, frees)
                writes.extend(RedoLogEntry(off, len(data), data)
                              for off, data in heap.plan_writes(plans[zone_id]))
            new_header = None
            if self.root_update is not None:
                new_header = pool.header.with_root(self.root_update)
                raw = new_header.pack()
                writes.append(RedoLogEntry(HEADER_OFF, len(raw), raw))
                writes.append(RedoLogEntry(HEADER_REPLICA_OFF, len(raw), raw))
            if not writes:
                self.state = TxState.DONE
                self._release()
                return
            self._write_logs(writes)
        except PoolError:
            self.state = TxState.ACTIVE
            self.abort_all()
            raise

        self._set_marker(MARKER_LOGS_COMPLETE)
        self._apply(writes)
        self._set_marker(MARKER_DONE)
        self._set_marker(MARKER_EMPTY)

        for zone_id, plan in plans.items():
            pool.heaps[zone_id].apply_commit(plan, [r for r in self.allocs if r.zone_id == zone_id])
        self.allocs = []
        if new_header is not None:
            pool.header = new_header
        self.state = TxState.DONE
        self._release()
        pool.stats.add(commits=1, commit_seconds=time.perf_counter() - start, **sizes)
        logging.debug(f"事务提交完成: {len(writes)} 条日志")
        pool.after_commit()


def tx_begin(pool) -> Transaction:
    """开启事务；已有事务时增加嵌套深度"""
    tx = current_tx()
    if tx is not None:
        if tx.pool is not pool:
            raise TxError("当前线程已有另一个池的事务")
        if tx.state is TxState.ABORTED:
            raise TxAbortedError("外层事务已中止")
        tx.depth += 1
        return tx
    pool.enter_tx()
    tx = Transaction(pool)
    tx.depth = 1
    _local.tx = tx
    return tx


def _finish(tx: Transaction):
    _local.tx = None
    tx.pool.exit_tx()


def tx_end() -> None:
    """结束一层事务；最外层时提交（已中止则只清理）"""
    tx = current_tx()
    if tx is None:
        raise TxError("当前线程没有事务")
    tx.depth -= 1
    if tx.depth > 0:
        return
    try:
        if tx.state is TxState.ACTIVE:
            tx.commit()
    finally:
        if tx.state is TxState.COMMITTING:
            tx.abort_all()
        _finish(tx)


def tx_abort() -> None:
    """
    中止事务

    在嵌套层调用时整个事务中止，并抛出 TxAbortedError 把控制权交回最外层
    """
    tx = current_tx()
    if tx is None:
        raise TxError("当前线程没有事务")
    tx.abort_all()
    if tx.depth > 1:
        raise TxAbortedError("嵌套事务中止，外层事务随之中止")


def tx_open(ref: ObjectRef, verify: bool = True) -> MicroBuffer:
    return _require_tx().open(ref, verify)


def tx_add_range(ref: ObjectRef, offset: int, length: int) -> memoryview:
    return _require_tx().add_range(ref, offset, length)


def tx_alloc(size: int, type_id: int = 0) -> ObjectRef:
    return _require_tx().alloc(size, type_id)


def tx_free(ref: ObjectRef) -> None:
    _require_tx().free(ref)


def tx_commit() -> None:
    """显式提交：提交整个事务并结束所有嵌套层"""
    tx = _require_tx()
    tx.depth = 1
    tx_end()


def zalloc(pool, size: int, type_id: int = 0) -> ObjectRef:
    """在 pool 上当前事务内分配对象，分配器元数据随事务提交"""
    return _require_tx(pool).alloc(size, type_id)


def zfree(pool, ref: ObjectRef) -> None:
    _require_tx(pool).free(ref)


def _require_tx(pool=None) -> Transaction:
    tx = current_tx()
    if tx is None:
        raise TxError("当前线程没有事务")
    if pool is not None and tx.pool is not pool:
        raise TxError("当前事务不属于该对象池")
    return tx


@contextmanager
def transaction(pool):
    """
    事务上下文：正常退出时提交，异常时中止并重新抛出
    """
    tx = tx_begin(pool)
    try:
        yield tx
    except BaseException:
        tx.abort_all()
        tx.depth -= 1
        if tx.depth == 0:
            _finish(tx)
        raise
    tx_end()


def direct_payload(pool, ref: ObjectRef) -> memoryview:
    """直接读取持久对象载荷（只读），按模式决定是否校验并计入易损字节"""
    image = read_object(pool, ref, pool.mode.verify_reads)
    return memoryview(image)[OBJ_HEADER_SIZE:].toreadonly()


def pgl_get(pool, ref: ObjectRef) -> memoryview:
    """
    获取对象载荷

    事务内已打开的对象返回微缓冲区载荷；否则直接读取持久数据，
    默认模式不校验，conservative 模式校验
    """
    tx = current_tx()
    if tx is not None and tx.pool is pool:
        buf = tx.index.get(ref)
        if buf is not None:
            return buf.payload
    return direct_payload(pool, ref)


def pgl_read(pool, ref: ObjectRef, offset: int, length: int) -> bytes:
    """按字段读取对象载荷，语义同 pgl_get"""
    tx = current_tx()
    if tx is not None and tx.pool is pool:
        return tx.read(ref, offset, length)
    return read_range(pool, ref, offset, length, pool.mode.verify_reads)


def pgl_open(pool, ref: ObjectRef) -> MicroBuffer:
    """在事务外打开对象的影子副本，随后由 pgl_commit 提交"""
    image = read_object(pool, ref, verify=True)
    return MicroBuffer(ref, image)


def pgl_commit(pool, shadow: MicroBuffer) -> None:
    """把 pgl_open 得到的影子副本与打开时的内容比较，在隐式事务中提交差异"""
    shadow.diff_ranges()
    if not shadow.modified_ranges:
        return
    with transaction(pool) as tx:
        if tx.index.get(shadow.ref) is not None:
            raise TxError(f"对象 0x{shadow.ref.offset:x} 已在当前事务中打开")
        tx.register(shadow)
