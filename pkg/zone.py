#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
区与分配器模块
对象引用、对象头、块元数据，以及每个区的易失分配镜像（ZoneHeap）
"""

import logging
import math
import struct
import threading
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Callable, Dict, Iterator, List, Optional, Set, Tuple

import numpy as np

from checksum import OBJ_HEADER_SIZE, adler32
from errors import DoubleFreeError, InvalidRefError, UnrecoverableCorruption
from layout import MIN_SIZE_CLASS, PoolHeader
from pmem import PAGE_SIZE

OBJREF_SIZE = 16

_REF = struct.Struct('<QQ')
_OBJ_HEADER = struct.Struct('<QII')
_CM_HEAD = struct.Struct('<B3xIII')


class ChunkState(IntEnum):
    FREE = 0
    RUN = 1
    LARGE_LEAD = 2
    LARGE_CONT = 3
    META = 4
    LOG = 5


@dataclass(frozen=True)
class ObjectRef:
    """持久对象引用：池 UUID 低 64 位 + 相对池起始的字节偏移（指向对象头）"""
    pool_uuid_lo: int = 0
    offset: int = 0

    @property
    def is_null(self) -> bool:
        return self.offset == 0

    def pack(self) -> bytes:
        return _REF.pack(self.pool_uuid_lo, self.offset)

    @classmethod
    def unpack(cls, raw, offset: int = 0) -> 'ObjectRef':
        return cls(*_REF.unpack_from(raw, offset))


NULL_REF = ObjectRef()


@dataclass
class ObjectHeader:
    """对象头：size（槽大小，含头部）、type_id、checksum"""
    size: int
    type_id: int
    checksum: int = 0

    def pack(self) -> bytes:
        return _OBJ_HEADER.pack(self.size, self.type_id, self.checksum)

    @classmethod
    def unpack(cls, raw, offset: int = 0) -> 'ObjectHeader':
        return cls(*_OBJ_HEADER.unpack_from(raw, offset))


@dataclass
class ChunkMeta:
    """
    块元数据条目

    布局: [u8 state][3 pad][u32 size_class][u32 span][u32 checksum][bitmap]
    span 对大对象首块是块数，对后续块是首块编号
    """
    state: ChunkState = ChunkState.FREE
    size_class: int = 0
    span: int = 0
    bitmap: bytearray = field(default_factory=bytearray)

    def checksum(self) -> int:
        head = _CM_HEAD.pack(int(self.state), self.size_class, self.span, 0)[:12]
        return adler32(bytes(self.bitmap), adler32(head))

    def pack(self, entry_size: int) -> bytes:
        raw = _CM_HEAD.pack(int(self.state), self.size_class, self.span, self.checksum()) + bytes(self.bitmap)
        return raw + bytes(entry_size - len(raw))

    @classmethod
    def unpack(cls, raw, bitmap_len: int) -> Tuple['ChunkMeta', bool]:
        state, size_class, span, stored = _CM_HEAD.unpack_from(raw, 0)
        bitmap = bytearray(raw[_CM_HEAD.size:_CM_HEAD.size + bitmap_len])
        try:
            state = ChunkState(state)
        except ValueError:
            return cls(bitmap=bytearray(bitmap_len)), False
        cm = cls(state, size_class, span, bitmap)
        return cm, stored == cm.checksum()

    def copy(self) -> 'ChunkMeta':
        return ChunkMeta(self.state, self.size_class, self.span, bytearray(self.bitmap))

    def bit(self, slot: int) -> bool:
        return bool(self.bitmap[slot >> 3] & (1 << (slot & 7)))

    def set_bit(self, slot: int, value: bool):
        if value:
            self.bitmap[slot >> 3] |= 1 << (slot & 7)
        else:
            self.bitmap[slot >> 3] &= ~(1 << (slot & 7)) & 0xFF

    def popcount(self) -> int:
        return int(np.unpackbits(np.frombuffer(bytes(self.bitmap), dtype=np.uint8)).sum())


def size_class_for(payload_size: int, chunk_size: int) -> int:
    """
    选择尺寸类

    Returns:
        int: 二次幂尺寸类；超过块大小时返回 0，表示按整块分配
    """
    need = max(MIN_SIZE_CLASS, payload_size + OBJ_HEADER_SIZE)
    cls = 1 << (need - 1).bit_length()
    return cls if cls <= chunk_size else 0


@dataclass
class Reservation:
    """未提交的分配"""
    zone_id: int
    chunk: int
    slot: int
    size_class: int
    span: int
    offset: int
    slot_size: int


class ZoneHeap:
    """
    单个区的易失分配镜像

    持久状态只在提交时通过重做日志写入；镜像在提交应用后更新。
    所有修改都在区锁下进行，提交期间由事务持有区锁。
    """

    def __init__(self, header: PoolHeader, zone_id: int, cms: List[ChunkMeta]):
        self.header = header
        self.zone_id = zone_id
        self.cms = cms
        self.lock = threading.Lock()
        self.zone_offset = header.zone_offset(zone_id)
        self.chunk_size = header.chunk_size
        self._reserved: Dict[int, Set[int]] = {}
        self._claimed: Dict[int, int] = {}
        self._class_chunks: Dict[int, List[int]] = {}
        for c, cm in enumerate(cms):
            if cm.state == ChunkState.RUN:
                self._class_chunks.setdefault(cm.size_class, []).append(c)

    # ---- 地址换算 ----

    def chunk_offset(self, chunk: int) -> int:
        return self.zone_offset + chunk * self.chunk_size

    def cm_entry_offset(self, chunk: int) -> int:
        return self.zone_offset + chunk * self.header.cm_entry_size

    def _locate(self, offset: int) -> Tuple[int, int]:
        rel = offset - self.zone_offset
        return rel // self.chunk_size, rel % self.chunk_size

    # ---- 预留 ----

    def _slots(self, size_class: int) -> int:
        return self.chunk_size // size_class

    def _free_slot(self, chunk: int, size_class: int) -> Optional[int]:
        slots = self._slots(size_class)
        cm = self.cms[chunk]
        used = np.unpackbits(np.frombuffer(bytes(cm.bitmap), dtype=np.uint8), bitorder='little')[:slots].astype(bool)
        for slot in self._reserved.get(chunk, ()):
            used[slot] = True
        free = np.flatnonzero(~used)
        return int(free[0]) if len(free) else None

    def _claimable(self, chunk: int) -> bool:
        return self.cms[chunk].state == ChunkState.FREE and chunk not in self._claimed

    def reserve(self, payload_size: int) -> Optional[Reservation]:
        """
        为一次分配预留空间（调用方持有区锁）

        Returns:
            Reservation 或 None（本区空间不足）
        """
        size_class = size_class_for(payload_size, self.chunk_size)
        if size_class:
            return self._reserve_run(size_class)
        span = math.ceil((payload_size + OBJ_HEADER_SIZE) / self.chunk_size)
        return self._reserve_large(span)

    def _reserve_run(self, size_class: int) -> Optional[Reservation]:
        candidates = self._class_chunks.setdefault(size_class, [])
        for chunk in candidates:
            slot = self._free_slot(chunk, size_class)
            if slot is not None:
                return self._take(chunk, slot, size_class)
        for chunk in range(len(self.cms)):
            if self._claimable(chunk):
                self._claimed[chunk] = size_class
                candidates.append(chunk)
                return self._take(chunk, 0, size_class)
        return None

    def _take(self, chunk: int, slot: int, size_class: int) -> Reservation:
        self._reserved.setdefault(chunk, set()).add(slot)
        offset = self.chunk_offset(chunk) + slot * size_class
        return Reservation(self.zone_id, chunk, slot, size_class, 1, offset, size_class)

    def _reserve_large(self, span: int) -> Optional[Reservation]:
        run = 0
        for chunk in range(len(self.cms)):
            run = run + 1 if self._claimable(chunk) else 0
            if run == span:
                lead = chunk - span + 1
                for c in range(lead, chunk + 1):
                    self._claimed[c] = 0
                self._reserved.setdefault(lead, set()).add(0)
                return Reservation(self.zone_id, lead, 0, 0, span, self.chunk_offset(lead),
                                   span * self.chunk_size)
        return None

    def release(self, res: Reservation):
        """撤销预留（事务中止或提交完成后调用，持有区锁）"""
        slots = self._reserved.get(res.chunk)
        if slots is not None:
            slots.discard(res.slot)
            if not slots:
                del self._reserved[res.chunk]
        if res.chunk not in self._reserved:
            for c in range(res.chunk, res.chunk + res.span):
                if self._claimed.pop(c, None) is not None and self.cms[c].state == ChunkState.FREE:
                    if res.size_class and c in self._class_chunks.get(res.size_class, []):
                        self._class_chunks[res.size_class].remove(c)

    # ---- 活跃对象 ----

    def object_extent(self, offset: int) -> Optional[int]:
        """偏移处活跃对象的槽大小；不是活跃对象返回 None"""
        chunk, within = self._locate(offset)
        if chunk < 0 or chunk >= len(self.cms):
            return None
        cm = self.cms[chunk]
        if cm.state == ChunkState.RUN:
            if within % cm.size_class or not cm.bit(within // cm.size_class):
                return None
            return cm.size_class
        if cm.state == ChunkState.LARGE_LEAD and within == 0:
            return cm.span * self.chunk_size
        return None

    def free_target(self, offset: int) -> Tuple[int, int]:
        """校验释放目标，返回 (块号, 槽号)"""
        if self.object_extent(offset) is None:
            raise DoubleFreeError(f"对象 0x{offset:x} 未分配或已释放")
        chunk, within = self._locate(offset)
        cm = self.cms[chunk]
        slot = within // cm.size_class if cm.state == ChunkState.RUN else 0
        return chunk, slot

    def live_objects(self) -> Iterator[Tuple[int, int]]:
        """遍历 (偏移, 槽大小)"""
        for chunk, cm in enumerate(self.cms):
            if cm.state == ChunkState.RUN:
                bits = np.unpackbits(np.frombuffer(bytes(cm.bitmap), dtype=np.uint8), bitorder='little')
                for slot in np.flatnonzero(bits[:self._slots(cm.size_class)]):
                    yield self.chunk_offset(chunk) + int(slot) * cm.size_class, cm.size_class
            elif cm.state == ChunkState.LARGE_LEAD:
                yield self.chunk_offset(chunk), cm.span * self.chunk_size

    def objects_in(self, offset: int, length: int) -> List[Tuple[int, int]]:
        """与区间 [offset, offset+length) 重叠的活跃对象"""
        found = []
        first, _ = self._locate(offset)
        last, _ = self._locate(offset + length - 1)
        for chunk in range(max(first, 0), min(last, len(self.cms) - 1) + 1):
            cm = self.cms[chunk]
            base = self.chunk_offset(chunk)
            if cm.state == ChunkState.RUN:
                lo = max(offset, base) - base
                hi = min(offset + length, base + self.chunk_size) - base
                for slot in range(lo // cm.size_class, (hi - 1) // cm.size_class + 1):
                    if cm.bit(slot):
                        found.append((base + slot * cm.size_class, cm.size_class))
            elif cm.state in (ChunkState.LARGE_LEAD, ChunkState.LARGE_CONT):
                lead = chunk if cm.state == ChunkState.LARGE_LEAD else cm.span
                extent = self.object_extent(self.chunk_offset(lead))
                if extent is not None:
                    found.append((self.chunk_offset(lead), extent))
        return sorted(set(found))

    def capacity(self) -> Dict[str, int]:
        """数据容量统计（块元数据和日志块不计入）"""
        usable = live = 0
        for cm in self.cms:
            if cm.state in (ChunkState.META, ChunkState.LOG):
                continue
            usable += self.chunk_size
            if cm.state == ChunkState.RUN:
                live += cm.popcount() * cm.size_class
            elif cm.state == ChunkState.LARGE_LEAD:
                live += cm.span * self.chunk_size
        return {'capacity': usable, 'live': live, 'free': usable - live}

    # ---- 提交 ----

    def plan_commit(self, allocs: List[Reservation], frees: List[Tuple[int, int]]) -> Dict[int, ChunkMeta]:
        """
        计算提交后的块元数据（调用方持有区锁）

        Args:
            allocs: 本区的预留
            frees: 本区要释放的 (块号, 槽号)

        Returns:
            Dict: 块号 -> 新的 ChunkMeta
        """
        plan: Dict[int, ChunkMeta] = {}

        def entry(chunk: int) -> ChunkMeta:
            if chunk not in plan:
                plan[chunk] = self.cms[chunk].copy()
            return plan[chunk]

        for res in allocs:
            if res.size_class:
                cm = entry(res.chunk)
                if cm.state == ChunkState.FREE:
                    cm.state, cm.size_class, cm.span = ChunkState.RUN, res.size_class, 0
                    cm.bitmap = bytearray(len(cm.bitmap))
                cm.set_bit(res.slot, True)
            else:
                lead = entry(res.chunk)
                lead.state, lead.size_class, lead.span = ChunkState.LARGE_LEAD, 0, res.span
                for c in range(res.chunk + 1, res.chunk + res.span):
                    cont = entry(c)
                    cont.state, cont.size_class, cont.span = ChunkState.LARGE_CONT, 0, res.chunk
        for chunk, slot in frees:
            cm = entry(chunk)
            if cm.state == ChunkState.RUN:
                if not cm.bit(slot):
                    raise DoubleFreeError(f"块 {chunk} 槽 {slot} 已释放")
                cm.set_bit(slot, False)
                if not any(cm.bitmap) and chunk not in self._reserved:
                    cm.state, cm.size_class, cm.span = ChunkState.FREE, 0, 0
            elif cm.state == ChunkState.LARGE_LEAD:
                for c in range(chunk, chunk + cm.span):
                    freed = entry(c)
                    freed.state, freed.size_class, freed.span = ChunkState.FREE, 0, 0
                    freed.bitmap = bytearray(len(freed.bitmap))
            else:
                raise DoubleFreeError(f"块 {chunk} 不含可释放对象")
        return plan

    def plan_writes(self, plan: Dict[int, ChunkMeta]) -> List[Tuple[int, bytes]]:
        entry_size = self.header.cm_entry_size
        return [(self.cm_entry_offset(c), cm.pack(entry_size)) for c, cm in sorted(plan.items())]

    def apply_commit(self, plan: Dict[int, ChunkMeta], allocs: List[Reservation]):
        """提交落盘后更新镜像并释放预留（持有区锁）"""
        for chunk, cm in plan.items():
            old = self.cms[chunk]
            if old.state == ChunkState.RUN and cm.state != ChunkState.RUN:
                lst = self._class_chunks.get(old.size_class, [])
                if chunk in lst:
                    lst.remove(chunk)
            self.cms[chunk] = cm
            if cm.state == ChunkState.RUN:
                lst = self._class_chunks.setdefault(cm.size_class, [])
                if chunk not in lst:
                    lst.append(chunk)
        for res in allocs:
            self.release(res)


def blank_chunk_metas(header: PoolHeader, zone_id: int) -> List[ChunkMeta]:
    """新建区的块元数据：元数据块、溢出日志块，其余空闲"""
    bitmap_len = header.chunk_size // (MIN_SIZE_CLASS * 8)
    cms = [ChunkMeta(bitmap=bytearray(bitmap_len)) for _ in range(header.data_chunks)]
    for c in range(header.meta_chunks):
        cms[c].state = ChunkState.META
    if zone_id == 0:
        for c in range(header.overflow_first_chunk, header.data_chunks):
            cms[c].state = ChunkState.LOG
    return cms


def format_zone(store, header: PoolHeader, zone_id: int):
    """写入新区的块元数据表（校验行由调用方重算）"""
    entry_size = header.cm_entry_size
    table = b''.join(cm.pack(entry_size) for cm in blank_chunk_metas(header, zone_id))
    offset = header.zone_offset(zone_id)
    store.write(offset, table)
    store.persist(offset, len(table))


def load_zone_heap(pool, zone_id: int,
                   repair: Callable[[List[int]], None]) -> ZoneHeap:
    """
    从持久块元数据构建区镜像

    Args:
        pool: 已打开的池
        repair: 修复页的回调（按页偏移列表），块元数据校验失败时调用
    """
    header = pool.header
    entry_size = header.cm_entry_size
    bitmap_len = header.chunk_size // (MIN_SIZE_CLASS * 8)
    offset = header.zone_offset(zone_id)
    length = header.data_chunks * entry_size

    def parse() -> Tuple[List[ChunkMeta], List[int]]:
        raw = pool.read(offset, length)
        cms, bad = [], []
        for c in range(header.data_chunks):
            cm, ok = ChunkMeta.unpack(raw[c * entry_size:(c + 1) * entry_size], bitmap_len)
            cms.append(cm)
            if not ok:
                bad.append(c)
        return cms, bad

    cms, bad = parse()
    if bad:
        pages = sorted({(offset + c * entry_size + i) // PAGE_SIZE * PAGE_SIZE
                        for c in bad for i in (0, entry_size - 1)})
        logging.warning(f"区 {zone_id} 有 {len(bad)} 个块元数据校验失败，按校验行修复 {len(pages)} 页")
        repair(pages)
        cms, bad = parse()
        if bad:
            raise UnrecoverableCorruption(f"区 {zone_id} 块元数据修复后仍校验失败: {bad[:8]}")
    return ZoneHeap(header, zone_id, cms)


def obj_locate(pool, ref: Optional[ObjectRef]) -> Optional[int]:
    """
    对象引用转进程内地址，不检查对象是否活跃

    Returns:
        int: store.base + offset；空引用返回 None
    """
    if ref is None or ref.is_null:
        return None
    header = pool.header
    if ref.offset < 0 or ref.offset >= header.pool_size:
        raise InvalidRefError(f"引用偏移 0x{ref.offset:x} 越界")
    region = header.classify(ref.offset)
    if region != 'data':
        raise InvalidRefError(f"引用偏移 0x{ref.offset:x} 指向 {region} 区域")
    return pool.store.base + ref.offset
