#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
微缓冲区模块
对象的易失影子副本，前后各有一个金丝雀字，记录修改区间，按事务建立索引
"""

import bisect
import logging
import secrets
import struct
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from checksum import CHECKSUM_FIELD, OBJ_HEADER_SIZE, object_checksum
from errors import InvalidRefError, StoreError, UnrecoverableCorruption
from zone import ObjectHeader, ObjectRef, OBJREF_SIZE

PROCESS_CANARY = secrets.randbits(64)
CANARY_SIZE = 8

_U64 = struct.Struct('<Q')


class MicroBuffer:
    """
    单个对象的影子副本

    缓冲区布局: [canary 8][对象头 16][载荷][canary 8]
    修改区间使用对象内坐标（对象头从 0 开始），保持合并且不重叠
    """

    def __init__(self, ref: ObjectRef, image: bytes, allocated: bool = False):
        """
        Args:
            ref: 对象引用
            image: 打开时读到的对象头加载荷
            allocated: 是否为本事务新分配的对象
        """
        self.ref = ref
        self.size = len(image)
        self.allocated = allocated
        self.modified = False
        self.origin = bytes(image)
        self.requested_size = 0
        self.next: Optional['MicroBuffer'] = None
        self._raw = bytearray(CANARY_SIZE + self.size + CANARY_SIZE)
        self._mv = memoryview(self._raw)
        _U64.pack_into(self._raw, 0, PROCESS_CANARY)
        self._raw[CANARY_SIZE:CANARY_SIZE + self.size] = image
        _U64.pack_into(self._raw, CANARY_SIZE + self.size, PROCESS_CANARY)
        self._starts: List[int] = []
        self._ends: List[int] = []

    # ---- 视图 ----

    @property
    def image(self) -> memoryview:
        """对象头加载荷"""
        return self._mv[CANARY_SIZE:CANARY_SIZE + self.size]

    @property
    def payload(self) -> memoryview:
        return self._mv[CANARY_SIZE + OBJ_HEADER_SIZE:CANARY_SIZE + self.size]

    @property
    def payload_size(self) -> int:
        return self.size - OBJ_HEADER_SIZE

    @property
    def header(self) -> ObjectHeader:
        return ObjectHeader.unpack(self._raw, CANARY_SIZE)

    def set_header(self, header: ObjectHeader):
        self._raw[CANARY_SIZE:CANARY_SIZE + OBJ_HEADER_SIZE] = header.pack()

    # ---- 修改区间 ----

    def _mark(self, start: int, end: int):
        if start >= end:
            return
        i = bisect.bisect_left(self._starts, start)
        if i > 0 and self._ends[i - 1] >= start:
            i -= 1
            start = self._starts[i]
        j = i
        while j < len(self._starts) and self._starts[j] <= end:
            end = max(end, self._ends[j])
            j += 1
        self._starts[i:j] = [start]
        self._ends[i:j] = [end]
        self.modified = True

    def add_range(self, offset: int, length: int) -> memoryview:
        """
        标记载荷中将被修改的区间

        Returns:
            memoryview: 该区间的可写视图
        """
        if offset < 0 or length < 0 or offset + length > self.payload_size:
            raise StoreError(f"修改区间 [{offset}, {offset + length}) 超出对象载荷 {self.payload_size}")
        self._mark(OBJ_HEADER_SIZE + offset, OBJ_HEADER_SIZE + offset + length)
        return self.payload[offset:offset + length]

    def mark_checksum(self):
        self._mark(CHECKSUM_FIELD, OBJ_HEADER_SIZE)

    @property
    def modified_ranges(self) -> List[Tuple[int, int]]:
        """(对象内偏移, 长度)"""
        return [(s, e - s) for s, e in zip(self._starts, self._ends)]

    def diff_ranges(self):
        """把与打开时副本不同的字节登记为修改区间"""
        current = np.frombuffer(self.image, dtype=np.uint8)
        origin = np.frombuffer(self.origin, dtype=np.uint8)
        idx = np.flatnonzero(current != origin)
        if len(idx) == 0:
            return
        breaks = np.flatnonzero(np.diff(idx) > 1)
        starts = np.concatenate(([idx[0]], idx[breaks + 1]))
        ends = np.concatenate((idx[breaks], [idx[-1]])) + 1
        for s, e in zip(starts, ends):
            self._mark(int(s), int(e))

    # ---- 写入辅助 ----

    def write(self, offset: int, data) -> None:
        """
        按载荷偏移写入并登记区间

        写入只受底层缓冲区长度约束，越过对象末尾的部分会落到尾部金丝雀上
        """
        start = CANARY_SIZE + OBJ_HEADER_SIZE + offset
        if offset < 0 or start > len(self._raw):
            raise StoreError(f"写入偏移 {offset} 非法")
        n = min(len(data), len(self._raw) - start)
        self._mv[start:start + n] = bytes(data[:n])
        end = min(offset + len(data), self.payload_size)
        if end > offset:
            self._mark(OBJ_HEADER_SIZE + offset, OBJ_HEADER_SIZE + end)

    def get_u64(self, offset: int) -> int:
        return _U64.unpack_from(self.payload, offset)[0]

    def set_u64(self, offset: int, value: int):
        self.add_range(offset, 8)[:] = _U64.pack(value & 0xFFFFFFFFFFFFFFFF)

    def get_ref(self, offset: int) -> ObjectRef:
        return ObjectRef.unpack(self.payload, offset)

    def set_ref(self, offset: int, ref: ObjectRef):
        self.add_range(offset, OBJREF_SIZE)[:] = ref.pack()

    # ---- 金丝雀 ----

    def canary_ok(self) -> bool:
        lead = _U64.unpack_from(self._raw, 0)[0]
        tail = _U64.unpack_from(self._raw, CANARY_SIZE + self.size)[0]
        return lead == PROCESS_CANARY and tail == PROCESS_CANARY


def mbuf_add_range(buf: MicroBuffer, offset: int, length: int) -> memoryview:
    return buf.add_range(offset, length)


def mbuf_canary_check(buf: MicroBuffer) -> bool:
    ok = buf.canary_ok()
    if not ok:
        logging.error(f"微缓冲区金丝雀被破坏: 对象 0x{buf.ref.offset:x}")
    return ok


class TxBufferIndex:
    """事务内 ObjectRef -> MicroBuffer 的索引，同时按打开顺序串成链表"""

    def __init__(self):
        self._map: Dict[int, MicroBuffer] = {}
        self.head: Optional[MicroBuffer] = None
        self._tail: Optional[MicroBuffer] = None

    def get(self, ref: ObjectRef) -> Optional[MicroBuffer]:
        return self._map.get(ref.offset)

    def add(self, buf: MicroBuffer):
        if buf.ref.offset in self._map:
            raise StoreError(f"对象 0x{buf.ref.offset:x} 已在本事务中打开")
        self._map[buf.ref.offset] = buf
        if self._tail is None:
            self.head = buf
        else:
            self._tail.next = buf
        self._tail = buf

    def discard(self, ref: ObjectRef):
        buf = self._map.pop(ref.offset, None)
        if buf is None:
            return
        prev, cur = None, self.head
        while cur is not None and cur is not buf:
            prev, cur = cur, cur.next
        if prev is None:
            self.head = buf.next
        else:
            prev.next = buf.next
        if self._tail is buf:
            self._tail = prev

    def __iter__(self) -> Iterator[MicroBuffer]:
        cur = self.head
        while cur is not None:
            yield cur
            cur = cur.next

    def __len__(self) -> int:
        return len(self._map)

    def __contains__(self, ref: ObjectRef) -> bool:
        return ref.offset in self._map

    def clear(self):
        self._map.clear()
        self.head = self._tail = None


def object_is_valid(image, extent: int) -> bool:
    """对象头 size 与分配器槽大小一致且校验和正确"""
    if len(image) < OBJ_HEADER_SIZE:
        return False
    header = ObjectHeader.unpack(image)
    if header.size != extent:
        return False
    return object_checksum(image[:OBJ_HEADER_SIZE], image[OBJ_HEADER_SIZE:extent]) == header.checksum


def mbuf_open(tx, ref: ObjectRef, verify: bool = True) -> MicroBuffer:
    """
    在事务中打开对象的微缓冲区

    已打开则直接返回；否则复制对象，按需校验，校验失败时触发在线恢复
    """
    buf = tx.index.get(ref)
    if buf is not None:
        return buf
    pool = tx.pool
    image = read_object(pool, ref, verify)
    buf = MicroBuffer(ref, image)
    tx.register(buf)
    return buf


def read_object(pool, ref: ObjectRef, verify: bool) -> bytes:
    """读取活跃对象的头部和载荷，verify 且模式带校验和时校验并修复"""
    if ref is None or ref.is_null:
        raise InvalidRefError("空引用")
    extent = pool.object_extent(ref.offset)
    if extent is None:
        raise InvalidRefError(f"对象 0x{ref.offset:x} 不是活跃对象")
    image = pool.read(ref.offset, extent)
    verified = verify and pool.mode.checksums
    pool.stats.access(extent - OBJ_HEADER_SIZE, verified=verified)
    if verified and not object_is_valid(image, extent):
        from recovery import FaultEvent, FaultKind
        logging.warning(f"对象 0x{ref.offset:x} 校验失败，开始在线恢复")
        pool.report_fault(FaultEvent(FaultKind.CHECKSUM_MISMATCH, ref.offset))
        image = pool.read(ref.offset, extent)
        if not object_is_valid(image, extent):
            raise UnrecoverableCorruption(f"对象 0x{ref.offset:x} 修复后校验仍失败", [ref.offset])
    return image


def read_range(pool, ref: ObjectRef, offset: int, length: int, verify: bool) -> bytes:
    """
    读取对象载荷的一段

    verify 且模式带校验和时读取并校验整个对象；否则只读这一段，计入未校验访问字节
    """
    if verify and pool.mode.checksums:
        image = read_object(pool, ref, True)
        start = OBJ_HEADER_SIZE + offset
        return image[start:start + length]
    if ref is None or ref.is_null:
        raise InvalidRefError("空引用")
    extent = pool.object_extent(ref.offset)
    if extent is None:
        raise InvalidRefError(f"对象 0x{ref.offset:x} 不是活跃对象")
    if offset < 0 or length < 0 or offset + length > extent - OBJ_HEADER_SIZE:
        raise StoreError(f"读取区间 [{offset}, {offset + length}) 超出对象载荷 {extent - OBJ_HEADER_SIZE}")
    data = pool.read(ref.offset + OBJ_HEADER_SIZE + offset, length)
    pool.stats.access(length, verified=False)
    return data
