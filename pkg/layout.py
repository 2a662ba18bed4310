#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
池文件布局模块
定义池头、区元数据、坏页记录、日志槽头等持久结构（全部小端），
以及由池头推导出的几何换算。详细字节布局见 LAYOUT.md
"""

import math
import struct
import uuid as uuidlib
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

from checksum import adler32
from errors import LayoutError
from pmem import PAGE_SIZE

MAGIC = int.from_bytes(b'PARPOOL\x01', 'little')
VERSION = 1

HEADER_OFF = 0
HEADER_REPLICA_OFF = PAGE_SIZE
BADPAGE_OFF = 2 * PAGE_SIZE
BADPAGE_REPLICA_OFF = 3 * PAGE_SIZE
ZONE_META_OFF = 4 * PAGE_SIZE
ZONE_META_STRIDE = 2 * PAGE_SIZE

DEFAULT_ROWS_PER_ZONE = 100
DEFAULT_CHUNK_SIZE = 262144
DEFAULT_TX_SLOTS = 8
DEFAULT_LOG_PER_ZONE = 1 << 20
DEFAULT_OVERFLOW_CHUNKS = 8
MAX_ZONE_SIZE = 16 << 30

MIN_SIZE_CLASS = 64
SLOT_HEADER_SIZE = 64

# 提交标记
MARKER_EMPTY = 0
MARKER_LOGS_COMPLETE = 0x4C4F47535F4F4B21
MARKER_DONE = 0x444F4E455F5F5F21

# 坏页状态
BADPAGE_PENDING = 1
BADPAGE_POISONED = 2

_HEADER_BODY = struct.Struct('<Q16s7I8Q')
_HEADER_CSUM = struct.Struct('<I')
HEADER_SIZE = _HEADER_BODY.size + _HEADER_CSUM.size
ROOT_FIELD_OFF = 8 + 16 + 7 * 4 + 8

_ZONE_META_BODY = struct.Struct('<8IQQQ')
_BADPAGE_HEAD = struct.Struct('<QII')
_BADPAGE_ENTRY = struct.Struct('<QQ')
BADPAGE_MAX_ENTRIES = (PAGE_SIZE - _BADPAGE_HEAD.size) // _BADPAGE_ENTRY.size

_SLOT_HEAD = struct.Struct('<QQQQI')


def align_up(value: int, alignment: int) -> int:
    return (value + alignment - 1) // alignment * alignment


def cm_entry_size(chunk_size: int) -> int:
    """单个块元数据条目长度：16 字节头 + 位图（按最小尺寸类算）"""
    return align_up(16 + chunk_size // (MIN_SIZE_CLASS * 8), 8)


@dataclass
class PoolHeader:
    """池头（主副本位于 0，副本位于 4K）"""
    uuid: bytes
    pool_size: int
    zone_count: int
    rows_per_zone: int
    chunk_size: int
    chunks_per_row: int
    zone_size: int
    tx_slots: int
    log_slot_size: int
    overflow_chunks: int
    badpage_offset: int = BADPAGE_OFF
    zone_meta_offset: int = ZONE_META_OFF
    log_offset: int = 0
    zones_offset: int = 0
    root_offset: int = 0
    magic: int = MAGIC
    version: int = VERSION

    # ---- 编解码 ----

    def pack_body(self) -> bytes:
        return _HEADER_BODY.pack(
            self.magic, self.uuid, self.version, self.zone_count, self.rows_per_zone,
            self.chunk_size, self.tx_slots, self.overflow_chunks, self.chunks_per_row,
            self.pool_size, self.root_offset, self.badpage_offset, self.zone_meta_offset,
            self.log_offset, self.zones_offset, self.log_slot_size, self.zone_size)

    def pack(self) -> bytes:
        body = self.pack_body()
        return body + _HEADER_CSUM.pack(adler32(body))

    @classmethod
    def unpack(cls, raw: bytes) -> Tuple[Optional['PoolHeader'], bool]:
        """
        解析池头

        Returns:
            (PoolHeader 或 None, 校验是否通过)
        """
        raw = bytes(raw[:HEADER_SIZE])
        if len(raw) < HEADER_SIZE:
            return None, False
        body = raw[:_HEADER_BODY.size]
        (stored,) = _HEADER_CSUM.unpack_from(raw, _HEADER_BODY.size)
        (magic, uid, version, zone_count, rows, chunk, slots, overflow, cpr,
         pool_size, root, badpage, zone_meta, log, zones, slot_size, zone_size) = _HEADER_BODY.unpack(body)
        header = cls(uuid=uid, pool_size=pool_size, zone_count=zone_count, rows_per_zone=rows,
                     chunk_size=chunk, chunks_per_row=cpr, zone_size=zone_size, tx_slots=slots,
                     log_slot_size=slot_size, overflow_chunks=overflow, badpage_offset=badpage,
                     zone_meta_offset=zone_meta, log_offset=log, zones_offset=zones,
                     root_offset=root, magic=magic, version=version)
        valid = magic == MAGIC and stored == adler32(body)
        return header, valid

    def with_root(self, root_offset: int) -> 'PoolHeader':
        return replace(self, root_offset=root_offset)

    # ---- 几何换算 ----

    @property
    def uuid_lo(self) -> int:
        return int.from_bytes(self.uuid[:8], 'little')

    @property
    def row_size(self) -> int:
        return self.chunks_per_row * self.chunk_size

    @property
    def data_rows(self) -> int:
        return self.rows_per_zone - 1

    @property
    def data_chunks(self) -> int:
        return self.data_rows * self.chunks_per_row

    @property
    def cm_entry_size(self) -> int:
        return cm_entry_size(self.chunk_size)

    @property
    def meta_chunks(self) -> int:
        return math.ceil(self.data_chunks * self.cm_entry_size / self.chunk_size)

    @property
    def log_half_size(self) -> int:
        return self.log_slot_size // 2

    @property
    def overflow_half_size(self) -> int:
        return self.overflow_chunks // 2 * self.chunk_size

    @property
    def overflow_first_chunk(self) -> int:
        return self.data_chunks - self.overflow_chunks

    @property
    def overflow_offset(self) -> int:
        return self.zone_offset(0) + self.overflow_first_chunk * self.chunk_size

    def overflow_half_offset(self, replica: bool) -> int:
        return self.overflow_offset + (self.overflow_half_size if replica else 0)

    def zone_offset(self, zone_id: int) -> int:
        return self.zones_offset + zone_id * self.zone_size

    def parity_offset(self, zone_id: int) -> int:
        return self.zone_offset(zone_id) + self.data_rows * self.row_size

    def zone_meta_at(self, zone_id: int, replica: bool = False) -> int:
        return self.zone_meta_offset + zone_id * ZONE_META_STRIDE + (PAGE_SIZE if replica else 0)

    def slot_offset(self, slot: int, replica: bool = False) -> int:
        return self.log_offset + slot * self.log_slot_size + (self.log_half_size if replica else 0)

    def chunk_offset(self, zone_id: int, chunk: int) -> int:
        return self.zone_offset(zone_id) + chunk * self.chunk_size

    def zone_of(self, offset: int) -> Optional[int]:
        if offset < self.zones_offset or offset >= self.pool_size:
            return None
        return (offset - self.zones_offset) // self.zone_size

    def classify(self, offset: int) -> str:
        """返回偏移所在区域的名称"""
        if offset < 0 or offset >= self.pool_size:
            return 'outside'
        if offset < HEADER_REPLICA_OFF:
            return 'header'
        if offset < BADPAGE_OFF:
            return 'header_replica'
        if offset < BADPAGE_REPLICA_OFF:
            return 'badpage'
        if offset < ZONE_META_OFF:
            return 'badpage_replica'
        if offset < self.log_offset:
            return 'zone_meta'
        if offset < self.zones_offset:
            return 'log'
        zone_id = self.zone_of(offset)
        rel = offset - self.zone_offset(zone_id)
        if rel >= self.data_rows * self.row_size:
            return 'parity'
        chunk = rel // self.chunk_size
        if chunk < self.meta_chunks:
            return 'chunk_meta'
        if zone_id == 0 and chunk >= self.overflow_first_chunk:
            return 'overflow'
        return 'data'


def new_uuid() -> bytes:
    return uuidlib.uuid4().bytes


def compute_layout(pool_size: int, rows_per_zone: int = DEFAULT_ROWS_PER_ZONE,
                   chunk_size: int = DEFAULT_CHUNK_SIZE, tx_slots: int = DEFAULT_TX_SLOTS,
                   log_per_zone: int = DEFAULT_LOG_PER_ZONE,
                   overflow_chunks: int = DEFAULT_OVERFLOW_CHUNKS,
                   uuid: Optional[bytes] = None) -> PoolHeader:
    """
    计算池布局

    区大小 = (池大小 - 元数据 - 日志区) / 区数量，向下取整到 rows_per_zone × 行大小。
    返回的池头中 pool_size 为实际使用的长度（元数据 + 日志 + 区恰好铺满）。

    Args:
        pool_size: 期望的池大小
        rows_per_zone: 每区块行数（最后一行为校验行）
        chunk_size: 块大小，4096 的二次幂倍数

    Returns:
        PoolHeader: 尚未写入的池头
    """
    if pool_size % PAGE_SIZE:
        raise LayoutError(f"池大小 {pool_size} 未按 {PAGE_SIZE} 对齐")
    if rows_per_zone < 2:
        raise LayoutError("每区至少需要一行数据行和一行校验行")
    if chunk_size < PAGE_SIZE or chunk_size & (chunk_size - 1):
        raise LayoutError(f"块大小 {chunk_size} 必须是不小于 {PAGE_SIZE} 的二的幂")
    if tx_slots < 1:
        raise LayoutError("日志槽数量至少为 1")
    if log_per_zone % PAGE_SIZE:
        raise LayoutError(f"每区日志大小 {log_per_zone} 未按页对齐")

    def fixed(zones: int) -> int:
        return ZONE_META_OFF + zones * ZONE_META_STRIDE + zones * log_per_zone

    zone_count = 1
    while True:
        available = pool_size - fixed(zone_count)
        if available <= 0:
            raise LayoutError(f"池大小 {pool_size} 不足以容纳元数据和日志区")
        needed = math.ceil(available / MAX_ZONE_SIZE)
        if needed <= zone_count:
            break
        zone_count = needed

    zone_raw = available // zone_count
    chunks_per_row = zone_raw // (rows_per_zone * chunk_size)
    if chunks_per_row < 1:
        raise LayoutError(f"池大小 {pool_size} 容纳不下 {rows_per_zone} 行 × {chunk_size} 字节的区")

    log_total = zone_count * log_per_zone
    slot_size = (log_total // tx_slots) // (2 * PAGE_SIZE) * (2 * PAGE_SIZE)
    if slot_size < 2 * PAGE_SIZE:
        raise LayoutError(f"日志区 {log_total} 字节不足以划分 {tx_slots} 个日志槽")

    overflow = min(overflow_chunks, chunks_per_row - chunks_per_row % 2)
    overflow -= overflow % 2

    zone_size = rows_per_zone * chunks_per_row * chunk_size
    log_offset = ZONE_META_OFF + zone_count * ZONE_META_STRIDE
    zones_offset = log_offset + log_total
    header = PoolHeader(
        uuid=uuid or new_uuid(),
        pool_size=zones_offset + zone_count * zone_size,
        zone_count=zone_count,
        rows_per_zone=rows_per_zone,
        chunk_size=chunk_size,
        chunks_per_row=chunks_per_row,
        zone_size=zone_size,
        tx_slots=tx_slots,
        log_slot_size=slot_size,
        overflow_chunks=overflow,
        log_offset=log_offset,
        zones_offset=zones_offset,
    )
    if header.meta_chunks + header.overflow_chunks >= header.data_chunks:
        raise LayoutError(f"数据块 {header.data_chunks} 个，不足以容纳块元数据和溢出日志区")
    return header


def layout_report(header: PoolHeader) -> Dict[str, int]:
    """
    按区域统计字节数

    Returns:
        Dict: 各区域字节数以及非数据开销占比
    """
    zc = header.zone_count
    report = {
        'header': 2 * PAGE_SIZE,
        'badpage_record': 2 * PAGE_SIZE,
        'zone_meta': zc * ZONE_META_STRIDE,
        'logs': header.zones_offset - header.log_offset,
        'parity': zc * header.row_size,
        'chunk_meta': zc * header.meta_chunks * header.chunk_size,
        'overflow': header.overflow_chunks * header.chunk_size,
        'zone_size': header.zone_size,
        'pool_size': header.pool_size,
    }
    overhead = sum(report[k] for k in ('header', 'badpage_record', 'zone_meta', 'logs',
                                       'parity', 'chunk_meta', 'overflow'))
    report['data'] = header.pool_size - overhead
    report['overhead'] = overhead
    report['overhead_ratio'] = overhead / header.pool_size
    return report


@dataclass
class ZoneMeta:
    """区元数据（主副本与副本各占一页）"""
    zone_id: int
    rows: int
    chunks_per_row: int
    chunk_size: int
    meta_chunks: int
    overflow_first: int
    overflow_count: int
    row_size: int
    zone_offset: int
    chunk_count: int

    def pack(self) -> bytes:
        body = _ZONE_META_BODY.pack(self.zone_id, self.rows, self.chunks_per_row, self.chunk_size,
                                    self.meta_chunks, self.overflow_first, self.overflow_count, 0,
                                    self.row_size, self.zone_offset, self.chunk_count)
        return body + _HEADER_CSUM.pack(adler32(body))

    @classmethod
    def unpack(cls, raw: bytes) -> Tuple['ZoneMeta', bool]:
        raw = bytes(raw[:_ZONE_META_BODY.size + 4])
        body = raw[:_ZONE_META_BODY.size]
        (stored,) = _HEADER_CSUM.unpack_from(raw, _ZONE_META_BODY.size)
        (zid, rows, cpr, chunk, meta, ofirst, ocount, _pad,
         row_size, zoff, ccount) = _ZONE_META_BODY.unpack(body)
        meta_obj = cls(zid, rows, cpr, chunk, meta, ofirst, ocount, row_size, zoff, ccount)
        return meta_obj, stored == adler32(body)

    @classmethod
    def for_zone(cls, header: PoolHeader, zone_id: int) -> 'ZoneMeta':
        has_overflow = zone_id == 0 and header.overflow_chunks > 0
        return cls(zone_id=zone_id, rows=header.rows_per_zone, chunks_per_row=header.chunks_per_row,
                   chunk_size=header.chunk_size, meta_chunks=header.meta_chunks,
                   overflow_first=header.overflow_first_chunk if has_overflow else 0,
                   overflow_count=header.overflow_chunks if has_overflow else 0,
                   row_size=header.row_size, zone_offset=header.zone_offset(zone_id),
                   chunk_count=header.data_chunks)


@dataclass
class BadPageRecord:
    """持久坏页记录：[(页偏移, 状态)]"""
    entries: List[Tuple[int, int]] = field(default_factory=list)

    def pack(self) -> bytes:
        if len(self.entries) > BADPAGE_MAX_ENTRIES:
            raise LayoutError(f"坏页记录超过 {BADPAGE_MAX_ENTRIES} 项")
        body = b''.join(_BADPAGE_ENTRY.pack(off, state) for off, state in self.entries)
        count = struct.pack('<Q', len(self.entries))
        head = _BADPAGE_HEAD.pack(len(self.entries), adler32(count + body), 0)
        raw = head + body
        return raw + bytes(PAGE_SIZE - len(raw))

    @classmethod
    def unpack(cls, raw: bytes) -> Tuple['BadPageRecord', bool]:
        count, stored, _pad = _BADPAGE_HEAD.unpack_from(raw, 0)
        if count > BADPAGE_MAX_ENTRIES:
            return cls(), False
        start = _BADPAGE_HEAD.size
        body = bytes(raw[start:start + count * _BADPAGE_ENTRY.size])
        if stored != adler32(struct.pack('<Q', count) + body):
            return cls(), False
        entries = [_BADPAGE_ENTRY.unpack_from(body, i * _BADPAGE_ENTRY.size) for i in range(count)]
        return cls(entries), True

    @property
    def pending(self) -> List[int]:
        return [off for off, state in self.entries if state == BADPAGE_PENDING]

    @property
    def poisoned(self) -> List[int]:
        return [off for off, state in self.entries if state == BADPAGE_POISONED]

    def with_state(self, pages: List[int], state: Optional[int]) -> 'BadPageRecord':
        """把 pages 的状态改为 state（None 表示删除）"""
        targets = set(pages)
        entries = [(off, s) for off, s in self.entries if off not in targets]
        if state is not None:
            entries.extend((off, state) for off in sorted(targets))
        return BadPageRecord(sorted(entries))


@dataclass
class SlotHeader:
    """日志槽半区头：标记字（仅主半区有效）、条目数、槽内字节数、溢出区字节数"""
    marker: int = MARKER_EMPTY
    entry_count: int = 0
    data_len: int = 0
    overflow_len: int = 0

    def checksum(self) -> int:
        return adler32(struct.pack('<QQQ', self.entry_count, self.data_len, self.overflow_len))

    def pack(self) -> bytes:
        raw = _SLOT_HEAD.pack(self.marker, self.entry_count, self.data_len,
                              self.overflow_len, self.checksum())
        return raw + bytes(SLOT_HEADER_SIZE - len(raw))

    @classmethod
    def unpack(cls, raw: bytes) -> Tuple['SlotHeader', bool]:
        marker, count, data_len, overflow_len, stored = _SLOT_HEAD.unpack_from(raw, 0)
        slot = cls(marker, count, data_len, overflow_len)
        return slot, stored == slot.checksum()
