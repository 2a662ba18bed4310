#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
校验和模块
Adler32 全量计算（zlib）与增量替换（numpy），用于对象、元数据和日志条目
"""

import zlib
from dataclasses import dataclass

import numpy as np

from errors import StoreError

MOD_ADLER = 65521

# 对象头: size u64 | type_id u32 | checksum u32
OBJ_HEADER_SIZE = 16
CHECKSUM_FIELD = 12


@dataclass(frozen=True)
class Adler32State:
    """Adler32 的两个余数，组合值为 b << 16 | a"""
    a: int = 1
    b: int = 0

    @classmethod
    def from_value(cls, value: int) -> 'Adler32State':
        return cls(value & 0xFFFF, (value >> 16) & 0xFFFF)

    @property
    def value(self) -> int:
        return (self.b << 16) | self.a

    def update(self, data) -> 'Adler32State':
        return Adler32State.from_value(zlib.adler32(data, self.value))


def adler32(data, start: int = 1) -> int:
    """标准 Adler32，空输入为 0x00000001"""
    return zlib.adler32(data, start) & 0xFFFFFFFF


def adler32_replace(old_sum: int, total_len: int, range_offset: int,
                    old_bytes, new_bytes) -> int:
    """
    增量更新 Adler32

    Args:
        old_sum: 原缓冲区的校验和
        total_len: 缓冲区总长度
        range_offset: 被替换区间在缓冲区中的起始位置
        old_bytes: 区间内的旧字节
        new_bytes: 区间内的新字节

    Returns:
        int: 替换后整个缓冲区的 Adler32
    """
    if len(old_bytes) != len(new_bytes):
        raise StoreError(f"新旧字节长度不一致: {len(old_bytes)} != {len(new_bytes)}")
    n = len(new_bytes)
    if range_offset < 0 or range_offset + n > total_len:
        raise StoreError(f"替换区间 [{range_offset}, {range_offset + n}) 超出长度 {total_len}")
    if n == 0:
        return old_sum
    old = np.frombuffer(old_bytes, dtype=np.uint8).astype(np.int64)
    new = np.frombuffer(new_bytes, dtype=np.uint8).astype(np.int64)
    d = new - old
    changed = np.flatnonzero(d)
    if len(changed) == 0:
        return old_sum
    d = d[changed]
    weights = (total_len - range_offset - changed) % MOD_ADLER
    a = old_sum & 0xFFFF
    b = (old_sum >> 16) & 0xFFFF
    a = (a + int(d.sum())) % MOD_ADLER
    b = (b + int((weights * d).sum())) % MOD_ADLER
    return (b << 16) | a


def object_checksum(header, payload) -> int:
    """
    对象校验和：覆盖头部的 size 和 type_id 以及载荷，不包含校验和字段本身

    Args:
        header: 对象头字节（至少前 12 字节）
        payload: 载荷字节
    """
    return adler32(payload, adler32(bytes(header[:CHECKSUM_FIELD])))


def _stream_pieces(offset: int, length: int):
    """把对象内偏移映射到校验流位置，跳过校验和字段"""
    end = offset + length
    pieces = []
    if offset < CHECKSUM_FIELD:
        stop = min(end, CHECKSUM_FIELD)
        pieces.append((offset, stop, offset))
    lo = max(offset, OBJ_HEADER_SIZE)
    if end > lo:
        pieces.append((lo, end, lo - (OBJ_HEADER_SIZE - CHECKSUM_FIELD)))
    return pieces


def object_checksum_replace(old_sum: int, object_len: int, offset: int,
                            old_bytes, new_bytes) -> int:
    """
    按对象内偏移（头部从 0 开始）增量更新对象校验和

    Args:
        object_len: 头部加载荷的总长度
        offset: 修改区间在对象内的偏移
    """
    stream_len = object_len - (OBJ_HEADER_SIZE - CHECKSUM_FIELD)
    old_mv = memoryview(bytes(old_bytes))
    new_mv = memoryview(bytes(new_bytes))
    total = old_sum
    for lo, hi, pos in _stream_pieces(offset, len(new_mv)):
        total = adler32_replace(total, stream_len, pos,
                                old_mv[lo - offset:hi - offset],
                                new_mv[lo - offset:hi - offset])
    return total
