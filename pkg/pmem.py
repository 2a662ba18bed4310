#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
持久化抽象模块
把池文件映射进进程，定义持久化契约（flush + 顺序），
并提供可模拟崩溃的内存后端用于崩溃一致性测试
"""

import ctypes
import logging
import mmap
import os
import struct
import threading
import time
from enum import Enum
from typing import Iterator, Optional

import numpy as np

from errors import MediaError, SimulatedCrash, StoreError

PAGE_SIZE = 4096
UNIT_SIZE = 8
CACHE_LINE = 64
ATOMIC_STRIPES = 256

_U64 = struct.Struct('<Q')


class Backend(Enum):
    """存储后端类型"""
    FILE_MAPPED = 'file'
    SIMULATED = 'simulated'


def _buffer_address(buf) -> int:
    """取可写缓冲区在进程内的起始地址"""
    holder = ctypes.c_char.from_buffer(buf)
    try:
        return ctypes.addressof(holder)
    finally:
        del holder


class PersistentStore:
    """持久存储基类，子类负责提供底层缓冲区和持久化语义"""

    backend: Backend

    def __init__(self, length: int, page_size: int = PAGE_SIZE):
        if length <= 0 or length % page_size:
            raise StoreError(f"存储长度 {length} 不是页大小 {page_size} 的整数倍")
        self.length = length
        self.page_size = page_size
        self.base = 0
        self.init_seconds = 0.0
        self.bytes_written = 0
        self.persist_calls = 0
        self._poisoned = set()
        self._poison_lock = threading.Lock()
        self._stats_lock = threading.Lock()
        self._atomic_locks = [threading.Lock() for _ in range(ATOMIC_STRIPES)]
        self._mv: Optional[memoryview] = None
        self._np: Optional[np.ndarray] = None

    # ---- 子类钩子 ----

    def _before_mutation(self):
        pass

    def _mark(self, offset: int, length: int):
        pass

    def _do_persist(self, offset: int, length: int):
        raise NotImplementedError

    def _mutex(self):
        return None

    # ---- 边界与坏页检查 ----

    def _check_range(self, offset: int, length: int):
        if offset < 0 or length < 0 or offset + length > self.length:
            raise StoreError(f"访问越界: [{offset}, {offset + length}) 超出 [0, {self.length})")

    def check_access(self, offset: int, length: int):
        """读取前检查是否命中被标记为损坏的页"""
        if not self._poisoned or length == 0:
            return
        page = offset - offset % self.page_size
        while page < offset + length:
            if page in self._poisoned:
                raise MediaError(page)
            page += self.page_size

    def protect_page(self, page_offset: int):
        """
        模拟介质错误：擦除整页并撤销读权限

        Args:
            page_offset: 页起始偏移，必须按页对齐
        """
        if page_offset % self.page_size:
            raise StoreError(f"页偏移 0x{page_offset:x} 未按页对齐")
        self._check_range(page_offset, self.page_size)
        self.fill(page_offset, self.page_size, 0)
        self.persist(page_offset, self.page_size)
        with self._poison_lock:
            self._poisoned.add(page_offset)

    def unprotect_page(self, page_offset: int):
        with self._poison_lock:
            self._poisoned.discard(page_offset)

    def is_poisoned(self, page_offset: int) -> bool:
        return page_offset in self._poisoned

    def poisoned_pages(self) -> list:
        with self._poison_lock:
            return sorted(self._poisoned)

    # ---- 读 ----

    def read(self, offset: int, length: int) -> bytes:
        self._check_range(offset, length)
        self.check_access(offset, length)
        return bytes(self._mv[offset:offset + length])

    def read_raw(self, offset: int, length: int) -> bytes:
        """不做坏页检查的读取，仅供恢复路径使用"""
        self._check_range(offset, length)
        return bytes(self._mv[offset:offset + length])

    def view(self, offset: int, length: int) -> memoryview:
        """返回只读视图（直接访问持久数据）"""
        self._check_range(offset, length)
        self.check_access(offset, length)
        return self._mv[offset:offset + length].toreadonly()

    def array(self, offset: int, length: int) -> np.ndarray:
        """返回 uint8 数组视图，调用方只读"""
        self._check_range(offset, length)
        return self._np[offset:offset + length]

    def load64(self, offset: int) -> int:
        self._check_range(offset, UNIT_SIZE)
        return _U64.unpack_from(self._mv, offset)[0]

    # ---- 写 ----

    def write(self, offset: int, data) -> None:
        length = len(data)
        self._check_range(offset, length)
        if length == 0:
            return
        self._before_mutation()
        self._mv[offset:offset + length] = data
        self._mark(offset, length)
        with self._stats_lock:
            self.bytes_written += length

    def fill(self, offset: int, length: int, value: int = 0) -> None:
        self._check_range(offset, length)
        if length == 0:
            return
        self._before_mutation()
        self._np[offset:offset + length] = value
        self._mark(offset, length)
        with self._stats_lock:
            self.bytes_written += length

    def atomic_store64(self, offset: int, value: int) -> None:
        """8 字节对齐的原子写，崩溃后只会看到旧值或新值"""
        if offset % UNIT_SIZE:
            raise StoreError(f"原子写偏移 0x{offset:x} 未按 8 字节对齐")
        self._check_range(offset, UNIT_SIZE)
        self._before_mutation()
        with self._atomic_locks[(offset // CACHE_LINE) % ATOMIC_STRIPES]:
            _U64.pack_into(self._mv, offset, value & 0xFFFFFFFFFFFFFFFF)
            self._mark(offset, UNIT_SIZE)
        with self._stats_lock:
            self.bytes_written += UNIT_SIZE

    def xor_into(self, offset: int, delta: np.ndarray) -> None:
        """普通（向量化）异或，调用方需持有独占范围锁"""
        length = len(delta)
        self._check_range(offset, length)
        if length == 0:
            return
        self._before_mutation()
        self._np[offset:offset + length] ^= delta
        self._mark(offset, length)
        with self._stats_lock:
            self.bytes_written += length

    def atomic_xor(self, offset: int, delta: np.ndarray) -> None:
        """按缓存行加锁的原子异或，多个共享持有者可以并发调用"""
        length = len(delta)
        self._check_range(offset, length)
        if length == 0:
            return
        self._before_mutation()
        pos = offset
        end = offset + length
        while pos < end:
            line = pos // CACHE_LINE
            line_end = min(end, (line + 1) * CACHE_LINE)
            with self._atomic_locks[line % ATOMIC_STRIPES]:
                self._np[pos:line_end] ^= delta[pos - offset:line_end - offset]
            pos = line_end
        self._mark(offset, length)
        with self._stats_lock:
            self.bytes_written += length

    def persist(self, offset: int, length: int) -> None:
        """范围内之前的写入全部持久化，同时作为顺序点"""
        self._check_range(offset, length)
        if length == 0:
            return
        self._before_mutation()
        self._do_persist(offset, length)
        with self._stats_lock:
            self.persist_calls += 1

    def close(self):
        pass


class FileMappedStore(PersistentStore):
    """基于 mmap 的文件映射后端"""

    backend = Backend.FILE_MAPPED

    def __init__(self, path: str, length: Optional[int] = None, create: bool = False):
        if create:
            if length is None:
                raise StoreError("创建池文件必须指定长度")
            super().__init__(length)
            self.path = path
            directory = os.path.dirname(path)
            if directory:
                os.makedirs(directory, exist_ok=True)
            start = time.perf_counter()
            with open(path, 'wb') as f:
                block = bytes(1 << 20)
                remaining = length
                while remaining > 0:
                    n = min(remaining, len(block))
                    f.write(block[:n])
                    remaining -= n
                f.flush()
                os.fsync(f.fileno())
            self.init_seconds = time.perf_counter() - start
            logging.info(f"池文件 {path} 已清零初始化，{length} 字节，耗时 {self.init_seconds:.3f} 秒")
        else:
            try:
                file_size = os.path.getsize(path)
            except OSError as e:
                raise StoreError(f"无法打开池文件 {path}: {e}")
            if length is None:
                length = file_size
            if file_size < length:
                raise StoreError(f"池文件 {path} 长度 {file_size} 小于期望的 {length}")
            super().__init__(length)
            self.path = path
        self._file = open(path, 'r+b')
        self._mmap = mmap.mmap(self._file.fileno(), self.length)
        self._mv = memoryview(self._mmap)
        self._np = np.frombuffer(self._mmap, dtype=np.uint8)
        self.base = _buffer_address(self._mmap)

    def _do_persist(self, offset: int, length: int):
        granularity = mmap.ALLOCATIONGRANULARITY
        start = offset - offset % granularity
        end = min(self.length, offset + length)
        self._mmap.flush(start, end - start)

    def close(self):
        if self._mmap is None:
            return
        self._mmap.flush()
        self._np = None
        self._mv.release()
        self._mv = None
        self._mmap.close()
        self._mmap = None
        self._file.close()


class SimulatedStore(PersistentStore):
    """
    崩溃模拟后端

    维护易失视图和已持久化镜像两份字节数组，以 8 字节为单位记录未刷写的单元。
    崩溃时每个未刷写单元独立地要么生效要么丢弃。所有修改在内部串行化。
    """

    backend = Backend.SIMULATED

    def __init__(self, length: Optional[int] = None, image: Optional[bytes] = None):
        if image is not None:
            length = len(image)
        if length is None:
            raise StoreError("模拟后端需要长度或镜像")
        super().__init__(length)
        self._volatile = bytearray(image) if image is not None else bytearray(length)
        self._committed = bytearray(self._volatile)
        self._mv = memoryview(self._volatile)
        self._np = np.frombuffer(self._volatile, dtype=np.uint8)
        self._committed_np = np.frombuffer(self._committed, dtype=np.uint8)
        self._dirty = np.zeros(length // UNIT_SIZE, dtype=bool)
        self._lock = threading.RLock()
        self._countdown: Optional[int] = None
        self.mutation_count = 0
        self.base = _buffer_address(self._volatile)

    def arm_crash(self, after_ops: Optional[int]):
        """
        设置崩溃点

        Args:
            after_ops: 再允许执行多少次修改操作；None 表示取消
        """
        with self._lock:
            self._countdown = after_ops

    def _before_mutation(self):
        with self._lock:
            self.mutation_count += 1
            if self._countdown is not None:
                if self._countdown <= 0:
                    self._countdown = None
                    raise SimulatedCrash("到达模拟崩溃点")
                self._countdown -= 1

    def _mark(self, offset: int, length: int):
        self._dirty[offset // UNIT_SIZE:(offset + length + UNIT_SIZE - 1) // UNIT_SIZE] = True

    def write(self, offset: int, data) -> None:
        with self._lock:
            super().write(offset, data)

    def fill(self, offset: int, length: int, value: int = 0) -> None:
        with self._lock:
            super().fill(offset, length, value)

    def atomic_store64(self, offset: int, value: int) -> None:
        with self._lock:
            super().atomic_store64(offset, value)

    def xor_into(self, offset: int, delta: np.ndarray) -> None:
        with self._lock:
            super().xor_into(offset, delta)

    def atomic_xor(self, offset: int, delta: np.ndarray) -> None:
        with self._lock:
            super().atomic_xor(offset, delta)

    def persist(self, offset: int, length: int) -> None:
        with self._lock:
            super().persist(offset, length)

    def _do_persist(self, offset: int, length: int):
        u0 = offset // UNIT_SIZE
        u1 = (offset + length + UNIT_SIZE - 1) // UNIT_SIZE
        self._committed_np[u0 * UNIT_SIZE:u1 * UNIT_SIZE] = self._np[u0 * UNIT_SIZE:u1 * UNIT_SIZE]
        self._dirty[u0:u1] = False

    def pending_units(self) -> np.ndarray:
        """尚未持久化的单元偏移"""
        with self._lock:
            return np.flatnonzero(self._dirty) * UNIT_SIZE

    def committed_image(self) -> bytes:
        with self._lock:
            return bytes(self._committed)

    def crash_image(self, rng: Optional[np.random.Generator] = None,
                    survivors: Optional[np.ndarray] = None) -> bytes:
        """
        生成一份崩溃后的镜像

        Args:
            rng: 随机数生成器，每个未刷写单元以 1/2 概率保留
            survivors: 显式指定保留哪些未刷写单元（与 pending_units 等长的布尔数组）
        """
        with self._lock:
            units = np.flatnonzero(self._dirty)
            if survivors is None:
                rng = rng or np.random.default_rng()
                survivors = rng.random(len(units)) < 0.5
            image = self._committed_np.copy()
            keep = units[np.asarray(survivors, dtype=bool)]
            if len(keep):
                idx = (keep[:, None] * UNIT_SIZE + np.arange(UNIT_SIZE)).ravel()
                image[idx] = self._np[idx]
            return image.tobytes()

    def enumerate_crash_images(self, max_units: int = 10) -> Iterator[bytes]:
        """枚举全部 2^k 种崩溃镜像，k 超过上限时报错"""
        k = len(self.pending_units())
        if k > max_units:
            raise StoreError(f"未刷写单元 {k} 个，超过枚举上限 {max_units}")
        for mask in range(1 << k):
            survivors = np.array([(mask >> i) & 1 for i in range(k)], dtype=bool)
            yield self.crash_image(survivors=survivors)


def map_pool(path: Optional[str], length: Optional[int], create: bool = False,
             backend: Backend = Backend.FILE_MAPPED) -> PersistentStore:
    """
    映射池文件

    Args:
        path: 池文件路径（模拟后端可为 None）
        length: 字节数，必须是 4096 的整数倍
        create: 是否新建并清零

    Returns:
        PersistentStore: 存储对象
    """
    if length is not None and length % PAGE_SIZE:
        raise StoreError(f"池长度 {length} 未按 {PAGE_SIZE} 对齐")
    if backend is Backend.SIMULATED:
        if not create and path and os.path.exists(path):
            with open(path, 'rb') as f:
                return SimulatedStore(image=f.read())
        start = time.perf_counter()
        store = SimulatedStore(length=length)
        store.init_seconds = time.perf_counter() - start
        return store
    return FileMappedStore(path, length, create)


def persist(store: PersistentStore, offset: int, length: int) -> None:
    store.persist(offset, length)


def atomic_store64(store: PersistentStore, offset: int, value: int) -> None:
    store.atomic_store64(offset, value)


def crash_and_recover_image(store: PersistentStore,
                            rng: Optional[np.random.Generator] = None) -> bytes:
    """返回一份崩溃后的镜像，仅模拟后端支持"""
    if store.backend is not Backend.SIMULATED:
        raise StoreError("文件映射后端不支持崩溃镜像")
    return store.crash_image(rng)
