#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
对象池模块
池的创建/打开/关闭、池头副本修复、冻结与解冻、根对象、保护模式和运行统计
"""

import logging
import os
import threading
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from errors import (MediaError, ObjectBusyError, OptionError, PoolFrozenError,
                    PoolNotFoundError, StoreError, UnrecoverablePoolError)
from layout import (BADPAGE_OFF, BADPAGE_REPLICA_OFF, DEFAULT_CHUNK_SIZE, DEFAULT_LOG_PER_ZONE,
                    DEFAULT_OVERFLOW_CHUNKS, DEFAULT_ROWS_PER_ZONE, DEFAULT_TX_SLOTS,
                    HEADER_OFF, HEADER_REPLICA_OFF, HEADER_SIZE, MIN_SIZE_CLASS,
                    SLOT_HEADER_SIZE, BadPageRecord, PoolHeader, SlotHeader, ZoneMeta,
                    compute_layout, layout_report)
from mbuf import object_is_valid
from parity import (DEFAULT_LOCK_GRANULE, DEFAULT_PARITY_THRESHOLD, ParityGeometry,
                    ReadWriteLock, parity_check_zone, parity_recompute_zone)
from pmem import PAGE_SIZE, Backend, PersistentStore, map_pool
from recovery import FaultEvent, FaultKind, RecoveryManager, ScrubConfig, ScrubWorker
from zone import ChunkMeta, ObjectRef, Reservation, ZoneHeap, format_zone, load_zone_heap

FREEZE_POLICIES = ('block', 'fail')


@dataclass(frozen=True)
class ProtectionMode:
    """
    保护模式

    baseline: 无副本、无校验行、无校验和
    ml: 日志与元数据副本
    mlp: 再加对象校验行
    mlpc: 再加对象校验和（默认）
    scrub:N: mlpc 加每 N 个事务一次后台巡检
    conservative: mlpc 且每次访问都校验
    """
    name: str = 'mlpc'
    replicate: bool = True
    parity: bool = True
    checksums: bool = True
    verify_reads: bool = False
    scrub_interval: int = 0

    @classmethod
    def parse(cls, text: str) -> 'ProtectionMode':
        text = (text or 'mlpc').strip().lower()
        if text == 'baseline':
            return cls('baseline', False, False, False)
        if text == 'ml':
            return cls('ml', True, False, False)
        if text == 'mlp':
            return cls('mlp', True, True, False)
        if text == 'mlpc':
            return cls('mlpc')
        if text == 'conservative':
            return cls('conservative', verify_reads=True)
        if text.startswith('scrub:'):
            try:
                interval = int(text.split(':', 1)[1].replace('k', '000'))
            except ValueError:
                raise OptionError(f"巡检间隔格式错误: {text}")
            if interval <= 0:
                raise OptionError("巡检间隔必须大于 0")
            return cls(f'scrub:{interval}', scrub_interval=interval)
        raise OptionError(f"未知的保护模式: {text}")

    @property
    def scrub_config(self) -> ScrubConfig:
        if self.scrub_interval:
            return ScrubConfig('scrub', self.scrub_interval)
        return ScrubConfig('conservative' if self.verify_reads else 'default')


@dataclass
class PoolOptions:
    """打开池时的运行参数（不写入池文件）"""
    mode: ProtectionMode = field(default_factory=ProtectionMode)
    lock_granule: int = DEFAULT_LOCK_GRANULE
    parity_threshold: int = DEFAULT_PARITY_THRESHOLD
    freeze_policy: str = 'block'
    freeze_timeout: float = 30.0
    debug_object_locks: bool = False
    start_scrub_worker: bool = True
    backend: Backend = Backend.FILE_MAPPED

    def __post_init__(self):
        if isinstance(self.mode, str):
            self.mode = ProtectionMode.parse(self.mode)
        if self.lock_granule < 8 or self.lock_granule % 8:
            raise OptionError(f"校验锁粒度 {self.lock_granule} 必须是 8 的正整数倍")
        if self.parity_threshold < 0:
            raise OptionError("校验更新阈值不能为负")
        if self.freeze_policy not in FREEZE_POLICIES:
            raise OptionError(f"冻结策略只能是 {FREEZE_POLICIES}: {self.freeze_policy}")


class PoolStats:
    """线程安全的运行统计"""

    COUNTERS = ('commits', 'aborts', 'log_bytes', 'log_entries', 'parity_atomic', 'parity_vector',
                'parity_bytes', 'alloc_bytes', 'alloc_objects', 'mod_bytes', 'mod_objects',
                'accessed_bytes', 'vulnerable_bytes', 'faults_handled', 'scrubs', 'commit_seconds')

    def __init__(self):
        self._lock = threading.Lock()
        self.counters: Dict[str, float] = dict.fromkeys(self.COUNTERS, 0)
        self.repair_latencies: List[float] = []
        self.windows: List[int] = []
        self._window = 0

    def add(self, **deltas):
        with self._lock:
            for key, value in deltas.items():
                self.counters[key] += value

    def access(self, nbytes: int, verified: bool):
        """记录一次对象访问；未经校验的字节计入易损字节和当前巡检窗口"""
        with self._lock:
            self.counters['accessed_bytes'] += nbytes
            if not verified:
                self.counters['vulnerable_bytes'] += nbytes
                self._window += nbytes

    def roll_window(self):
        with self._lock:
            self.windows.append(self._window)
            self._window = 0

    def record_repair(self, seconds: float):
        with self._lock:
            self.repair_latencies.append(seconds)

    def vulnerability(self) -> Dict[str, float]:
        """
        易损字节指标

        window_ratio = 各巡检窗口内未校验访问字节的均值 / 全部访问字节；
        未启用巡检时只有一个窗口
        """
        with self._lock:
            accessed = self.counters['accessed_bytes']
            windows = self.windows + ([self._window] if self._window or not self.windows else [])
            mean_window = float(np.mean(windows)) if windows else 0.0
            return {
                'accessed_bytes': accessed,
                'vulnerable_bytes': self.counters['vulnerable_bytes'],
                'windows': len(windows),
                'mean_window_bytes': mean_window,
                'ratio': self.counters['vulnerable_bytes'] / accessed if accessed else 0.0,
                'window_ratio': mean_window / accessed if accessed else 0.0,
            }

    def repair_summary(self) -> Dict[str, float]:
        with self._lock:
            samples = np.array(self.repair_latencies) * 1e6
        if not len(samples):
            return {'count': 0}
        return {'count': int(len(samples)), 'mean_us': float(samples.mean()),
                'p50_us': float(np.percentile(samples, 50)),
                'p99_us': float(np.percentile(samples, 99))}

    def snapshot(self) -> Dict:
        with self._lock:
            counters = dict(self.counters)
        counters['repair'] = self.repair_summary()
        counters['vulnerability'] = self.vulnerability()
        return counters


class Pool:
    """
    已打开的对象池

    冻结是计数的：只要计数大于 0 就不允许开启新事务
    """

    def __init__(self, store: PersistentStore, header: PoolHeader,
                 options: Optional[PoolOptions] = None, path: Optional[str] = None):
        self.store = store
        self.header = header
        self.options = options or PoolOptions()
        self.mode = self.options.mode
        self.path = path
        self.stats = PoolStats()
        self.heaps: List[ZoneHeap] = []
        self._geometry = [ParityGeometry.for_zone(header, z, self.options.lock_granule)
                          for z in range(header.zone_count)]
        self.parity_locks = [[ReadWriteLock() for _ in range(g.lock_count)] for g in self._geometry]
        self.overflow_lock = threading.Lock()
        self._gate = threading.Condition()
        self._freeze_count = 0
        self._in_flight = 0
        self._slot_cond = threading.Condition()
        self._free_slots = list(range(header.tx_slots))
        self._objects_lock = threading.Lock()
        self._object_owners: Dict[int, object] = {}
        self._root_lock = threading.Lock()
        self.failed = False
        self.failure_reason: Optional[str] = None
        self.closed = False
        self.recovery = RecoveryManager(self)
        self.fault_hook = self.recovery.handle_fault
        self.scrub_worker: Optional[ScrubWorker] = None
        self.recovery_report: Dict[str, int] = {}
        self.repaired_on_open: List[str] = []

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        self.close()

    # ---- 几何与分配 ----

    def geometry(self, zone_id: int) -> ParityGeometry:
        return self._geometry[zone_id]

    def heap_for(self, offset: int) -> Optional[ZoneHeap]:
        zone_id = self.header.zone_of(offset)
        if zone_id is None or zone_id >= len(self.heaps):
            return None
        return self.heaps[zone_id]

    def object_extent(self, offset: int) -> Optional[int]:
        heap = self.heap_for(offset)
        return heap.object_extent(offset) if heap is not None else None

    def reserve(self, payload_size: int) -> Optional[Reservation]:
        """从当前线程偏好的区开始依次尝试预留"""
        count = len(self.heaps)
        start = threading.get_ident() % count
        for i in range(count):
            heap = self.heaps[(start + i) % count]
            with heap.lock:
                res = heap.reserve(payload_size)
            if res is not None:
                return res
        return None

    def release_reservation(self, res: Reservation):
        heap = self.heaps[res.zone_id]
        with heap.lock:
            heap.release(res)

    # ---- 日志槽 ----

    def acquire_slot(self) -> int:
        with self._slot_cond:
            self._slot_cond.wait_for(lambda: self._free_slots)
            return self._free_slots.pop(0)

    def release_slot(self, slot: int):
        with self._slot_cond:
            self._free_slots.append(slot)
            self._slot_cond.notify()

    # ---- 事务准入与冻结 ----

    @property
    def frozen(self) -> bool:
        return self._freeze_count > 0

    @property
    def in_flight(self) -> int:
        return self._in_flight

    def _check_usable(self):
        if self.closed:
            raise StoreError("池已关闭")
        if self.failed:
            raise UnrecoverablePoolError(f"池已失效（{self.failure_reason}），需重新打开以执行崩溃恢复")

    def enter_tx(self):
        """开启事务前检查冻结标志"""
        with self._gate:
            self._check_usable()
            if self._freeze_count:
                if self.options.freeze_policy == 'fail':
                    raise PoolFrozenError("池已冻结，拒绝开启新事务")
                if not self._gate.wait_for(lambda: self._freeze_count == 0,
                                           timeout=self.options.freeze_timeout):
                    raise PoolFrozenError(f"等待解冻超时（{self.options.freeze_timeout} 秒）")
                self._check_usable()
            self._in_flight += 1

    def exit_tx(self):
        with self._gate:
            self._in_flight -= 1
            self._gate.notify_all()

    def freeze(self):
        """设置冻结标志并等待其他进行中的事务结束（调用线程自己的事务除外）"""
        from tx import current_tx
        tx = current_tx()
        own = 1 if tx is not None and tx.pool is self else 0
        with self._gate:
            self._freeze_count += 1
            self._gate.wait_for(lambda: self._in_flight <= own)

    def thaw(self):
        with self._gate:
            if self._freeze_count == 0:
                return
            self._freeze_count -= 1
            self._gate.notify_all()

    # ---- 对象锁（调试模式） ----

    def lock_object(self, offset: int, owner):
        with self._objects_lock:
            current = self._object_owners.get(offset)
            if current is not None and current is not owner:
                raise ObjectBusyError(f"对象 0x{offset:x} 正被另一个事务修改")
            self._object_owners[offset] = owner

    def unlock_object(self, offset: int, owner):
        with self._objects_lock:
            if self._object_owners.get(offset) is owner:
                del self._object_owners[offset]

    # ---- 故障 ----

    def read(self, offset: int, length: int) -> bytes:
        """读取池内数据；遇到损坏页时交给故障钩子修复后重读"""
        handled = set()
        while True:
            try:
                return self.store.read(offset, length)
            except MediaError as e:
                if e.page_offset in handled:
                    raise
                handled.add(e.page_offset)
                self.report_fault(FaultEvent(FaultKind.MEDIA_PAGE, e.page_offset))

    def report_fault(self, event: FaultEvent):
        self._check_usable()
        return self.fault_hook(event)

    def mark_failed(self, reason: str):
        if not self.failed:
            logging.error(f"池进入失效状态: {reason}")
        self.failed = True
        self.failure_reason = reason

    def after_commit(self):
        if self.scrub_worker is not None:
            self.scrub_worker.notify_commit()

    # ---- 事务与根对象 ----

    def transaction(self):
        from tx import transaction
        return transaction(self)

    def root(self, size: int, type_id: int = 0) -> ObjectRef:
        """返回根对象；首次调用时在事务中分配并写入两份池头"""
        if self.header.root_offset:
            return ObjectRef(self.header.uuid_lo, self.header.root_offset)
        with self._root_lock:
            if self.header.root_offset:
                return ObjectRef(self.header.uuid_lo, self.header.root_offset)
            with self.transaction() as tx:
                ref = tx.alloc(size, type_id)
                tx.set_root(ref)
            logging.info(f"根对象已分配: 0x{ref.offset:x}，{size} 字节")
            return ref

    # ---- 报告 ----

    def capacity(self) -> Dict[str, int]:
        totals = {'capacity': 0, 'live': 0, 'free': 0, 'objects': 0}
        for heap in self.heaps:
            for key, value in heap.capacity().items():
                totals[key] += value
            totals['objects'] += sum(1 for _ in heap.live_objects())
        return totals

    def info(self) -> Dict:
        header = self.header
        return {
            'path': self.path,
            'uuid': header.uuid.hex(),
            'version': header.version,
            'mode': self.mode.name,
            'pool_size': header.pool_size,
            'zone_count': header.zone_count,
            'rows_per_zone': header.rows_per_zone,
            'chunk_size': header.chunk_size,
            'chunks_per_row': header.chunks_per_row,
            'row_size': header.row_size,
            'zone_size': header.zone_size,
            'tx_slots': header.tx_slots,
            'root_offset': header.root_offset,
            'layout': layout_report(header),
            'occupancy': self.capacity(),
            'frozen': self.frozen,
            'failed': self.failed,
            'recovery': self.recovery_report,
            'stats': self.stats.snapshot(),
        }

    def check(self) -> Dict:
        """
        一致性检查：两份池头、区元数据、坏页记录、块元数据、对象校验和与校验行

        检查本身不写池；打开池时已重写的池头和区元数据列在 repaired_on_open 中

        Returns:
            Dict: ok 为 False 时各列表给出不一致的位置
        """
        store = self.store
        header = self.header
        expected = header.pack()
        report = {'metadata': [], 'chunk_meta': [], 'objects': [], 'parity': [],
                  'poisoned_pages': store.poisoned_pages(), 'objects_scanned': 0,
                  'pending_badpages': [], 'repaired_on_open': list(self.repaired_on_open)}
        for off in (HEADER_OFF, HEADER_REPLICA_OFF):
            if store.read_raw(off, HEADER_SIZE) != expected:
                report['metadata'].append(header.classify(off))
        for off in (BADPAGE_OFF, BADPAGE_REPLICA_OFF):
            record, ok = BadPageRecord.unpack(store.read_raw(off, PAGE_SIZE))
            if not ok:
                report['metadata'].append(header.classify(off))
            report['pending_badpages'].extend(record.pending)
        entry_size = header.cm_entry_size
        bitmap_len = header.chunk_size // (MIN_SIZE_CLASS * 8)
        for zone_id in range(header.zone_count):
            meta = ZoneMeta.for_zone(header, zone_id).pack()
            for replica in (False, True):
                if store.read_raw(header.zone_meta_at(zone_id, replica), len(meta)) != meta:
                    report['metadata'].append(f'zone_meta[{zone_id}]{"_replica" if replica else ""}')
            base = header.zone_offset(zone_id)
            for chunk in range(header.data_chunks):
                raw = store.read_raw(base + chunk * entry_size, entry_size)
                if not ChunkMeta.unpack(raw, bitmap_len)[1]:
                    report['chunk_meta'].append({'zone': zone_id, 'chunk': chunk})
            for off, size in self.heaps[zone_id].live_objects():
                report['objects_scanned'] += 1
                if not object_is_valid(store.read_raw(off, size), size):
                    report['objects'].append(off)
            for col, length in parity_check_zone(self, zone_id):
                report['parity'].append({'zone': zone_id, 'column': col, 'length': length})
        report['ok'] = not any(report[k] for k in ('metadata', 'chunk_meta', 'objects', 'parity',
                                                  'poisoned_pages', 'pending_badpages'))
        return report

    # ---- 生命周期 ----

    def start_scrub_worker(self):
        if self.scrub_worker is None and self.mode.scrub_interval:
            self.scrub_worker = ScrubWorker(self, self.mode.scrub_interval)
            self.scrub_worker.start()

    def close(self):
        """停止巡检线程、刷写并解除映射"""
        if self.closed:
            return
        if self.scrub_worker is not None:
            self.scrub_worker.stop()
            self.scrub_worker = None
        if not self.failed:
            self.store.persist(0, self.store.length)
        self.store.close()
        self.closed = True
        logging.info(f"池已关闭: {self.path or '(内存)'}")


def pool_freeze(pool: Pool):
    pool.freeze()


def pool_thaw(pool: Pool):
    pool.thaw()


def _load_header(store: PersistentStore, repaired: List[str]) -> PoolHeader:
    """校验两份池头；主副本损坏时用副本重写，反之亦然，重写的一份记入 repaired"""
    raw_primary = store.read_raw(HEADER_OFF, HEADER_SIZE)
    raw_replica = store.read_raw(HEADER_REPLICA_OFF, HEADER_SIZE)
    primary, p_ok = PoolHeader.unpack(raw_primary)
    replica, r_ok = PoolHeader.unpack(raw_replica)
    if not p_ok and not r_ok:
        raise UnrecoverablePoolError("池头主副本和副本校验都失败")
    header = primary if p_ok else replica
    good = header.pack()
    for off, raw, name in ((HEADER_OFF, raw_primary, '主池头'), (HEADER_REPLICA_OFF, raw_replica, '池头副本')):
        if raw != good:
            repaired.append(header.classify(off))
            logging.warning(f"{name}与有效池头不一致，已重写")
            store.write(off, good)
            store.persist(off, HEADER_SIZE)
    if store.length < header.pool_size:
        raise UnrecoverablePoolError(f"池文件长度 {store.length} 小于池头记录的 {header.pool_size}")
    return header


def _repair_zone_meta(pool: Pool, repaired: List[str]):
    header = pool.header
    store = pool.store
    for zone_id in range(header.zone_count):
        expected = ZoneMeta.for_zone(header, zone_id).pack()
        for replica in (False, True):
            off = header.zone_meta_at(zone_id, replica)
            if store.read_raw(off, len(expected)) != expected:
                logging.warning(f"区 {zone_id} 元数据{'副本' if replica else ''}损坏，已重写")
                repaired.append(f'zone_meta[{zone_id}]{"_replica" if replica else ""}')
                store.write(off, expected)
                store.persist(off, len(expected))


def _invalidate_replica_slots(pool: Pool):
    """不复制日志的模式下清除过期的副本日志头"""
    header = pool.header
    store = pool.store
    for slot in range(header.tx_slots):
        off = header.slot_offset(slot, replica=True)
        if SlotHeader.unpack(store.read_raw(off, SLOT_HEADER_SIZE))[1]:
            store.fill(off, SLOT_HEADER_SIZE, 0)
            store.persist(off, SLOT_HEADER_SIZE)


def pool_open(path: Optional[str] = None, options: Optional[PoolOptions] = None,
              store: Optional[PersistentStore] = None) -> Pool:
    """
    打开对象池

    校验池头（必要时用副本修复），在冻结状态下执行崩溃恢复，再从块元数据构建分配镜像

    Args:
        path: 池文件路径
        options: 运行参数
        store: 已映射的存储（测试和 pool_create 使用）

    Returns:
        Pool: 已打开的池
    """
    options = options or PoolOptions()
    if store is None:
        if not path or (options.backend is Backend.FILE_MAPPED and not os.path.exists(path)):
            raise PoolNotFoundError(f"池文件不存在: {path}")
        store = map_pool(path, None, backend=options.backend)
    repaired: List[str] = []
    header = _load_header(store, repaired)
    pool = Pool(store, header, options, path)
    pool.repaired_on_open = repaired
    pool._freeze_count = 1
    try:
        _repair_zone_meta(pool, repaired)
        pool.recovery_report = pool.recovery.crash_recover()
        replayed, ok = PoolHeader.unpack(store.read_raw(HEADER_OFF, HEADER_SIZE))
        if ok:
            pool.header = replayed
        pool.heaps = [load_zone_heap(pool, z, pool.recovery.repair_pages)
                      for z in range(header.zone_count)]
        if not options.mode.replicate:
            _invalidate_replica_slots(pool)
    except BaseException:
        store.close()
        raise
    finally:
        pool.thaw()
    if options.start_scrub_worker:
        pool.start_scrub_worker()
    logging.info(f"池已打开: {path or '(内存)'}，{header.zone_count} 个区，模式 {options.mode.name}")
    return pool


def pool_create(path: Optional[str], pool_size: int,
                rows_per_zone: int = DEFAULT_ROWS_PER_ZONE,
                chunk_size: int = DEFAULT_CHUNK_SIZE,
                tx_slots: int = DEFAULT_TX_SLOTS,
                log_per_zone: int = DEFAULT_LOG_PER_ZONE,
                overflow_chunks: int = DEFAULT_OVERFLOW_CHUNKS,
                options: Optional[PoolOptions] = None) -> Pool:
    """
    新建对象池

    清零整个文件，写区元数据和块元数据表，按数据行计算初始校验，
    写空坏页记录，最后写池头（先主后副）

    Returns:
        Pool: 已打开的池
    """
    options = options or PoolOptions()
    header = compute_layout(pool_size, rows_per_zone, chunk_size, tx_slots,
                            log_per_zone, overflow_chunks)
    if path and options.backend is Backend.FILE_MAPPED:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    store = map_pool(path, header.pool_size, create=True, backend=options.backend)
    builder = Pool(store, header, options, path)
    builder._freeze_count = 1
    for zone_id in range(header.zone_count):
        meta = ZoneMeta.for_zone(header, zone_id).pack()
        for replica in (False, True):
            off = header.zone_meta_at(zone_id, replica)
            store.write(off, meta)
            store.persist(off, len(meta))
        format_zone(store, header, zone_id)
        parity_recompute_zone(builder, zone_id)
    empty = BadPageRecord().pack()
    for off in (BADPAGE_OFF, BADPAGE_REPLICA_OFF):
        store.write(off, empty)
        store.persist(off, PAGE_SIZE)
    raw = header.pack()
    for off in (HEADER_OFF, HEADER_REPLICA_OFF):
        store.write(off, raw)
        store.persist(off, len(raw))
    logging.info(f"池已创建: {path or '(内存)'}，{header.pool_size} 字节，{header.zone_count} 个区，"
                 f"清零耗时 {store.init_seconds:.3f} 秒")
    pool = pool_open(path, options, store=store)
    return pool
