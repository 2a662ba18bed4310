#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
恢复模块
故障拦截与在线修复、崩溃恢复（重做日志回放）、数据巡检（scrub）以及故障注入
"""

import logging
import random
import threading
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Tuple

import numpy as np

from errors import (FatalFaultError, OptionError, StoreError, UnrecoverableCorruption,
                    UnrecoverablePoolError)
from layout import (BADPAGE_OFF, BADPAGE_PENDING, BADPAGE_POISONED, BADPAGE_REPLICA_OFF,
                    HEADER_OFF, HEADER_REPLICA_OFF, MARKER_DONE, MARKER_EMPTY,
                    MARKER_LOGS_COMPLETE, SLOT_HEADER_SIZE, ZONE_META_OFF, ZONE_META_STRIDE,
                    BadPageRecord, SlotHeader, ZoneMeta)
from mbuf import object_is_valid
from parity import (row_xor, column_pieces, column_reconstruct, parity_check_zone,
                    parity_recompute_range)
from pmem import PAGE_SIZE


class FaultKind(Enum):
    MEDIA_PAGE = 'media-page'
    CHECKSUM_MISMATCH = 'checksum-mismatch'
    METADATA_MISMATCH = 'metadata-mismatch'


@dataclass(frozen=True)
class FaultEvent:
    """故障事件：类型、池内偏移、检测线程"""
    kind: FaultKind
    offset: int
    thread_id: int = field(default_factory=threading.get_ident)

    def __post_init__(self):
        if self.kind is FaultKind.MEDIA_PAGE and self.offset % PAGE_SIZE:
            raise StoreError(f"介质错误事件偏移 0x{self.offset:x} 未按页对齐")


@dataclass
class ScrubConfig:
    """巡检配置：mode 为 default / scrub / conservative"""
    mode: str = 'default'
    interval: int = 0

    def __post_init__(self):
        if self.mode == 'scrub' and self.interval <= 0:
            raise OptionError("scrub 模式的巡检间隔必须大于 0")


@dataclass
class ScrubReport:
    objects_scanned: int = 0
    mismatches: int = 0
    repaired: int = 0
    unrecoverable: int = 0
    metadata_repaired: int = 0
    parity_ranges_fixed: int = 0
    seconds: float = 0.0

    def to_dict(self) -> Dict:
        return asdict(self)


def _page_floor(offset: int) -> int:
    return offset - offset % PAGE_SIZE


def _pages(offset: int, length: int) -> List[int]:
    return list(range(_page_floor(offset), offset + length, PAGE_SIZE))


class RecoveryManager:
    """
    在线恢复的唯一所有者

    同一时刻只允许一个线程修复；另一个带着进行中事务的线程同时检测到故障时，
    视为进程被杀死（FatalFaultError），留给下次打开时的崩溃恢复
    """

    def __init__(self, pool):
        self.pool = pool
        self._lock = threading.RLock()
        self.record = BadPageRecord()

    @contextmanager
    def owned(self):
        """阻塞获取恢复所有权（巡检线程使用）"""
        with self._lock:
            yield

    # ---- 坏页记录 ----

    def _write_record(self):
        raw = self.record.pack()
        store = self.pool.store
        for off in (BADPAGE_OFF, BADPAGE_REPLICA_OFF):
            store.write(off, raw)
            store.persist(off, PAGE_SIZE)

    def load_record(self) -> BadPageRecord:
        """读取坏页记录（主副本优先），两份都无效时视为空并重写"""
        store = self.pool.store
        primary, p_ok = BadPageRecord.unpack(store.read_raw(BADPAGE_OFF, PAGE_SIZE))
        replica, r_ok = BadPageRecord.unpack(store.read_raw(BADPAGE_REPLICA_OFF, PAGE_SIZE))
        if p_ok:
            self.record = primary
        elif r_ok:
            self.record = replica
        else:
            logging.warning("坏页记录主副本和副本均无效，按空记录重写")
            self.record = BadPageRecord()
        if not (p_ok and r_ok and primary == replica):
            self._write_record()
        return self.record

    # ---- 页修复 ----

    def _repair_page(self, page: int):
        pool = self.pool
        store = pool.store
        header = pool.header
        region = header.classify(page)
        if region in ('header', 'header_replica'):
            raw = header.pack()
            store.unprotect_page(page)
            store.write(page, raw + bytes(PAGE_SIZE - len(raw)))
            store.persist(page, PAGE_SIZE)
        elif region in ('badpage', 'badpage_replica'):
            store.unprotect_page(page)
            store.write(page, self.record.pack())
            store.persist(page, PAGE_SIZE)
        elif region == 'zone_meta':
            zone_id = (page - ZONE_META_OFF) // ZONE_META_STRIDE
            raw = ZoneMeta.for_zone(header, zone_id).pack()
            store.unprotect_page(page)
            store.write(page, raw + bytes(PAGE_SIZE - len(raw)))
            store.persist(page, PAGE_SIZE)
        elif region == 'log':
            store.unprotect_page(page)
            store.fill(page, PAGE_SIZE, 0)
            store.persist(page, PAGE_SIZE)
        elif region in ('data', 'parity', 'chunk_meta', 'overflow'):
            column_reconstruct(pool, header.zone_of(page), page)
        else:
            raise StoreError(f"页 0x{page:x} 不在池内")

    def repair_pages(self, pages: List[int]):
        """
        修复一组页：先把这些页以 pending 状态持久化到坏页记录，逐页修复并计时，最后从记录中删除

        调用方需已冻结池
        """
        pages = sorted(set(pages))
        if not pages:
            return
        self.record = self.record.with_state(pages, BADPAGE_PENDING)
        self._write_record()
        for page in pages:
            start = time.perf_counter()
            self._repair_page(page)
            elapsed = time.perf_counter() - start
            self.pool.stats.record_repair(elapsed)
            logging.warning(f"页 0x{page:x} ({self.pool.header.classify(page)}) 已修复，耗时 {elapsed * 1e6:.0f} 微秒")
        self.record = self.record.with_state(pages, None)
        self._write_record()

    def note_poisoned(self, page: int):
        """把已知损坏但尚未修复的页写入坏页记录，重新打开池时恢复其不可读状态"""
        with self._lock:
            self.record = self.record.with_state([page], BADPAGE_POISONED)
            self._write_record()

    # ---- 定位损坏页 ----

    def _inconsistent_pages(self, offset: int, length: int) -> List[int]:
        """区间内已被标记坏页、或所在页列校验不一致的页"""
        pool = self.pool
        header = pool.header
        store = pool.store
        found = []
        for page in _pages(offset, length):
            if store.is_poisoned(page):
                found.append(page)
                continue
            zone_id = header.zone_of(page)
            if zone_id is None:
                continue
            column = (page - header.zone_offset(zone_id)) % header.row_size
            if np.any(row_xor(pool, zone_id, column, PAGE_SIZE)):
                found.append(page)
        return found

    def _pages_for(self, event: FaultEvent) -> List[int]:
        pool = self.pool
        header = pool.header
        if event.kind is FaultKind.MEDIA_PAGE:
            return [event.offset]
        if event.kind is FaultKind.CHECKSUM_MISMATCH:
            extent = pool.object_extent(event.offset)
            if extent is None:
                raise UnrecoverableCorruption(f"对象 0x{event.offset:x} 不是活跃对象")
            return self._inconsistent_pages(event.offset, extent)
        region = header.classify(event.offset)
        if region == 'chunk_meta':
            return self._inconsistent_pages(event.offset, header.cm_entry_size)
        return [_page_floor(event.offset)]

    def _verify_objects(self, pages: List[int]):
        """修复后校验与这些页重叠的活跃对象"""
        pool = self.pool
        if not pool.mode.checksums or not pool.heaps:
            return
        checked = set()
        for page in pages:
            heap = pool.heap_for(page)
            if heap is None:
                continue
            for off, size in heap.objects_in(page, PAGE_SIZE):
                if off in checked:
                    continue
                checked.add(off)
                extra = [p for p in _pages(off, size) if pool.store.is_poisoned(p)]
                if extra:
                    self.repair_pages(extra)
                if not object_is_valid(pool.store.read_raw(off, size), size):
                    logging.error(f"对象 0x{off:x} 修复后校验仍失败")
                    raise UnrecoverableCorruption(f"对象 0x{off:x} 修复后校验仍失败", [off])

    # ---- 在线恢复 ----

    def handle_fault(self, event: FaultEvent) -> bool:
        """
        处理一次故障：冻结池、等待其他事务结束、持久化坏页记录、重建、校验、清除记录、解冻

        Returns:
            bool: 修复成功返回 True；不可恢复时抛出 UnrecoverableCorruption
        """
        from tx import TxState, current_tx
        pool = self.pool
        tx = current_tx()
        own = tx if tx is not None and tx.pool is pool else None
        if own is not None and own.state is TxState.COMMITTING:
            pool.mark_failed("提交阶段检测到故障")
            raise FatalFaultError(f"事务提交过程中检测到故障: {event.kind.value} 0x{event.offset:x}")
        if not self._lock.acquire(blocking=False):
            if own is not None:
                pool.mark_failed("两个线程同时检测到故障")
                raise FatalFaultError(f"另一线程正在进行在线恢复，无法处理 0x{event.offset:x}")
            self._lock.acquire()
        try:
            if event.kind is FaultKind.MEDIA_PAGE and not pool.store.is_poisoned(event.offset):
                return True
            logging.warning(f"检测到故障 {event.kind.value} @ 0x{event.offset:x}，开始在线恢复")
            pool.freeze()
            try:
                pages = self._pages_for(event)
                if not pages:
                    raise UnrecoverableCorruption(f"0x{event.offset:x} 校验失败但找不到不一致的页列")
                self.repair_pages(pages)
                self._verify_objects(pages)
            finally:
                pool.thaw()
            pool.stats.add(faults_handled=1)
            logging.info(f"在线恢复完成: {len(pages)} 页")
            return True
        finally:
            self._lock.release()

    # ---- 崩溃恢复 ----

    def _load_entries(self, slot: int):
        from tx import RedoLogEntry
        pool = self.pool
        header = pool.header
        store = pool.store
        for replica in (False, True):
            slot_off = header.slot_offset(slot, replica)
            meta, ok = SlotHeader.unpack(store.read_raw(slot_off, SLOT_HEADER_SIZE))
            if not ok:
                continue
            if meta.data_len > header.log_half_size - SLOT_HEADER_SIZE or meta.overflow_len > header.overflow_half_size:
                continue
            raw = store.read_raw(slot_off + SLOT_HEADER_SIZE, meta.data_len)
            if meta.overflow_len:
                raw += store.read_raw(header.overflow_half_offset(replica), meta.overflow_len)
            entries = RedoLogEntry.decode_all(raw, meta.entry_count)
            if entries is not None:
                if replica:
                    logging.warning(f"日志槽 {slot} 主日志损坏，使用副本")
                return entries
        return None

    def _set_marker(self, slot: int, value: int):
        off = self.pool.header.slot_offset(slot)
        self.pool.store.atomic_store64(off, value)
        self.pool.store.persist(off, 8)

    def _replay(self, entries) -> List[Tuple[int, int, int]]:
        pool = self.pool
        header = pool.header
        store = pool.store
        pieces = []
        for entry in entries:
            store.write(entry.target, entry.new_bytes())
            store.persist(entry.target, entry.length)
            if header.zone_of(entry.target) is not None:
                pieces.extend((z, col, n) for z, col, _, n in column_pieces(header, entry.target, entry.length))
        return pieces

    def recompute_pieces(self, pieces: List[Tuple[int, int, int]]) -> int:
        """合并列区间后从数据行重算校验，返回重算的区间数"""
        merged: List[List[int]] = []
        for zone_id, col, n in sorted(pieces):
            if merged and merged[-1][0] == zone_id and col <= merged[-1][1] + merged[-1][2]:
                merged[-1][2] = max(merged[-1][2], col + n - merged[-1][1])
            else:
                merged.append([zone_id, col, n])
        for zone_id, col, n in merged:
            parity_recompute_range(self.pool, zone_id, col, n)
        return len(merged)

    def crash_recover(self) -> Dict[str, int]:
        """
        打开池时的崩溃恢复（调用方独占池）

        先重新执行未完成的坏页修复，再处理各日志槽：
        logs-complete 的槽校验并回放日志、重算受影响的校验区间；done 的槽清空；其余丢弃
        """
        pool = self.pool
        header = pool.header
        store = pool.store
        report = {'badpages': 0, 'replayed_slots': 0, 'replayed_entries': 0,
                  'discarded_slots': 0, 'parity_ranges': 0}
        record = self.load_record()
        pending = record.pending
        if pending:
            logging.warning(f"发现 {len(pending)} 个未完成的坏页修复，重新执行")
            self.repair_pages(pending)
            report['badpages'] = len(pending)
        in_zones = [p for p in record.poisoned if header.zone_of(p) is not None]
        self.repair_pages([p for p in record.poisoned if header.zone_of(p) is None])
        for page in in_zones:
            store.protect_page(page)
        if in_zones:
            logging.warning(f"坏页记录中有 {len(in_zones)} 个已知损坏页，访问时在线修复")
        for slot in range(header.tx_slots):
            marker = store.load64(header.slot_offset(slot))
            if marker == MARKER_EMPTY:
                continue
            if marker == MARKER_DONE:
                self._set_marker(slot, MARKER_EMPTY)
                continue
            if marker != MARKER_LOGS_COMPLETE:
                logging.warning(f"日志槽 {slot} 标记字未知 0x{marker:x}，丢弃")
                self._set_marker(slot, MARKER_EMPTY)
                report['discarded_slots'] += 1
                continue
            entries = self._load_entries(slot)
            if entries is None:
                raise UnrecoverablePoolError(f"日志槽 {slot} 已提交但主日志和副本都损坏")
            pieces = self._replay(entries)
            report['parity_ranges'] += self.recompute_pieces(pieces)
            self._set_marker(slot, MARKER_DONE)
            self._set_marker(slot, MARKER_EMPTY)
            report['replayed_slots'] += 1
            report['replayed_entries'] += len(entries)
            logging.warning(f"日志槽 {slot} 已回放 {len(entries)} 条日志")
        return report


# ---- 巡检 ----

def _scrub_pool_metadata(pool, report: ScrubReport):
    store = pool.store
    header = pool.header
    expected = header.pack()
    for off in (HEADER_OFF, HEADER_REPLICA_OFF):
        if store.read_raw(off, len(expected)) != expected:
            report.mismatches += 1
            pool.recovery.repair_pages([off])
            report.metadata_repaired += 1
    for off in (BADPAGE_OFF, BADPAGE_REPLICA_OFF):
        _, ok = BadPageRecord.unpack(store.read_raw(off, PAGE_SIZE))
        if not ok:
            report.mismatches += 1
            pool.recovery.repair_pages([off])
            report.metadata_repaired += 1


def _scrub_zone(pool, zone_id: int, report: ScrubReport):
    store = pool.store
    header = pool.header
    recovery = pool.recovery
    zone_lo = header.zone_offset(zone_id)
    zone_hi = zone_lo + header.zone_size
    poisoned = [p for p in store.poisoned_pages()
                if zone_lo <= p < zone_hi or (zone_id == 0 and p < header.zones_offset)]
    if poisoned:
        report.mismatches += len(poisoned)
        for page in poisoned:
            try:
                recovery.handle_fault(FaultEvent(FaultKind.MEDIA_PAGE, page))
                report.repaired += 1
            except UnrecoverableCorruption as e:
                logging.error(f"巡检修复页 0x{page:x} 失败: {e}")
                report.unrecoverable += 1
    if zone_id == 0:
        _scrub_pool_metadata(pool, report)

    expected = ZoneMeta.for_zone(header, zone_id).pack()
    for replica in (False, True):
        off = header.zone_meta_at(zone_id, replica)
        if store.read_raw(off, len(expected)) != expected:
            report.mismatches += 1
            recovery.repair_pages([off])
            report.metadata_repaired += 1

    heap = pool.heaps[zone_id]
    entry_size = header.cm_entry_size
    bitmap_len = len(heap.cms[0].bitmap) if heap.cms else 0
    from zone import ChunkMeta
    for chunk in range(header.data_chunks):
        off = heap.cm_entry_offset(chunk)
        _, ok = ChunkMeta.unpack(store.read_raw(off, entry_size), bitmap_len)
        if ok:
            continue
        report.mismatches += 1
        try:
            recovery.handle_fault(FaultEvent(FaultKind.METADATA_MISMATCH, off))
            report.metadata_repaired += 1
        except UnrecoverableCorruption as e:
            logging.error(f"块元数据 {chunk} 无法修复: {e}")
            report.unrecoverable += 1

    zone_unrecoverable = report.unrecoverable
    for off, size in list(heap.live_objects()):
        report.objects_scanned += 1
        if not pool.mode.checksums:
            continue
        if object_is_valid(store.read_raw(off, size), size):
            continue
        report.mismatches += 1
        try:
            recovery.handle_fault(FaultEvent(FaultKind.CHECKSUM_MISMATCH, off))
            report.repaired += 1
        except UnrecoverableCorruption as e:
            logging.error(f"对象 0x{off:x} 无法修复: {e}")
            report.unrecoverable += 1

    if pool.mode.parity and report.unrecoverable == zone_unrecoverable:
        ranges = parity_check_zone(pool, zone_id)
        if ranges:
            logging.warning(f"区 {zone_id} 有 {len(ranges)} 段校验不一致，按数据行重算")
            recovery.recompute_pieces([(zone_id, col, n) for col, n in ranges])
            report.parity_ranges_fixed += len(ranges)


def scrub(pool) -> ScrubReport:
    """
    全池巡检：逐区冻结，校验池/区/块元数据和每个活跃对象，失配时触发在线修复，
    最后检查并重算校验行

    Returns:
        ScrubReport: 统计结果
    """
    start = time.perf_counter()
    report = ScrubReport()
    for zone_id in range(pool.header.zone_count):
        pool.freeze()
        try:
            with pool.recovery.owned():
                _scrub_zone(pool, zone_id, report)
        finally:
            pool.thaw()
    report.seconds = time.perf_counter() - start
    pool.stats.add(scrubs=1)
    logging.info(f"巡检完成: 扫描 {report.objects_scanned} 个对象，失配 {report.mismatches}，"
                 f"修复 {report.repaired}，不可恢复 {report.unrecoverable}")
    return report


def recover_pool(pool) -> Dict[str, int]:
    """
    离线恢复：打开池时的崩溃恢复结果加上对所有已知损坏页的修复

    Returns:
        Dict: crash_recover 的报告，poisoned_repaired 为本次修复的损坏页数
    """
    report = dict(pool.recovery_report)
    report['poisoned_repaired'] = 0
    report['poisoned_failed'] = 0
    for page in pool.store.poisoned_pages():
        try:
            pool.report_fault(FaultEvent(FaultKind.MEDIA_PAGE, page))
            report['poisoned_repaired'] += 1
        except UnrecoverableCorruption as e:
            logging.error(f"页 0x{page:x} 无法修复: {e}")
            report['poisoned_failed'] += 1
    return report


class ScrubWorker:
    """每完成 interval 个事务触发一次巡检的后台线程"""

    def __init__(self, pool, interval: int):
        if interval <= 0:
            raise OptionError("巡检间隔必须大于 0")
        self.pool = pool
        self.interval = interval
        self.reports: List[ScrubReport] = []
        self._count = 0
        self._lock = threading.Lock()
        self._event = threading.Event()
        self._idle = threading.Condition()
        self._running = False
        self._pending = 0
        self._stopping = False
        self._thread = threading.Thread(target=self._run, name='pgl-scrub', daemon=True)

    def start(self):
        self._thread.start()
        logging.info(f"巡检线程已启动，每 {self.interval} 个事务巡检一次")

    def stop(self, timeout: float = 30.0):
        self._stopping = True
        self._event.set()
        if self._thread.is_alive():
            self._thread.join(timeout)

    def notify_commit(self):
        with self._lock:
            self._count += 1
            if self._count < self.interval:
                return
            self._count = 0
        self.pool.stats.roll_window()
        with self._idle:
            self._pending += 1
        self._event.set()

    def wait_idle(self, timeout: Optional[float] = None) -> bool:
        """等待已触发的巡检全部完成"""
        with self._idle:
            return self._idle.wait_for(lambda: self._pending == 0, timeout)

    def _run(self):
        while True:
            self._event.wait()
            self._event.clear()
            if self._stopping:
                return
            with self._idle:
                batch = self._pending
            if batch == 0:
                continue
            try:
                if not self.pool.failed:
                    self.reports.append(scrub(self.pool))
                    del self.reports[:-16]
            except Exception as e:
                logging.error(f"后台巡检异常: {str(e)}")
            with self._idle:
                self._pending -= batch
                self._idle.notify_all()


# ---- 故障注入 ----

def _zone_pages(pool, rng: random.Random) -> int:
    header = pool.header
    zone_id = rng.randrange(header.zone_count)
    base = header.zone_offset(zone_id)
    return base + rng.randrange(header.zone_size // PAGE_SIZE) * PAGE_SIZE


def _random_object(pool, rng: random.Random) -> Tuple[int, int]:
    objects = [obj for heap in pool.heaps for obj in heap.live_objects()]
    if not objects:
        raise StoreError("池中没有活跃对象可供注入")
    return objects[rng.randrange(len(objects))]


def _metadata_target(pool, rng: random.Random) -> Tuple[int, int]:
    """返回 (偏移, 长度)：池头、区元数据或块元数据条目之一"""
    header = pool.header
    choice = rng.randrange(3)
    if choice == 0:
        return rng.choice((HEADER_OFF, HEADER_REPLICA_OFF)), len(header.pack())
    zone_id = rng.randrange(header.zone_count)
    if choice == 1:
        return header.zone_meta_at(zone_id, rng.random() < 0.5), len(ZoneMeta.for_zone(header, zone_id).pack())
    chunk = rng.randrange(header.data_chunks)
    return pool.heaps[zone_id].cm_entry_offset(chunk), header.cm_entry_size


def inject_fault(pool, kind: str, target: str, seed: int, length: Optional[int] = None) -> Dict:
    """
    注入故障

    Args:
        kind: media（擦除整页并撤销读权限）或 scribble（带外随机覆写）
        target: page / object / metadata
        seed: 随机种子
        length: 覆写长度，缺省随机，最多一个块行且不跨行

    Returns:
        Dict: 注入位置描述
    """
    rng = random.Random(seed)
    header = pool.header
    store = pool.store
    desc = {'kind': kind, 'target': target, 'seed': seed}
    if target == 'object':
        obj_off, obj_size = _random_object(pool, rng)
        desc['object'] = obj_off
        region_off, region_len = obj_off, obj_size
    elif target == 'metadata':
        region_off, region_len = _metadata_target(pool, rng)
    elif target == 'page':
        region_off, region_len = _zone_pages(pool, rng), PAGE_SIZE
    else:
        raise StoreError(f"未知的注入目标: {target}")

    if kind == 'media':
        page = _page_floor(region_off + rng.randrange(region_len))
        store.protect_page(page)
        pool.recovery.note_poisoned(page)
        desc.update(offset=page, length=PAGE_SIZE, page=page, region=header.classify(page))
        logging.warning(f"已注入介质错误: 页 0x{page:x} ({desc['region']})")
        return desc
    if kind != 'scribble':
        raise StoreError(f"未知的故障类型: {kind}")

    start = region_off + rng.randrange(region_len)
    if length is None:
        length = rng.randint(1, max(1, region_off + region_len - start))
    zone_id = header.zone_of(start)
    if zone_id is not None:
        rel = start - header.zone_offset(zone_id)
        row_end = start + header.row_size - rel % header.row_size
        if start + length > row_end:
            start = max(row_end - length, header.zone_offset(zone_id) + rel // header.row_size * header.row_size)
            length = min(length, row_end - start)
    length = min(length, header.pool_size - start)
    old = np.frombuffer(store.read_raw(start, length), dtype=np.uint8)
    mask = np.frombuffer(rng.randbytes(length), dtype=np.uint8) | 1
    store.write(start, (old ^ mask).tobytes())
    store.persist(start, length)
    desc.update(offset=start, length=length, region=header.classify(start))
    logging.warning(f"已注入随机覆写: 0x{start:x} 长度 {length} ({desc['region']})")
    return desc
