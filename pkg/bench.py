#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
键值结构基准测试模块
按 WorkloadSpec 依次运行插入、查找、删除三个阶段，统计吞吐、延迟分位数、
每次插入/删除的分配与修改字节数、易损字节和页修复延迟
"""

import logging
import os
import threading
import time
from dataclasses import asdict, dataclass, replace
from typing import Callable, Dict, List, Optional

import numpy as np
import pandas as pd

from errors import OptionError
from kvstore import STRUCTURE_NAMES, kv_insert, kv_lookup, kv_open, kv_remove
from pool import Pool, PoolOptions, ProtectionMode, pool_create, pool_open

VALUE_SIZE = 8
PERCENTILES = (0.5, 0.9, 0.99)


@dataclass
class WorkloadSpec:
    """
    基准负载描述

    key_space 为 0 表示在整个 63 位空间取随机键；值固定为 64 位整数
    """
    structure: str = 'ctree'
    inserts: int = 10000
    removes: int = 0
    lookups: int = 0
    threads: int = 1
    key_space: int = 0
    value_size: int = VALUE_SIZE
    mode: str = 'mlpc'
    seed: int = 0
    verify: bool = False

    def __post_init__(self):
        if self.structure not in STRUCTURE_NAMES:
            raise OptionError(f"未知的数据结构: {self.structure}")
        if min(self.inserts, self.removes, self.lookups) < 0:
            raise OptionError("操作次数不能为负")
        if self.removes > self.inserts:
            raise OptionError("删除次数不能超过插入次数")
        if self.threads < 1:
            raise OptionError("线程数至少为 1")
        if self.key_space < 0:
            raise OptionError("键空间不能为负")
        if self.value_size != VALUE_SIZE:
            raise OptionError(f"值固定为 {VALUE_SIZE} 字节")
        ProtectionMode.parse(self.mode)


def _keys(spec: WorkloadSpec) -> np.ndarray:
    rng = np.random.default_rng(spec.seed)
    high = spec.key_space or (1 << 63)
    if spec.key_space and spec.inserts > spec.key_space:
        raise OptionError(f"键空间 {spec.key_space} 小于插入次数 {spec.inserts}")
    if spec.key_space:
        return rng.choice(spec.key_space, size=spec.inserts, replace=False).astype(np.uint64)
    return pd.unique(rng.integers(1, high, size=spec.inserts, dtype=np.uint64))


def _run_phase(keys: np.ndarray, threads: int, op: Callable[[int], object]) -> Dict:
    """把键按线程轮流分配，返回每次操作的延迟和总耗时"""
    samples: List[List[float]] = [[] for _ in range(threads)]
    errors: List[BaseException] = []

    def worker(index: int):
        out = samples[index]
        try:
            for key in keys[index::threads]:
                start = time.perf_counter()
                op(int(key))
                out.append(time.perf_counter() - start)
        except BaseException as e:
            errors.append(e)

    workers = [threading.Thread(target=worker, args=(i,), name=f'pgl-bench-{i}') for i in range(threads)]
    start = time.perf_counter()
    for t in workers:
        t.start()
    for t in workers:
        t.join()
    elapsed = time.perf_counter() - start
    if errors:
        raise errors[0]
    return {'latencies': [s for out in samples for s in out], 'seconds': elapsed}


def summarize_latencies(phases: Dict[str, Dict]) -> Dict[str, Dict]:
    """
    用 pandas 汇总各阶段延迟

    Returns:
        Dict: 阶段名 -> ops、seconds、ops_per_sec、mean_us、p50_us、p90_us、p99_us
    """
    frames = [pd.DataFrame({'phase': name, 'latency_us': np.array(result['latencies']) * 1e6})
              for name, result in phases.items() if result['latencies']]
    summary: Dict[str, Dict] = {}
    if not frames:
        return summary
    table = pd.concat(frames).groupby('phase')['latency_us'].describe(percentiles=list(PERCENTILES))
    for name, row in table.iterrows():
        seconds = phases[name]['seconds']
        summary[name] = {
            'ops': int(row['count']),
            'seconds': seconds,
            'ops_per_sec': row['count'] / seconds if seconds else 0.0,
            'mean_us': float(row['mean']),
            'p50_us': float(row['50%']),
            'p90_us': float(row['90%']),
            'p99_us': float(row['99%']),
        }
    return summary


def _tx_sizes(before: Dict, after: Dict, ops: int) -> Dict[str, float]:
    """每次操作平均分配/修改的字节数和对象数"""
    keys = ('alloc_bytes', 'alloc_objects', 'mod_bytes', 'mod_objects')
    if not ops:
        return dict.fromkeys(keys, 0.0)
    return {k: (after[k] - before[k]) / ops for k in keys}


def run_workload(pool: Pool, spec: WorkloadSpec) -> Dict:
    """
    在已打开的池上运行负载

    Args:
        pool: 已打开的池
        spec: 负载描述

    Returns:
        Dict: 基准报告
    """
    kv = kv_open(pool, spec.structure, spec.seed)
    keys = _keys(spec)
    rng = np.random.default_rng(spec.seed + 1)
    phases: Dict[str, Dict] = {}
    sizes: Dict[str, Dict] = {}
    logging.info(f"基准测试开始: {spec.structure}，模式 {pool.mode.name}，{len(keys)} 次插入，"
                 f"{spec.threads} 个线程")

    before = dict(pool.stats.counters)
    phases['insert'] = _run_phase(keys, spec.threads, lambda k: kv_insert(kv, k, k ^ 0x5A5A5A5A))
    sizes['insert'] = _tx_sizes(before, pool.stats.counters, len(keys))

    if spec.lookups and len(keys):
        probes = rng.choice(keys, size=spec.lookups)
        phases['lookup'] = _run_phase(probes, spec.threads, lambda k: kv_lookup(kv, k))

    if spec.removes:
        victims = rng.permutation(keys)[:spec.removes]
        before = dict(pool.stats.counters)
        phases['remove'] = _run_phase(victims, spec.threads, lambda k: kv_remove(kv, k))
        sizes['remove'] = _tx_sizes(before, pool.stats.counters, len(victims))

    if pool.scrub_worker is not None:
        pool.scrub_worker.wait_idle(timeout=60)

    report = {
        'workload': asdict(spec),
        'mode': pool.mode.name,
        'items': len(kv),
        'phases': summarize_latencies(phases),
        'tx_sizes': sizes,
        'vulnerability': pool.stats.vulnerability(),
        'repair': pool.stats.repair_summary(),
        'commits': int(pool.stats.counters['commits']),
        'aborts': int(pool.stats.counters['aborts']),
        'scrubs': int(pool.stats.counters['scrubs']),
    }
    if spec.verify:
        report['check_ok'] = pool.check()['ok']
    insert = report['phases'].get('insert')
    if insert:
        logging.info(f"插入阶段: {insert['ops_per_sec']:.0f} ops/s，p99 {insert['p99_us']:.1f} μs，"
                     f"平均分配 {sizes['insert']['alloc_bytes']:.1f} 字节")
    return report


def run_benchmark(spec: WorkloadSpec, path: Optional[str] = None, pool_size: int = 64 << 20,
                  options: Optional[PoolOptions] = None, **layout) -> Dict:
    """
    基准入口：path 指向已有池时打开它，否则新建一个池（path 为空时使用内存后端）

    Args:
        spec: 负载描述，spec.mode 决定打开池的保护模式
        path: 池文件路径
        pool_size: 新建池的大小
        options: 运行参数，mode 字段被 spec.mode 覆盖
        layout: 透传给 pool_create 的几何参数

    Returns:
        Dict: 基准报告
    """
    from pmem import Backend
    options = replace(options or PoolOptions(), mode=ProtectionMode.parse(spec.mode))
    if path is None:
        options = replace(options, backend=Backend.SIMULATED)
    if path and os.path.exists(path):
        pool = pool_open(path, options)
    else:
        pool = pool_create(path, pool_size, options=options, **layout)
    with pool:
        return run_workload(pool, spec)
