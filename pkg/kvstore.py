#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
键值结构模块
持久键值结构的公共基类、根目录对象以及 kv_insert / kv_remove / kv_lookup 接口

键和值都是 64 位无符号整数；每次插入或删除是一个事务
"""

import logging
import struct
import threading
from typing import Dict, Iterator, Optional, Tuple, Type

from errors import OptionError
from tx import pgl_read
from zone import NULL_REF, OBJREF_SIZE, ObjectRef

_U64 = struct.Struct('<Q')
MASK64 = 0xFFFFFFFFFFFFFFFF

# 类型号
TYPE_ROOT = 0x100
TYPE_LIST_ANCHOR = 0x110
TYPE_LIST_NODE = 0x111
TYPE_CTREE_ANCHOR = 0x120
TYPE_CTREE_NODE = 0x121
TYPE_SKIPLIST_HEAD = 0x130
TYPE_SKIPLIST_NODE = 0x131
TYPE_HASHMAP_ANCHOR = 0x140
TYPE_HASHMAP_TABLE = 0x141
TYPE_HASHMAP_ENTRY = 0x142

STRUCTURE_NAMES = ('list', 'ctree', 'skiplist', 'hashmap')
ROOT_SIZE = len(STRUCTURE_NAMES) * OBJREF_SIZE


class KVStructure:
    """
    持久键值结构基类

    子类只通过 pgl_read 读取字段、通过 tx.open 得到的微缓冲区修改字段；
    同一结构上的修改由结构锁串行化
    """

    name = ''
    ANCHOR_SIZE = 0
    ANCHOR_TYPE = 0

    def __init__(self, pool, anchor: ObjectRef, seed: int = 0):
        self.pool = pool
        self.anchor = anchor
        self.seed = seed
        self.lock = threading.RLock()

    # ---- 字段读取 ----

    def _read(self, ref: ObjectRef, offset: int, length: int) -> bytes:
        return pgl_read(self.pool, ref, offset, length)

    def _u64(self, ref: ObjectRef, offset: int) -> int:
        return _U64.unpack(self._read(ref, offset, 8))[0]

    def _ref(self, ref: ObjectRef, offset: int) -> ObjectRef:
        return ObjectRef.unpack(self._read(ref, offset, OBJREF_SIZE))

    # ---- 子类实现 ----

    @classmethod
    def init_anchor(cls, tx, anchor: ObjectRef):
        """在创建事务中初始化锚对象（新分配的对象已清零）"""

    def insert(self, key: int, value: int) -> bool:
        raise NotImplementedError

    def remove(self, key: int) -> bool:
        raise NotImplementedError

    def lookup(self, key: int) -> Optional[int]:
        raise NotImplementedError

    def items(self) -> Iterator[Tuple[int, int]]:
        raise NotImplementedError

    def __len__(self) -> int:
        raise NotImplementedError


def _registry() -> Dict[str, Type[KVStructure]]:
    from kv_ctree import CTree
    from kv_hashmap import HashMap
    from kv_list import KVList
    from kv_skiplist import SkipList
    return {'list': KVList, 'ctree': CTree, 'skiplist': SkipList, 'hashmap': HashMap}


def kv_open(pool, structure: str, seed: int = 0) -> KVStructure:
    """
    打开池中的键值结构，不存在时在一个事务内创建

    根对象保存每种结构的锚对象引用

    Args:
        pool: 已打开的池
        structure: list / ctree / skiplist / hashmap
        seed: 结构内部随机数种子（跳表层数）

    Returns:
        KVStructure: 结构实例
    """
    registry = _registry()
    if structure not in registry:
        raise OptionError(f"未知的数据结构: {structure}，可选 {', '.join(STRUCTURE_NAMES)}")
    cls = registry[structure]
    slot = STRUCTURE_NAMES.index(structure) * OBJREF_SIZE
    root = pool.root(ROOT_SIZE, TYPE_ROOT)
    anchor = ObjectRef.unpack(pgl_read(pool, root, slot, OBJREF_SIZE))
    if anchor.is_null:
        with pool.transaction() as tx:
            anchor = ObjectRef.unpack(tx.read(root, slot, OBJREF_SIZE))
            if anchor.is_null:
                anchor = tx.alloc(cls.ANCHOR_SIZE, cls.ANCHOR_TYPE)
                cls.init_anchor(tx, anchor)
                tx.open(root).set_ref(slot, anchor)
        logging.info(f"已创建键值结构 {structure}: 锚对象 0x{anchor.offset:x}")
    return cls(pool, anchor, seed)


def kv_insert(kv: KVStructure, key: int, value: int) -> bool:
    """插入或更新；新键返回 True"""
    return kv.insert(key & MASK64, value & MASK64)


def kv_remove(kv: KVStructure, key: int) -> bool:
    """删除；键不存在返回 False"""
    return kv.remove(key & MASK64)


def kv_lookup(kv: KVStructure, key: int) -> Optional[int]:
    return kv.lookup(key & MASK64)


__all__ = ['KVStructure', 'kv_open', 'kv_insert', 'kv_remove', 'kv_lookup', 'STRUCTURE_NAMES',
           'NULL_REF', 'MASK64']
