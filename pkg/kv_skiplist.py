#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
跳表键值结构
节点 {u64 key, u64 value, u64 level, ObjectRef next[4]}，锚对象是头节点，VALUE 字段存元素个数
"""

import random
from typing import Iterator, List, Optional, Tuple

from kvstore import TYPE_SKIPLIST_HEAD, TYPE_SKIPLIST_NODE, KVStructure
from zone import ObjectRef

MAX_LEVEL = 4

KEY = 0
VALUE = 8
LEVEL = 16
NEXT = 24
NODE_SIZE = NEXT + 16 * MAX_LEVEL

COUNT = VALUE


def _next_off(level: int) -> int:
    return NEXT + 16 * level


class SkipList(KVStructure):
    name = 'skiplist'
    ANCHOR_SIZE = NODE_SIZE
    ANCHOR_TYPE = TYPE_SKIPLIST_HEAD

    def __init__(self, pool, anchor: ObjectRef, seed: int = 0):
        super().__init__(pool, anchor, seed)
        self._rng = random.Random(seed)

    @classmethod
    def init_anchor(cls, tx, anchor: ObjectRef):
        tx.open(anchor).set_u64(LEVEL, MAX_LEVEL)

    def _random_level(self) -> int:
        level = 1
        while level < MAX_LEVEL and self._rng.random() < 0.5:
            level += 1
        return level

    def _search(self, key: int) -> Tuple[List[ObjectRef], Optional[ObjectRef]]:
        """返回每层的前驱以及第 0 层上键不小于 key 的第一个节点"""
        preds: List[ObjectRef] = [self.anchor] * MAX_LEVEL
        cur = self.anchor
        candidate = None
        for level in range(MAX_LEVEL - 1, -1, -1):
            nxt = self._ref(cur, _next_off(level))
            while not nxt.is_null and self._u64(nxt, KEY) < key:
                cur = nxt
                nxt = self._ref(cur, _next_off(level))
            preds[level] = cur
            candidate = None if nxt.is_null else nxt
        return preds, candidate

    def _match(self, node: Optional[ObjectRef], key: int) -> bool:
        return node is not None and self._u64(node, KEY) == key

    def insert(self, key: int, value: int) -> bool:
        with self.lock, self.pool.transaction() as tx:
            preds, found = self._search(key)
            if self._match(found, key):
                tx.open(found).set_u64(VALUE, value)
                return False
            level = self._random_level()
            node = tx.alloc(NODE_SIZE, TYPE_SKIPLIST_NODE)
            buf = tx.open(node)
            buf.set_u64(KEY, key)
            buf.set_u64(VALUE, value)
            buf.set_u64(LEVEL, level)
            for i in range(level):
                pred = tx.open(preds[i])
                buf.set_ref(_next_off(i), pred.get_ref(_next_off(i)))
                pred.set_ref(_next_off(i), node)
            head = tx.open(self.anchor)
            head.set_u64(COUNT, head.get_u64(COUNT) + 1)
            return True

    def remove(self, key: int) -> bool:
        with self.lock, self.pool.transaction() as tx:
            preds, found = self._search(key)
            if not self._match(found, key):
                return False
            level = self._u64(found, LEVEL)
            for i in range(level):
                pred = tx.open(preds[i])
                if pred.get_ref(_next_off(i)).offset == found.offset:
                    pred.set_ref(_next_off(i), self._ref(found, _next_off(i)))
            head = tx.open(self.anchor)
            head.set_u64(COUNT, head.get_u64(COUNT) - 1)
            tx.free(found)
            return True

    def lookup(self, key: int) -> Optional[int]:
        with self.lock:
            _, found = self._search(key)
            return self._u64(found, VALUE) if self._match(found, key) else None

    def items(self) -> Iterator[Tuple[int, int]]:
        cur = self._ref(self.anchor, _next_off(0))
        while not cur.is_null:
            yield self._u64(cur, KEY), self._u64(cur, VALUE)
            cur = self._ref(cur, _next_off(0))

    def __len__(self) -> int:
        return self._u64(self.anchor, COUNT)
