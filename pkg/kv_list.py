#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
单链表键值结构
节点 {u64 key, u64 value, ObjectRef next}，新节点插在表头
"""

from typing import Iterator, Optional, Tuple

from kvstore import TYPE_LIST_ANCHOR, TYPE_LIST_NODE, KVStructure
from zone import ObjectRef

KEY = 0
VALUE = 8
NEXT = 16
NODE_SIZE = 32

HEAD = 0
COUNT = 16


class KVList(KVStructure):
    name = 'list'
    ANCHOR_SIZE = 24
    ANCHOR_TYPE = TYPE_LIST_ANCHOR

    def _find(self, key: int) -> Tuple[Optional[ObjectRef], Optional[ObjectRef]]:
        """返回 (前驱, 节点)，前驱为 None 表示节点在表头"""
        prev = None
        cur = self._ref(self.anchor, HEAD)
        while not cur.is_null:
            if self._u64(cur, KEY) == key:
                return prev, cur
            prev, cur = cur, self._ref(cur, NEXT)
        return prev, None

    def insert(self, key: int, value: int) -> bool:
        with self.lock, self.pool.transaction() as tx:
            _, node = self._find(key)
            if node is not None:
                tx.open(node).set_u64(VALUE, value)
                return False
            head = self._ref(self.anchor, HEAD)
            node = tx.alloc(NODE_SIZE, TYPE_LIST_NODE)
            buf = tx.open(node)
            buf.set_u64(KEY, key)
            buf.set_u64(VALUE, value)
            buf.set_ref(NEXT, head)
            anchor = tx.open(self.anchor)
            anchor.set_ref(HEAD, node)
            anchor.set_u64(COUNT, anchor.get_u64(COUNT) + 1)
            return True

    def remove(self, key: int) -> bool:
        with self.lock, self.pool.transaction() as tx:
            prev, node = self._find(key)
            if node is None:
                return False
            nxt = self._ref(node, NEXT)
            anchor = tx.open(self.anchor)
            if prev is None:
                anchor.set_ref(HEAD, nxt)
            else:
                tx.open(prev).set_ref(NEXT, nxt)
            anchor.set_u64(COUNT, anchor.get_u64(COUNT) - 1)
            tx.free(node)
            return True

    def lookup(self, key: int) -> Optional[int]:
        with self.lock:
            _, node = self._find(key)
            return None if node is None else self._u64(node, VALUE)

    def items(self) -> Iterator[Tuple[int, int]]:
        cur = self._ref(self.anchor, HEAD)
        while not cur.is_null:
            yield self._u64(cur, KEY), self._u64(cur, VALUE)
            cur = self._ref(cur, NEXT)

    def __len__(self) -> int:
        return self._u64(self.anchor, COUNT)
