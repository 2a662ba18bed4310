#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
链式哈希表键值结构

条目 {u64 key, u64 value, ObjectRef next, u64 hash}
桶表 {u64 nbuckets, pad, ObjectRef buckets[n]}
锚对象 {ObjectRef table, ObjectRef old, u64 migrate, u64 count}

元素数超过桶数两倍时换成两倍大小的新桶表，之后每次修改迁移旧表的若干个桶
"""

from typing import Iterator, Optional, Tuple

from kvstore import MASK64, TYPE_HASHMAP_ANCHOR, TYPE_HASHMAP_ENTRY, TYPE_HASHMAP_TABLE, KVStructure
from zone import NULL_REF, ObjectRef

KEY = 0
VALUE = 8
NEXT = 16
HASH = 32
ENTRY_SIZE = 40

NBUCKETS = 0
BUCKETS = 16

TABLE = 0
OLD = 16
MIGRATE = 32
COUNT = 40

INITIAL_BUCKETS = 16
LOAD_FACTOR = 2
MIGRATE_STEP = 4


def hash64(key: int) -> int:
    """splitmix64 混合函数"""
    z = (key + 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def table_size(nbuckets: int) -> int:
    return BUCKETS + 16 * nbuckets


def _bucket_off(index: int) -> int:
    return BUCKETS + 16 * index


class HashMap(KVStructure):
    name = 'hashmap'
    ANCHOR_SIZE = 48
    ANCHOR_TYPE = TYPE_HASHMAP_ANCHOR

    @classmethod
    def init_anchor(cls, tx, anchor: ObjectRef):
        table = tx.alloc(table_size(INITIAL_BUCKETS), TYPE_HASHMAP_TABLE)
        tx.open(table).set_u64(NBUCKETS, INITIAL_BUCKETS)
        tx.open(anchor).set_ref(TABLE, table)

    def _find(self, table: ObjectRef, key: int, h: int) -> Tuple[ObjectRef, int, Optional[ObjectRef]]:
        """
        在一张桶表里查找键

        Returns:
            (槽位所在对象, 槽位偏移, 条目)：条目为 None 时槽位是链尾
        """
        n = self._u64(table, NBUCKETS)
        owner, off = table, _bucket_off(h % n)
        cur = self._ref(owner, off)
        while not cur.is_null:
            if self._u64(cur, KEY) == key:
                return owner, off, cur
            owner, off = cur, NEXT
            cur = self._ref(cur, NEXT)
        return owner, off, None

    def _locate(self, key: int, h: int) -> Tuple[ObjectRef, int, Optional[ObjectRef]]:
        table = self._ref(self.anchor, TABLE)
        found = self._find(table, key, h)
        if found[2] is None:
            old = self._ref(self.anchor, OLD)
            if not old.is_null:
                in_old = self._find(old, key, h)
                if in_old[2] is not None:
                    return in_old
        return found

    def _migrate_step(self, tx):
        """把旧表的下 MIGRATE_STEP 个桶搬到新表，全部搬完后释放旧表"""
        old = self._ref(self.anchor, OLD)
        if old.is_null:
            return
        anchor = tx.open(self.anchor)
        table = anchor.get_ref(TABLE)
        new_n = self._u64(table, NBUCKETS)
        old_n = self._u64(old, NBUCKETS)
        start = anchor.get_u64(MIGRATE)
        end = min(start + MIGRATE_STEP, old_n)
        old_buf = tx.open(old)
        table_buf = tx.open(table)
        for index in range(start, end):
            cur = old_buf.get_ref(_bucket_off(index))
            while not cur.is_null:
                entry = tx.open(cur)
                nxt = entry.get_ref(NEXT)
                target = _bucket_off(entry.get_u64(HASH) % new_n)
                entry.set_ref(NEXT, table_buf.get_ref(target))
                table_buf.set_ref(target, cur)
                cur = nxt
            old_buf.set_ref(_bucket_off(index), NULL_REF)
        if end >= old_n:
            tx.free(old)
            anchor.set_ref(OLD, NULL_REF)
            anchor.set_u64(MIGRATE, 0)
        else:
            anchor.set_u64(MIGRATE, end)

    def _maybe_grow(self, tx):
        anchor = tx.open(self.anchor)
        if not anchor.get_ref(OLD).is_null:
            return
        table = anchor.get_ref(TABLE)
        n = self._u64(table, NBUCKETS)
        if anchor.get_u64(COUNT) <= LOAD_FACTOR * n:
            return
        grown = tx.alloc(table_size(2 * n), TYPE_HASHMAP_TABLE)
        tx.open(grown).set_u64(NBUCKETS, 2 * n)
        anchor.set_ref(OLD, table)
        anchor.set_ref(TABLE, grown)
        anchor.set_u64(MIGRATE, 0)

    def insert(self, key: int, value: int) -> bool:
        h = hash64(key)
        with self.lock, self.pool.transaction() as tx:
            self._migrate_step(tx)
            _, _, entry = self._locate(key, h)
            if entry is not None:
                tx.open(entry).set_u64(VALUE, value)
                return False
            table = self._ref(self.anchor, TABLE)
            slot = _bucket_off(h % self._u64(table, NBUCKETS))
            table_buf = tx.open(table)
            entry = tx.alloc(ENTRY_SIZE, TYPE_HASHMAP_ENTRY)
            buf = tx.open(entry)
            buf.set_u64(KEY, key)
            buf.set_u64(VALUE, value)
            buf.set_u64(HASH, h)
            buf.set_ref(NEXT, table_buf.get_ref(slot))
            table_buf.set_ref(slot, entry)
            anchor = tx.open(self.anchor)
            anchor.set_u64(COUNT, anchor.get_u64(COUNT) + 1)
            self._maybe_grow(tx)
            return True

    def remove(self, key: int) -> bool:
        h = hash64(key)
        with self.lock, self.pool.transaction() as tx:
            self._migrate_step(tx)
            owner, off, entry = self._locate(key, h)
            if entry is None:
                return False
            tx.open(owner).set_ref(off, self._ref(entry, NEXT))
            anchor = tx.open(self.anchor)
            anchor.set_u64(COUNT, anchor.get_u64(COUNT) - 1)
            tx.free(entry)
            return True

    def lookup(self, key: int) -> Optional[int]:
        with self.lock:
            _, _, entry = self._locate(key, hash64(key))
            return None if entry is None else self._u64(entry, VALUE)

    def items(self) -> Iterator[Tuple[int, int]]:
        for field in (TABLE, OLD):
            table = self._ref(self.anchor, field)
            if table.is_null:
                continue
            for index in range(self._u64(table, NBUCKETS)):
                cur = self._ref(table, _bucket_off(index))
                while not cur.is_null:
                    yield self._u64(cur, KEY), self._u64(cur, VALUE)
                    cur = self._ref(cur, NEXT)

    def buckets(self) -> int:
        return self._u64(self._ref(self.anchor, TABLE), NBUCKETS)

    def __len__(self) -> int:
        return self._u64(self.anchor, COUNT)
