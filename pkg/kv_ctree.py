#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
crit-bit 树键值结构

每次插入只分配一个 56 字节节点，同时承载一个键和一个分叉：
节点 {u64 key, u64 value, u64 meta, ObjectRef child0, ObjectRef child1}
  meta 低 32 位为分叉位（从最高位数起），第 32/33 位表示 child0/child1 指向节点的键部分，
  第 34 位表示分叉在用
n 个键对应 n 个节点和 n-1 个分叉，恰好有一个节点的分叉空闲。
指向某个节点时要区分指向它的键部分还是分叉部分
"""

from typing import Iterator, List, Optional, Tuple

from kvstore import TYPE_CTREE_ANCHOR, TYPE_CTREE_NODE, KVStructure
from zone import NULL_REF, ObjectRef

KEY = 0
VALUE = 8
META = 16
CHILD = 24
NODE_SIZE = 56

DIFF_MASK = 0xFFFFFFFF
LEAF_FLAG_SHIFT = 32
BRANCH_USED = 1 << 34

ROOT = 0
ROOT_IS_LEAF = 16
COUNT = 24

# 指向某个节点的槽位: (所属分叉的节点, 方向)，所属为 None 表示锚对象的根槽位
Slot = Tuple[Optional[ObjectRef], int]


def bit_at(key: int, diff: int) -> int:
    return (key >> (63 - diff)) & 1


def crit_bit(a: int, b: int) -> int:
    """两个不同键第一个不同位的位置（最高位为 0）"""
    return 64 - (a ^ b).bit_length()


def _leaf_flag(direction: int) -> int:
    return 1 << (LEAF_FLAG_SHIFT + direction)


class CTree(KVStructure):
    name = 'ctree'
    ANCHOR_SIZE = 32
    ANCHOR_TYPE = TYPE_CTREE_ANCHOR

    def _root(self) -> Tuple[ObjectRef, bool]:
        return self._ref(self.anchor, ROOT), bool(self._u64(self.anchor, ROOT_IS_LEAF))

    def _step(self, node: ObjectRef, key: int) -> Tuple[int, int, ObjectRef, bool]:
        """在节点的分叉上按键走一步，返回 (分叉位, 方向, 子节点, 是否指向键部分)"""
        meta = self._u64(node, META)
        diff = meta & DIFF_MASK
        direction = bit_at(key, diff)
        child = self._ref(node, CHILD + 16 * direction)
        return diff, direction, child, bool(meta & _leaf_flag(direction))

    def _best_leaf(self, key: int) -> Optional[ObjectRef]:
        node, is_leaf = self._root()
        if node.is_null:
            return None
        while not is_leaf:
            _, _, node, is_leaf = self._step(node, key)
        return node

    def _set_slot(self, tx, slot: Slot, ref: ObjectRef, is_leaf: bool):
        owner, direction = slot
        if owner is None:
            anchor = tx.open(self.anchor)
            anchor.set_ref(ROOT, ref)
            anchor.set_u64(ROOT_IS_LEAF, int(is_leaf))
            return
        buf = tx.open(owner)
        meta = buf.get_u64(META)
        flag = _leaf_flag(direction)
        buf.set_u64(META, meta | flag if is_leaf else meta & ~flag)
        buf.set_ref(CHILD + 16 * direction, ref)

    def _bump(self, tx, delta: int):
        anchor = tx.open(self.anchor)
        anchor.set_u64(COUNT, anchor.get_u64(COUNT) + delta)

    def insert(self, key: int, value: int) -> bool:
        with self.lock, self.pool.transaction() as tx:
            best = self._best_leaf(key)
            if best is not None:
                best_key = self._u64(best, KEY)
                if best_key == key:
                    tx.open(best).set_u64(VALUE, value)
                    return False

            node_ref = tx.alloc(NODE_SIZE, TYPE_CTREE_NODE)
            buf = tx.open(node_ref)
            buf.set_u64(KEY, key)
            buf.set_u64(VALUE, value)
            if best is None:
                self._set_slot(tx, (None, 0), node_ref, True)
                self._bump(tx, 1)
                return True

            crit = crit_bit(best_key, key)
            slot: Slot = (None, 0)
            node, is_leaf = self._root()
            while not is_leaf:
                diff, direction, child, child_leaf = self._step(node, key)
                if diff > crit:
                    break
                slot = (node, direction)
                node, is_leaf = child, child_leaf

            new_dir = bit_at(key, crit)
            meta = crit | BRANCH_USED | _leaf_flag(new_dir)
            if is_leaf:
                meta |= _leaf_flag(1 - new_dir)
            buf.set_u64(META, meta)
            buf.set_ref(CHILD + 16 * new_dir, node_ref)
            buf.set_ref(CHILD + 16 * (1 - new_dir), node)
            self._set_slot(tx, slot, node_ref, False)
            self._bump(tx, 1)
            return True

    def remove(self, key: int) -> bool:
        """
        删除键

        键所在节点 L、键的父分叉所在节点 P。摘掉 P 的分叉后，若 L 的分叉仍在用，
        把它搬到 P 的空分叉里，再释放 L
        """
        with self.lock, self.pool.transaction() as tx:
            node, is_leaf = self._root()
            if node.is_null:
                return False
            slot: Slot = (None, 0)
            parent: Optional[ObjectRef] = None
            parent_slot: Slot = (None, 0)
            direction = 0
            branch_slots = {}
            while not is_leaf:
                branch_slots[node] = slot
                parent, parent_slot = node, slot
                _, direction, child, child_leaf = self._step(node, key)
                slot = (node, direction)
                node, is_leaf = child, child_leaf
            if self._u64(node, KEY) != key:
                return False

            if parent is None:
                self._set_slot(tx, (None, 0), NULL_REF, False)
                tx.free(node)
                self._bump(tx, -1)
                return True

            meta = self._u64(parent, META)
            sibling = self._ref(parent, CHILD + 16 * (1 - direction))
            sibling_leaf = bool(meta & _leaf_flag(1 - direction))

            if parent == node:
                self._set_slot(tx, parent_slot, sibling, sibling_leaf)
            elif not self._u64(node, META) & BRANCH_USED:
                self._set_slot(tx, parent_slot, sibling, sibling_leaf)
                tx.open(parent).set_u64(META, 0)
            else:
                self._move_branch(tx, node, parent, parent_slot, sibling, sibling_leaf,
                                  branch_slots[node])
            tx.free(node)
            self._bump(tx, -1)
            return True

    def _move_branch(self, tx, source: ObjectRef, target: ObjectRef, spliced: Slot,
                     sibling: ObjectRef, sibling_leaf: bool, source_slot: Slot):
        """把 source 的分叉复制到 target，并在复制时完成对 spliced 槽位的替换"""
        meta = self._u64(source, META)
        children = [self._ref(source, CHILD), self._ref(source, CHILD + 16)]
        owner, direction = spliced
        if owner == source:
            children[direction] = sibling
            flag = _leaf_flag(direction)
            meta = meta | flag if sibling_leaf else meta & ~flag
        else:
            self._set_slot(tx, spliced, sibling, sibling_leaf)
        buf = tx.open(target)
        buf.set_u64(META, meta)
        buf.set_ref(CHILD, children[0])
        buf.set_ref(CHILD + 16, children[1])
        self._set_slot(tx, source_slot, target, False)

    def lookup(self, key: int) -> Optional[int]:
        with self.lock:
            best = self._best_leaf(key)
            if best is None or self._u64(best, KEY) != key:
                return None
            return self._u64(best, VALUE)

    def items(self) -> Iterator[Tuple[int, int]]:
        """按键升序遍历"""
        node, is_leaf = self._root()
        if node.is_null:
            return
        stack: List[Tuple[ObjectRef, bool]] = [(node, is_leaf)]
        while stack:
            node, is_leaf = stack.pop()
            if is_leaf:
                yield self._u64(node, KEY), self._u64(node, VALUE)
                continue
            meta = self._u64(node, META)
            for direction in (1, 0):
                stack.append((self._ref(node, CHILD + 16 * direction),
                              bool(meta & _leaf_flag(direction))))

    def __len__(self) -> int:
        return self._u64(self.anchor, COUNT)
