import random

import pytest

from conftest import SCALE
from errors import OptionError
from kv_ctree import NODE_SIZE, bit_at, crit_bit
from kv_hashmap import INITIAL_BUCKETS, OLD, hash64
from kvstore import MASK64, STRUCTURE_NAMES, kv_insert, kv_lookup, kv_open, kv_remove


@pytest.mark.parametrize('structure', STRUCTURE_NAMES)
def test_matches_dict_model(sim_pool, structure):
    kv = kv_open(sim_pool, structure, seed=3)
    model = {}
    rng = random.Random(structure)
    keys = [rng.randrange(1, 1 << 63) for _ in range(40)] + [0, 1, 1 << 63, MASK64]
    for _ in range(300 * SCALE):
        key = rng.choice(keys)
        op = rng.random()
        if op < 0.5:
            value = rng.getrandbits(64)
            assert kv_insert(kv, key, value) == (key not in model)
            model[key] = value
        elif op < 0.8:
            assert kv_remove(kv, key) == (key in model)
            model.pop(key, None)
        else:
            assert kv_lookup(kv, key) == model.get(key)
    assert dict(kv.items()) == model
    assert len(kv) == len(model)
    assert sim_pool.check()['ok']


@pytest.mark.parametrize('structure', STRUCTURE_NAMES)
def test_structure_survives_reopen(file_pool, structure):
    from conftest import make_options
    from pool import pool_open
    kv = kv_open(file_pool, structure)
    for key in range(1, 30):
        kv_insert(kv, key * 7919, key)
    path = file_pool.path
    file_pool.close()
    pool = pool_open(path, make_options(backend=file_pool.options.backend))
    kv = kv_open(pool, structure)
    assert dict(kv.items()) == {key * 7919: key for key in range(1, 30)}
    assert kv_lookup(kv, 7919 * 3) == 3
    pool.close()


def test_structures_share_one_root(sim_pool):
    handles = {name: kv_open(sim_pool, name) for name in STRUCTURE_NAMES}
    for i, kv in enumerate(handles.values()):
        kv_insert(kv, 42, i)
    for i, name in enumerate(STRUCTURE_NAMES):
        assert kv_lookup(kv_open(sim_pool, name), 42) == i
    assert len({kv.anchor for kv in handles.values()}) == len(STRUCTURE_NAMES)


def test_unknown_structure(sim_pool):
    with pytest.raises(OptionError):
        kv_open(sim_pool, 'btree')


def test_ctree_iterates_in_key_order(sim_pool):
    kv = kv_open(sim_pool, 'ctree')
    keys = random.Random(8).sample(range(1 << 62), 100)
    for key in keys:
        kv_insert(kv, key, 0)
    assert [k for k, _ in kv.items()] == sorted(keys)


def test_ctree_allocates_one_node_per_insert(sim_pool):
    kv = kv_open(sim_pool, 'ctree')
    before = sim_pool.stats.counters['alloc_bytes']
    objects = sim_pool.stats.counters['alloc_objects']
    for key in random.Random(9).sample(range(1 << 40, 1 << 48), 100):
        kv_insert(kv, key, key)
    assert sim_pool.stats.counters['alloc_bytes'] - before == 100 * NODE_SIZE == 5600
    assert sim_pool.stats.counters['alloc_objects'] - objects == 100


def test_ctree_remove_relinks_branches_and_frees_nodes(sim_pool):
    kv = kv_open(sim_pool, 'ctree')
    baseline = sim_pool.capacity()['objects']
    rng = random.Random(10)
    keys = rng.sample(range(1 << 16), 200)
    for key in keys:
        kv_insert(kv, key, key ^ 7)
    assert sim_pool.capacity()['objects'] == baseline + 200
    rng.shuffle(keys)
    for i, key in enumerate(keys):
        assert kv_remove(kv, key)
        assert kv_lookup(kv, key) is None
        if i % 20 == 0:
            remaining = sorted(keys[i + 1:])
            assert [k for k, _ in kv.items()] == remaining
            assert all(kv_lookup(kv, k) == k ^ 7 for k in remaining)
    assert len(kv) == 0
    assert sim_pool.capacity()['objects'] == baseline
    assert sim_pool.check()['ok']


def test_crit_bit_helpers():
    assert crit_bit(0, 1 << 63) == 0
    assert crit_bit(0b100, 0b101) == 63
    assert bit_at(1 << 63, 0) == 1
    assert bit_at(1, 63) == 1


def test_hashmap_grows_and_migrates(sim_pool):
    kv = kv_open(sim_pool, 'hashmap')
    assert kv.buckets() == INITIAL_BUCKETS
    for key in range(1, 2 * INITIAL_BUCKETS + 2):
        kv_insert(kv, key, key)
    assert kv.buckets() == 2 * INITIAL_BUCKETS
    for key in range(100, 110):
        kv_insert(kv, key, key)
    assert kv._ref(kv.anchor, OLD).is_null
    assert len(kv) == 2 * INITIAL_BUCKETS + 11
    assert all(kv_lookup(kv, key) == key for key in range(1, 2 * INITIAL_BUCKETS + 2))
    assert hash64(1) != hash64(2)
    assert sim_pool.check()['ok']


def test_list_pushes_to_front(sim_pool):
    kv = kv_open(sim_pool, 'list')
    for key in (1, 2, 3):
        kv_insert(kv, key, key * 10)
    assert list(kv.items()) == [(3, 30), (2, 20), (1, 10)]
    assert not kv_insert(kv, 2, 99)
    assert list(kv.items()) == [(3, 30), (2, 99), (1, 10)]


def test_skiplist_keeps_level_zero_sorted(sim_pool):
    kv = kv_open(sim_pool, 'skiplist', seed=4)
    keys = random.Random(4).sample(range(1, 1 << 32), 80)
    for key in keys:
        kv_insert(kv, key, 1)
    for key in keys[::3]:
        kv_remove(kv, key)
    remaining = sorted(set(keys) - set(keys[::3]))
    assert [k for k, _ in kv.items()] == remaining
