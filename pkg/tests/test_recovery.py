import random

import numpy as np
import pytest

from conftest import DRILL, make_options, make_pool, populate
from errors import SimulatedCrash, UnrecoverablePoolError
from kvstore import STRUCTURE_NAMES, kv_insert, kv_open, kv_remove
from layout import HEADER_REPLICA_OFF, HEADER_SIZE, PoolHeader
from pmem import PAGE_SIZE, SimulatedStore
from pool import pool_open
from recovery import inject_fault, recover_pool, scrub
from tx import pgl_read


def reopen(store, image=None, mode='mlpc'):
    image = store.committed_image() if image is None else image
    return pool_open(options=make_options(mode), store=SimulatedStore(image=image))


def assert_objects(pool, objects):
    for ref, data in objects.items():
        assert pgl_read(pool, ref, 0, len(data)) == data


@pytest.fixture(scope='module')
def drill_image():
    """64 MiB 池中写入至少 10 MiB 对象后的持久镜像"""
    pool = make_pool(geometry=DRILL)
    objects = populate(pool, 480, seed=99, max_size=48 << 10, per_tx=1)
    assert sum(len(data) for data in objects.values()) >= 10 << 20
    image = pool.store.committed_image()
    pool.close()
    return image, objects


@pytest.mark.slow
@pytest.mark.parametrize('seed', range(200))
def test_single_page_media_error_recovers(drill_image, seed):
    image, objects = drill_image
    pool = reopen(None, image)
    try:
        target = 'object' if seed % 2 else 'page'
        desc = inject_fault(pool, 'media', target, seed)
        assert pool.store.poisoned_pages() == [desc['page']]

        report = recover_pool(pool)
        assert report['poisoned_repaired'] == 1 and report['poisoned_failed'] == 0
        page = desc['page']
        if desc['region'] != 'overflow':
            assert pool.store.read_raw(page, PAGE_SIZE) == image[page:page + PAGE_SIZE]
        assert pool.check()['ok']
        if target == 'object':
            ref = next(r for r in objects if r.offset == desc['object'])
            assert pgl_read(pool, ref, 0, len(objects[ref])) == objects[ref]
    finally:
        pool.close()


def test_media_error_on_small_pool_is_visible_to_check(sim_pool):
    populate(sim_pool, 40, seed=3)
    before = sim_pool.store.committed_image()
    desc = inject_fault(sim_pool, 'media', 'page', 3)
    assert not sim_pool.check()['ok']
    assert recover_pool(sim_pool)['poisoned_repaired'] == 1
    page = desc['page']
    assert desc['region'] == 'overflow' or sim_pool.store.read_raw(page, PAGE_SIZE) == before[page:page + PAGE_SIZE]
    assert sim_pool.check()['ok']


def test_media_error_repaired_on_access(sim_pool):
    objects = populate(sim_pool, 20, seed=5)
    desc = inject_fault(sim_pool, 'media', 'object', 5)
    ref = next(r for r in objects if r.offset == desc['object'])
    assert pgl_read(sim_pool, ref, 0, len(objects[ref])) == objects[ref]
    assert sim_pool.store.poisoned_pages() == []
    assert sim_pool.stats.counters['faults_handled'] == 1
    assert sim_pool.stats.repair_summary()['count'] >= 1


def test_poisoned_page_survives_reopen(sim_pool):
    objects = populate(sim_pool, 20, seed=6)
    desc = inject_fault(sim_pool, 'media', 'object', 6)
    pool = reopen(sim_pool.store)
    assert pool.store.poisoned_pages() == [desc['page']]
    recover_pool(pool)
    assert pool.check()['ok']
    assert_objects(pool, objects)
    pool.close()


def test_overlapping_column_damage_is_unrecoverable(sim_pool):
    populate(sim_pool, 20, seed=7)
    header = sim_pool.header
    page = header.chunk_offset(0, header.meta_chunks)
    sim_pool.store.protect_page(page)
    sim_pool.store.protect_page(page + header.row_size)
    report = recover_pool(sim_pool)
    assert report['poisoned_failed'] == 2
    assert not sim_pool.check()['ok']


@pytest.mark.slow
@pytest.mark.parametrize('target,length', [
    ('object', 1),
    ('object', PAGE_SIZE),
    ('page', None),
])
def test_scrub_repairs_scribbles(sim_pool, target, length):
    objects = populate(sim_pool, 60, seed=11)
    if length is None:
        length = sim_pool.header.row_size
    for seed in range(100):
        inject_fault(sim_pool, 'scribble', target, 100 + seed, length)
        report = scrub(sim_pool)
        assert report.unrecoverable == 0
        assert report.objects_scanned == len(objects)
        assert sim_pool.check()['ok']
        assert_objects(sim_pool, objects)


def test_scrub_detects_object_scribble(sim_pool):
    populate(sim_pool, 10, seed=12)
    desc = inject_fault(sim_pool, 'scribble', 'object', 12, 1)
    assert sim_pool.check()['objects'] == [desc['object']]
    report = scrub(sim_pool)
    assert report.mismatches >= 1 and report.repaired == 1
    assert sim_pool.stats.counters['scrubs'] == 1


@pytest.mark.slow
def test_scrub_fixes_metadata_scribble(sim_pool):
    populate(sim_pool, 10, seed=13)
    for seed in range(100):
        inject_fault(sim_pool, 'scribble', 'metadata', seed, 4)
        report = scrub(sim_pool)
        assert report.unrecoverable == 0
        assert sim_pool.check()['ok']


def test_header_replica_repairs_primary(sim_pool):
    ref = sim_pool.root(64)
    store = sim_pool.store
    store.write(8, b'\xee' * 16)
    store.persist(8, 16)
    pool = reopen(store)
    assert pool.header.root_offset == ref.offset
    assert PoolHeader.unpack(pool.store.read_raw(0, HEADER_SIZE))[1]
    report = pool.check()
    assert report['ok'] and report['repaired_on_open'] == ['header']
    pool.close()

    store.write(HEADER_REPLICA_OFF + 8, b'\xee' * 16)
    store.persist(HEADER_REPLICA_OFF + 8, 16)
    with pytest.raises(UnrecoverablePoolError):
        reopen(store)


def _apply(kv, op, key):
    if op == 'insert':
        kv_insert(kv, key, key ^ 0xABCD)
    else:
        kv_remove(kv, key)


CRASH_POINTS_PER_CASE = 640


@pytest.mark.slow
@pytest.mark.parametrize('structure', STRUCTURE_NAMES)
@pytest.mark.parametrize('op', ['insert', 'remove'])
def test_crash_during_operation_is_atomic(pool_factory, structure, op):
    """在操作的修改点之后崩溃，恢复后只能看到操作前或操作后的状态"""
    pool = pool_factory()
    kv = kv_open(pool, structure, seed=1)
    rng = random.Random(structure)
    keys = rng.sample(range(1, 1 << 40), 120)
    for key in keys[:60]:
        kv_insert(kv, key, key ^ 0xABCD)
    base = pool.store.committed_image()
    before = set(kv.items())
    candidates = keys[60:] if op == 'insert' else rng.sample(keys[:60], 60)

    outcomes = {}
    points = []
    for key in candidates:
        dry = reopen(pool.store, base)
        dry_kv = kv_open(dry, structure, seed=1)
        start = dry.store.mutation_count
        _apply(dry_kv, op, key)
        points.extend((key, point) for point in range(dry.store.mutation_count - start))
        outcomes[key] = set(dry_kv.items())
        assert outcomes[key] != before
        dry.close()
        if len(points) >= CRASH_POINTS_PER_CASE:
            break
    assert len(points) >= CRASH_POINTS_PER_CASE
    points = rng.sample(points, CRASH_POINTS_PER_CASE)

    np_rng = np.random.default_rng(len(structure))
    for key, point in points:
        crashed = reopen(pool.store, base)
        crashed_kv = kv_open(crashed, structure, seed=1)
        crashed.store.arm_crash(point)
        with pytest.raises(SimulatedCrash):
            _apply(crashed_kv, op, key)
        assert crashed.failed
        image = crashed.store.crash_image(np_rng)
        crashed.close()

        recovered = reopen(pool.store, image)
        state = set(kv_open(recovered, structure, seed=1).items())
        assert state in (before, outcomes[key]), f'key {key} crash point {point}'
        assert recovered.check()['ok']
        recovered.close()
