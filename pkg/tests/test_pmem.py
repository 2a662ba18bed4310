import numpy as np
import pytest

from errors import MediaError, SimulatedCrash, StoreError
from pmem import PAGE_SIZE, Backend, FileMappedStore, SimulatedStore, map_pool


def test_atomic_store_requires_alignment():
    store = SimulatedStore(length=PAGE_SIZE)
    with pytest.raises(StoreError):
        store.atomic_store64(4, 1)
    store.atomic_store64(8, 0x1122334455667788)
    assert store.load64(8) == 0x1122334455667788


def test_out_of_bounds_access():
    store = SimulatedStore(length=PAGE_SIZE)
    with pytest.raises(StoreError):
        store.read(PAGE_SIZE - 4, 8)
    with pytest.raises(StoreError):
        store.write(PAGE_SIZE, b'x')


def test_unpersisted_writes_may_be_lost():
    store = SimulatedStore(length=PAGE_SIZE)
    store.write(0, b'\xAA' * 16)
    store.persist(0, 8)
    assert len(store.pending_units()) == 1
    kept = store.crash_image(survivors=np.array([False]))
    assert kept[:8] == b'\xAA' * 8
    assert kept[8:16] == bytes(8)
    images = list(store.enumerate_crash_images())
    assert {img[8:16] for img in images} == {bytes(8), b'\xAA' * 8}


def test_atomic_store_is_never_torn():
    store = SimulatedStore(length=PAGE_SIZE)
    store.atomic_store64(64, 0xFFFFFFFFFFFFFFFF)
    rng = np.random.default_rng(3)
    for _ in range(20):
        value = int.from_bytes(store.crash_image(rng)[64:72], 'little')
        assert value in (0, 0xFFFFFFFFFFFFFFFF)


def test_crash_countdown():
    store = SimulatedStore(length=PAGE_SIZE)
    store.arm_crash(2)
    store.write(0, b'a')
    store.persist(0, 1)
    with pytest.raises(SimulatedCrash):
        store.write(1, b'b')
    store.write(1, b'b')


def test_poisoned_page_raises_media_error():
    store = SimulatedStore(length=4 * PAGE_SIZE)
    store.write(PAGE_SIZE, b'\x01' * PAGE_SIZE)
    store.protect_page(PAGE_SIZE)
    with pytest.raises(MediaError) as info:
        store.read(PAGE_SIZE + 10, 4)
    assert info.value.page_offset == PAGE_SIZE
    assert store.read_raw(PAGE_SIZE, 4) == bytes(4)
    store.unprotect_page(PAGE_SIZE)
    assert store.read(PAGE_SIZE, 4) == bytes(4)
    with pytest.raises(StoreError):
        store.protect_page(100)


def test_file_mapped_round_trip(tmp_path):
    path = str(tmp_path / 'store.bin')
    store = map_pool(path, 4 * PAGE_SIZE, create=True)
    assert isinstance(store, FileMappedStore)
    assert store.read(0, 16) == bytes(16)
    store.write(100, b'persistent')
    store.persist(100, 10)
    store.close()
    reopened = map_pool(path, None)
    assert reopened.length == 4 * PAGE_SIZE
    assert reopened.read(100, 10) == b'persistent'
    reopened.close()


def test_simulated_backend_loads_image(tmp_path):
    path = tmp_path / 'image.bin'
    path.write_bytes(b'\x07' * PAGE_SIZE)
    store = map_pool(str(path), None, backend=Backend.SIMULATED)
    assert store.read(0, 4) == b'\x07' * 4
