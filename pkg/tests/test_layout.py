import pytest

from conftest import SMALL
from errors import LayoutError
from layout import (BADPAGE_POISONED, PAGE_SIZE, BadPageRecord, PoolHeader, SlotHeader, ZoneMeta,
                    compute_layout, layout_report)


def small_header():
    layout = dict(SMALL)
    return compute_layout(layout.pop('pool_size'), **layout)


def test_gigabyte_pool_overhead():
    header = compute_layout(1 << 30, rows_per_zone=100)
    report = layout_report(header)
    assert header.zone_count == 1
    assert report['parity'] == header.zone_size // 100
    assert report['overhead_ratio'] < 0.02
    assert report['data'] + report['overhead'] == header.pool_size
    assert header.pool_size <= 1 << 30


def test_small_geometry():
    header = small_header()
    assert header.chunks_per_row == 14
    assert header.data_rows == 15
    assert header.data_chunks == 210
    assert header.meta_chunks == 1
    assert header.overflow_chunks == 2
    assert header.log_slot_size % (2 * PAGE_SIZE) == 0
    assert header.zone_size == 16 * header.row_size


def test_classify_regions():
    header = small_header()
    assert header.classify(0) == 'header'
    assert header.classify(PAGE_SIZE) == 'header_replica'
    assert header.classify(header.log_offset) == 'log'
    assert header.classify(header.zone_offset(0)) == 'chunk_meta'
    assert header.classify(header.chunk_offset(0, header.meta_chunks)) == 'data'
    assert header.classify(header.overflow_offset) == 'overflow'
    assert header.classify(header.parity_offset(0)) == 'parity'
    assert header.classify(header.pool_size) == 'outside'


@pytest.mark.parametrize('kwargs', [
    dict(pool_size=(4 << 20) + 1),
    dict(pool_size=4 << 20, rows_per_zone=1),
    dict(pool_size=4 << 20, chunk_size=12288),
    dict(pool_size=4 << 20, tx_slots=0),
    dict(pool_size=4 << 20, log_per_zone=1000),
    dict(pool_size=64 << 10),
    dict(pool_size=4 << 20, tx_slots=64, log_per_zone=64 << 10),
])
def test_invalid_layouts(kwargs):
    with pytest.raises(LayoutError):
        compute_layout(**kwargs)


def test_header_checksum_detects_corruption():
    header = small_header()
    raw = bytearray(header.pack())
    parsed, ok = PoolHeader.unpack(bytes(raw))
    assert ok and parsed == header
    raw[20] ^= 0x40
    assert not PoolHeader.unpack(bytes(raw))[1]


def test_zone_meta_and_slot_header_checksums():
    header = small_header()
    raw = bytearray(ZoneMeta.for_zone(header, 0).pack())
    assert ZoneMeta.unpack(bytes(raw))[1]
    raw[4] ^= 1
    assert not ZoneMeta.unpack(bytes(raw))[1]

    slot = SlotHeader(entry_count=3, data_len=120)
    raw = bytearray(slot.pack())
    assert SlotHeader.unpack(bytes(raw)) == (slot, True)
    raw[8] ^= 1
    assert not SlotHeader.unpack(bytes(raw))[1]


def test_badpage_record_states():
    record = BadPageRecord().with_state([0x5000, 0x3000], 1)
    assert record.pending == [0x3000, 0x5000]
    record = record.with_state([0x3000], BADPAGE_POISONED).with_state([0x5000], None)
    assert record.poisoned == [0x3000] and record.pending == []
    parsed, ok = BadPageRecord.unpack(record.pack())
    assert ok and parsed.entries == record.entries
    raw = bytearray(record.pack())
    raw[20] ^= 1
    assert BadPageRecord.unpack(bytes(raw)) == (BadPageRecord(), False)
