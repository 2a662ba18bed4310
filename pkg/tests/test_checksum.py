import random
import zlib

import pytest

from checksum import (CHECKSUM_FIELD, OBJ_HEADER_SIZE, adler32, adler32_replace, object_checksum,
                      object_checksum_replace)
from conftest import SCALE
from errors import StoreError


def test_adler32_matches_zlib():
    assert adler32(b'') == 1
    assert adler32(b'Wikipedia') == 0x11E60398
    data = bytes(range(256)) * 300
    assert adler32(data) == zlib.adler32(data)


def test_replace_exhaustive_small_buffers():
    rng = random.Random(1)
    for length in range(1, 65):
        buf = bytearray(rng.randbytes(length))
        total = adler32(buf)
        for offset in range(length):
            for n in range(1, length - offset + 1):
                new = rng.randbytes(n)
                expected = bytearray(buf)
                expected[offset:offset + n] = new
                got = adler32_replace(total, length, offset, buf[offset:offset + n], new)
                assert got == adler32(expected)


def test_replace_random_mutations():
    rng = random.Random(2)
    for _ in range(1000 * SCALE):
        length = rng.randint(1, 16384)
        buf = rng.randbytes(length)
        offset = rng.randrange(length)
        n = rng.randint(1, min(512, length - offset))
        new = rng.choice([rng.randbytes(n), bytes(n), b'\xff' * n])
        mutated = buf[:offset] + new + buf[offset + n:]
        assert adler32_replace(adler32(buf), length, offset, buf[offset:offset + n], new) == adler32(mutated)


def test_replace_rejects_bad_ranges():
    with pytest.raises(StoreError):
        adler32_replace(1, 8, 6, b'abc', b'xyz')
    with pytest.raises(StoreError):
        adler32_replace(1, 8, 0, b'ab', b'xyz')
    assert adler32_replace(7, 8, 0, b'', b'') == 7


def test_object_checksum_skips_checksum_field():
    rng = random.Random(3)
    header = bytearray(rng.randbytes(OBJ_HEADER_SIZE))
    payload = rng.randbytes(100)
    base = object_checksum(header, payload)
    header[CHECKSUM_FIELD:OBJ_HEADER_SIZE] = b'\xde\xad\xbe\xef'
    assert object_checksum(header, payload) == base
    header[0] ^= 1
    assert object_checksum(header, payload) != base


def test_object_checksum_replace_matches_recompute():
    rng = random.Random(4)
    for _ in range(200 * SCALE):
        image = bytearray(rng.randbytes(OBJ_HEADER_SIZE + rng.randint(1, 600)))
        total = object_checksum(image[:OBJ_HEADER_SIZE], image[OBJ_HEADER_SIZE:])
        offset = rng.randrange(len(image))
        n = rng.randint(1, len(image) - offset)
        old = bytes(image[offset:offset + n])
        new = rng.randbytes(n)
        image[offset:offset + n] = new
        expected = object_checksum(image[:OBJ_HEADER_SIZE], image[OBJ_HEADER_SIZE:])
        assert object_checksum_replace(total, len(image), offset, old, new) == expected
