import pytest

from config import Config
from errors import OptionError
from pool import PoolOptions, ProtectionMode


def test_mode_precedence(monkeypatch):
    monkeypatch.setattr(Config, 'PGL_MODE', '')
    assert Config.mode_name() == 'mlpc'
    assert Config.mode_name('ml') == 'ml'
    monkeypatch.setattr(Config, 'PGL_MODE', 'conservative')
    assert Config.mode_name('ml') == 'conservative'


def test_pool_options_from_config(monkeypatch):
    monkeypatch.setattr(Config, 'PGL_MODE', '')
    monkeypatch.setattr(Config, 'PGL_LOCK_GRANULE', 4096)
    options = Config.pool_options('scrub:250', start_scrub_worker=False)
    assert options.mode.scrub_interval == 250
    assert options.lock_granule == 4096
    assert not options.start_scrub_worker


def test_validate_reports_bad_keys(monkeypatch):
    monkeypatch.setattr(Config, 'PGL_MODE', '')
    assert Config.validate() == []
    monkeypatch.setattr(Config, 'PGL_MODE', 'raid5')
    monkeypatch.setattr(Config, 'PGL_CHUNK_SIZE', 3000)
    monkeypatch.setattr(Config, 'PGL_FREEZE_POLICY', 'spin')
    assert Config.validate() == ['PGL_MODE', 'PGL_CHUNK_SIZE', 'PGL_FREEZE_POLICY']


@pytest.mark.parametrize('text,expected', [
    ('baseline', (False, False, False, False, 0)),
    ('ml', (True, False, False, False, 0)),
    ('mlp', (True, True, False, False, 0)),
    ('MLPC', (True, True, True, False, 0)),
    ('conservative', (True, True, True, True, 0)),
    ('scrub:2k', (True, True, True, False, 2000)),
])
def test_protection_modes(text, expected):
    mode = ProtectionMode.parse(text)
    assert (mode.replicate, mode.parity, mode.checksums, mode.verify_reads,
            mode.scrub_interval) == expected


@pytest.mark.parametrize('kwargs', [
    dict(mode='raid6'),
    dict(mode='scrub:x'),
    dict(lock_granule=12),
    dict(parity_threshold=-1),
    dict(freeze_policy='spin'),
])
def test_invalid_options(kwargs):
    with pytest.raises(OptionError):
        PoolOptions(**kwargs)
