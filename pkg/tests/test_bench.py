import pytest

from bench import WorkloadSpec, run_benchmark, summarize_latencies
from conftest import SMALL, make_options
from errors import OptionError


def bench(spec, **kwargs):
    layout = dict(SMALL)
    size = layout.pop('pool_size')
    return run_benchmark(spec, None, size, options=make_options(**kwargs), **layout)


def test_workload_validation():
    with pytest.raises(OptionError):
        WorkloadSpec(structure='btree')
    with pytest.raises(OptionError):
        WorkloadSpec(inserts=10, removes=11)
    with pytest.raises(OptionError):
        WorkloadSpec(value_size=16)
    with pytest.raises(OptionError):
        WorkloadSpec(mode='scrub:0')
    with pytest.raises(OptionError):
        WorkloadSpec(threads=0)


def test_report_shape():
    spec = WorkloadSpec(structure='hashmap', inserts=150, removes=50, lookups=100, verify=True)
    report = bench(spec)
    assert report['items'] == 100
    assert report['check_ok']
    assert set(report['phases']) == {'insert', 'lookup', 'remove'}
    assert report['phases']['insert']['ops'] == 150
    assert report['phases']['insert']['p50_us'] <= report['phases']['insert']['p99_us']
    assert report['tx_sizes']['remove']['alloc_bytes'] == 0
    assert report['aborts'] == 0


def test_ctree_insert_sizes():
    report = bench(WorkloadSpec(structure='ctree', inserts=200, seed=2))
    sizes = report['tx_sizes']['insert']
    assert sizes['alloc_bytes'] == pytest.approx(56, abs=0.5)
    assert sizes['alloc_objects'] == pytest.approx(1, abs=0.01)
    assert sizes['mod_objects'] > 0


def test_multithreaded_workload_stays_consistent():
    spec = WorkloadSpec(structure='skiplist', inserts=200, removes=80, threads=4, key_space=5000,
                        seed=5, verify=True)
    report = bench(spec)
    assert report['items'] == 120
    assert report['check_ok']


def test_conservative_mode_has_no_vulnerable_bytes():
    report = bench(WorkloadSpec(structure='list', inserts=60, lookups=30, mode='conservative'))
    assert report['vulnerability']['accessed_bytes'] > 0
    assert report['vulnerability']['vulnerable_bytes'] == 0
    report = bench(WorkloadSpec(structure='list', inserts=60, lookups=30, mode='mlpc'))
    assert 0 < report['vulnerability']['ratio'] < 1


def test_scrub_window_halves_with_interval():
    spec = dict(structure='hashmap', inserts=400, seed=3)
    short = bench(WorkloadSpec(mode='scrub:20', **spec), start_scrub_worker=True)
    long = bench(WorkloadSpec(mode='scrub:40', **spec), start_scrub_worker=True)
    assert short['scrubs'] >= 1
    ratio = short['vulnerability']['window_ratio'] / long['vulnerability']['window_ratio']
    assert 0.4 <= ratio <= 0.6


def test_summarize_latencies():
    phases = {'insert': {'latencies': [1e-6, 2e-6, 3e-6, 4e-6], 'seconds': 0.5},
              'remove': {'latencies': [], 'seconds': 0.0}}
    summary = summarize_latencies(phases)
    assert list(summary) == ['insert']
    assert summary['insert']['ops'] == 4
    assert summary['insert']['ops_per_sec'] == pytest.approx(8.0)
    assert summary['insert']['mean_us'] == pytest.approx(2.5)
    assert summary['insert']['p50_us'] == pytest.approx(2.5)
