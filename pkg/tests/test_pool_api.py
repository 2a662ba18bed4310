import pytest

from app import init_app
from app_context import set_pool
from conftest import populate
from scheduler import init_scheduler


@pytest.fixture
def client(sim_pool):
    populate(sim_pool, 20, seed=21)
    app = init_app(sim_pool, start_scheduler=False)
    app.config['TESTING'] = True
    yield app.test_client()
    set_pool(None)


def test_health_and_info(client, sim_pool):
    body = client.get('/pool/health').get_json()
    assert body['error_code'] == 0
    assert body['data']['failed'] is False
    body = client.get('/pool/info').get_json()
    assert body['data']['uuid'] == sim_pool.header.uuid.hex()
    assert body['data']['occupancy']['objects'] == 20
    assert client.get('/pool/stats').get_json()['data']['commits'] > 0


def test_inject_check_scrub(client):
    body = client.get('/pool/check').get_json()
    assert body['error_code'] == 0 and body['data']['ok']

    body = client.post('/pool/inject', json={'kind': 'scribble', 'target': 'object',
                                             'seed': 2, 'length': 1}).get_json()
    assert body['error_code'] == 0
    obj = body['data']['object']

    body = client.get('/pool/check').get_json()
    assert body['error_code'] == 1
    assert body['data']['objects'] == [obj]

    body = client.post('/pool/scrub').get_json()
    assert body['error_code'] == 0 and body['data']['repaired'] == 1
    assert client.get('/pool/check').get_json()['error_code'] == 0


def test_inject_rejects_bad_arguments(client):
    body = client.post('/pool/inject', json={'kind': 'fire'}).get_json()
    assert body['error_code'] == 2
    body = client.post('/pool/inject', json={'seed': 'abc'}).get_json()
    assert body['error_code'] == 2


def test_library_errors_become_results(pool_factory):
    empty = pool_factory()
    client = init_app(empty, start_scheduler=False).test_client()
    body = client.post('/pool/inject', json={'target': 'object'}).get_json()
    assert body['error_code'] == 2
    assert body['data']['type'] == 'StoreError'
    set_pool(None)
    assert client.get('/pool/info').get_json()['error_code'] == 3


def test_failed_pool_reports_unhealthy(client, sim_pool):
    sim_pool.mark_failed('test')
    body = client.get('/pool/health').get_json()
    assert body['error_code'] == 1
    assert body['data']['reason'] == 'test'


def test_scheduler_jobs(sim_pool):
    from flask import Flask
    app = Flask('scheduler-test')
    scheduler = init_scheduler(app, sim_pool)
    try:
        assert app.scheduler is scheduler
        assert {job.id for job in scheduler.get_jobs()} == {'scrub_pool', 'log_pool_stats'}
        scheduler.get_job('scrub_pool').func()
        scheduler.get_job('log_pool_stats').func()
        assert sim_pool.stats.counters['scrubs'] == 1
    finally:
        scheduler.shutdown(wait=False)
