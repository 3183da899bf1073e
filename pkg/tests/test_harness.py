import json
import os
import threading
from pathlib import Path

import httpx
import pytest

from nextpoi.config import RunConfig
from nextpoi.errors import MalformedRecord, ResumeMismatch
from nextpoi.harness import (
    BASELINE_FLAGS_TAG,
    compare,
    dump_prompts,
    prepare_experiment,
    read_outcomes,
    report,
    run,
    select_test_cases,
)
from nextpoi.llm_client.api import ChatCompletionsAPI
from nextpoi.llm_client.errors import AuthError, FixtureExhausted, MissingCredentialError
from nextpoi.llm_client.mock import parse_prompt_sections
from nextpoi.metrics import EvalOutcome
from nextpoi.response_parse import ParseStatus
from nextpoi.types import Poi
from tests.conftest import BASE_TIME, CATEGORIES, DAY_STRIDE, GRID_POIS, write_checkins

METRICS = ('n', 'acc1', 'acc5', 'acc10', 'mrr')


def metrics_of(report):
    return {name: getattr(report, name) for name in METRICS}


def make_config(tmp_path: Path, dataset: Path, name: str = 'run', **kwargs) -> RunConfig:
    values = dict(
        dataset_path=dataset,
        out=tmp_path / 'results' / f'{name}.jsonl',
        cache_dir=tmp_path / 'cache',
        concurrency=2,
    )
    values.update(kwargs)
    return RunConfig(**values)


@pytest.fixture
def wander_dataset(tmp_path) -> Path:
    """Like the revisit data, except users move on to another POI for their second check-in."""
    rows = []
    for day in range(10):
        for user in range(6):
            start = BASE_TIME + day * DAY_STRIDE + user * 600
            rows.append((f'u{user}', GRID_POIS[(user + day) % 10], start))
            rows.append((f'u{user}', GRID_POIS[(user + 3 * day + 1) % 10], start + 1800))
    return write_checkins(tmp_path / 'wander.tsv', rows)


def test_dist_is_perfect_when_users_stay_put(tmp_path, revisit_dataset):
    result = run(make_config(tmp_path, revisit_dataset, method='dist'), show_progress=False)

    assert metrics_of(result.report) == {'n': 6, 'acc1': 1.0, 'acc5': 1.0, 'acc10': 1.0, 'mrr': 1.0}
    assert result.evaluated == 6
    assert result.resumed == 0
    assert result.report.config['flags'] == BASELINE_FLAGS_TAG
    assert result.report.config['model'] is None

    outcomes = read_outcomes(result.out_path)
    assert [o.trajectory_id for o in outcomes] == sorted(o.trajectory_id for o in outcomes)
    assert all(len(o.recommended_ids) == 10 for o in outcomes)


def test_reports_are_byte_identical_across_runs(tmp_path, wander_dataset, no_network):
    texts = []
    for name in ('first', 'second'):
        config = make_config(
            tmp_path, wander_dataset, name=name, backend='nearest_k', ordering='rand', seed=3
        )
        result = run(config, show_progress=False)
        texts.append((result.report_path.read_bytes(), result.out_path.read_bytes()))

    assert texts[0] == texts[1]


def test_nearest_mock_matches_dist_baseline(tmp_path, wander_dataset, no_network):
    dist = run(make_config(tmp_path, wander_dataset, 'dist', method='dist'), show_progress=False)
    nearest = run(
        make_config(tmp_path, wander_dataset, 'nearest', backend='nearest_k'), show_progress=False
    )

    assert metrics_of(nearest.report) == metrics_of(dist.report)
    assert nearest.report.config['method'] == 'llmmove'
    assert nearest.report.config['flags'] == 'lp+rp+geo+seq'
    assert [o.recommended_ids for o in read_outcomes(nearest.out_path)] == [
        o.recommended_ids for o in read_outcomes(dist.out_path)
    ]


@pytest.fixture
def colocated_dataset(tmp_path) -> Path:
    """Twelve venues sharing one address, so every candidate sits at the same distance."""
    venues = [
        Poi(
            poi_id=f'v{i:02d}',
            category=CATEGORIES[i % 3],
            category_id=f'cat{i % 3}',
            lat=40.7484,
            lon=-73.9857,
        )
        for i in range(12)
    ]
    rows = []
    for day in range(10):
        for user in range(6):
            start = BASE_TIME + day * DAY_STRIDE + user * 600
            rows.append((f'u{user}', venues[(user + day) % 12], start))
            rows.append((f'u{user}', venues[(user + day + 5) % 12], start + 1800))
    return write_checkins(tmp_path / 'colocated.tsv', rows)


@pytest.mark.parametrize('ordering', ['rand', 'freq-des', 'dist-des', 'dist-asc'])
def test_nearest_mock_matches_dist_baseline_on_tied_distances(
    ordering, tmp_path, colocated_dataset, no_network
):
    dist = run(
        make_config(tmp_path, colocated_dataset, 'dist', method='dist', ordering=ordering, top_k=3),
        show_progress=False,
    )
    nearest = run(
        make_config(
            tmp_path, colocated_dataset, 'nearest', backend='nearest_k', ordering=ordering, top_k=3
        ),
        show_progress=False,
    )

    assert metrics_of(nearest.report) == metrics_of(dist.report)
    assert [o.recommended_ids for o in read_outcomes(nearest.out_path)] == [
        ['v00', 'v01', 'v02']
    ] * 6
    assert [o.recommended_ids for o in read_outcomes(dist.out_path)] == [
        ['v00', 'v01', 'v02']
    ] * 6


def test_popu_baseline(tmp_path, revisit_dataset):
    result = run(make_config(tmp_path, revisit_dataset, method='popu'), show_progress=False)
    assert result.report.n == 6
    assert result.report.config['method'] == 'popu'
    assert result.report.parse_status_counts['clean'] == 6


def test_resume_after_interrupted_write(tmp_path, wander_dataset):
    config = make_config(tmp_path, wander_dataset, method='dist')
    first = run(config, show_progress=False)
    lines = first.out_path.read_text().splitlines(keepends=True)

    # One finished record, then a torn one.
    first.out_path.write_text(lines[0] + lines[1][:25])
    second = run(config, show_progress=False)

    assert second.resumed == 1
    assert second.evaluated == 5
    assert second.out_path.read_text().splitlines(keepends=True) == lines
    assert second.report == first.report


def test_completed_run_is_not_repeated(tmp_path, revisit_dataset):
    config = make_config(tmp_path, revisit_dataset, method='dist')
    run(config, show_progress=False)
    again = run(config, show_progress=False)
    assert (again.evaluated, again.resumed) == (0, 6)


def test_resume_refuses_records_outside_the_selection(tmp_path, revisit_dataset):
    config = make_config(tmp_path, revisit_dataset, method='dist')
    full = run(config, show_progress=False)
    before = full.out_path.read_text()

    with pytest.raises(ResumeMismatch) as excinfo:
        run(config.copy(update={'max_test_cases': 2}), show_progress=False)
    assert excinfo.value.stray == 4
    assert full.out_path.read_text() == before

    # A narrower run on a file holding only its own records resumes normally.
    narrow = make_config(tmp_path, revisit_dataset, 'narrow', method='dist', max_test_cases=2)
    run(narrow, show_progress=False)
    again = run(narrow, show_progress=False)
    assert (again.evaluated, again.resumed, again.report.n) == (0, 2, 2)


def test_report_recomputes_run_metrics(tmp_path, wander_dataset, no_network):
    result = run(
        make_config(tmp_path, wander_dataset, backend='nearest_k', ordering='dist-des'),
        show_progress=False,
    )
    assert report(result.out_path) == result.report
    assert json.loads(result.report_path.read_text()) == json.loads(result.report.to_json())


def outcome_line(number: int, rank) -> str:
    return EvalOutcome(
        trajectory_id=f'u{number}-0',
        user_id=f'u{number}',
        ground_truth='gt',
        method='dist',
        flags=BASELINE_FLAGS_TAG,
        ordering='dist-asc',
        seed=0,
        recommended_ids=['gt'] if rank == 1 else ['x', 'gt'] if rank == 2 else ['x'],
        rank=rank,
    ).json()


def test_report_of_hand_written_results(tmp_path):
    path = tmp_path / 'hand.jsonl'
    path.write_text('\n'.join(outcome_line(i, rank) for i, rank in enumerate([1, 2, None])) + '\n')

    result = report(path)
    assert result.n == 3
    assert result.acc1 == pytest.approx(1 / 3)
    assert result.acc5 == pytest.approx(2 / 3)
    assert result.mrr == pytest.approx(0.5)


def test_concatenated_result_files_pool(tmp_path):
    a = tmp_path / 'a.jsonl'
    b = tmp_path / 'b.jsonl'
    a.write_text(outcome_line(0, 1) + '\n')
    b.write_text(outcome_line(1, None) + '\n' + outcome_line(2, 2) + '\n')
    pooled = tmp_path / 'pooled.jsonl'
    pooled.write_text(a.read_text() + b.read_text())

    assert report(pooled).n == 3
    assert report(pooled).mrr == pytest.approx(0.5)


def test_malformed_result_line(tmp_path):
    path = tmp_path / 'bad.jsonl'
    path.write_text(outcome_line(0, 1) + '\n{"trajectory_id": "u1-0"}\n')
    with pytest.raises(MalformedRecord) as exc_info:
        report(path)
    assert exc_info.value.line_number == 2


def test_garbage_answers_are_failed_misses(tmp_path, revisit_dataset, no_network):
    result = run(
        make_config(tmp_path, revisit_dataset, backend='garbage'), show_progress=False
    )
    assert metrics_of(result.report) == {'n': 6, 'acc1': 0.0, 'acc5': 0.0, 'acc10': 0.0, 'mrr': 0.0}
    assert result.report.parse_status_counts == {'clean': 0, 'recovered': 0, 'failed': 6}


def test_worker_events_carry_the_run_context(tmp_path, revisit_dataset, no_network, log_capture):
    config = make_config(tmp_path, revisit_dataset, name='garbage-run', backend='garbage')
    with log_capture() as logs:
        run(config, show_progress=False)

    unparsed = [log for log in logs if log['event'] == 'no recommendation object in model output']
    assert len(unparsed) == 6
    assert {log['run'] for log in unparsed} == {'garbage-run'}
    assert {log['method'] for log in unparsed} == {'llmmove'}
    assert len({log['trajectory_id'] for log in unparsed}) == 6


def test_exhausted_replay_fixture_aborts(tmp_path, revisit_dataset, no_network):
    fixture = tmp_path / 'two.jsonl'
    fixture.write_text('{"text": "no"}\n{"text": "still no"}\n')
    config = make_config(
        tmp_path, revisit_dataset, backend='fixture_replay', replay_fixture=fixture, concurrency=1
    )

    with pytest.raises(FixtureExhausted):
        run(config, show_progress=False)
    assert len(read_outcomes(config.out)) <= 2


def test_live_backend_without_key(tmp_path, revisit_dataset, monkeypatch):
    monkeypatch.delenv('LLM_API_KEY', raising=False)
    with pytest.raises(MissingCredentialError):
        run(make_config(tmp_path, revisit_dataset), show_progress=False)


class CurrentPositionEndpoint:
    """Recommends the current position, which is the ground truth on the revisit data."""

    def __init__(self, failing_poi=None, status=500):
        self.failing_poi = failing_poi
        self.status = status
        self.calls = 0
        self._lock = threading.Lock()

    def __call__(self, request: httpx.Request) -> httpx.Response:
        with self._lock:
            self.calls += 1
        body = json.loads(request.content)
        parsed = parse_prompt_sections(body['messages'][-1]['content'])
        if parsed.current.poi_id == self.failing_poi:
            return httpx.Response(self.status, json={'error': {'message': 'boom'}})
        answer = {'recommendation': [parsed.current.poi_id], 'reason': 'stays put'}
        return httpx.Response(
            200,
            json={
                'choices': [{'message': {'role': 'assistant', 'content': json.dumps(answer)}}],
                'usage': {'prompt_tokens': 100, 'completion_tokens': 10},
            },
        )


def live_api(endpoint) -> ChatCompletionsAPI:
    return ChatCompletionsAPI(
        base_url='https://llm.test/v1',
        api_key='sk-test',
        max_attempts=2,
        backoff_base_seconds=0,
        transport=httpx.MockTransport(endpoint),
    )


def test_live_server_errors_fail_single_cases(tmp_path, revisit_dataset):
    # On the last day user u4 stays at p3.
    endpoint = CurrentPositionEndpoint(failing_poi='p3')
    result = run(
        make_config(tmp_path, revisit_dataset, use_cache=False),
        backend=live_api(endpoint),
        show_progress=False,
    )

    assert result.report.n == 6
    assert result.report.acc1 == pytest.approx(5 / 6)
    assert result.report.parse_status_counts == {'clean': 5, 'recovered': 0, 'failed': 1}
    # Five successes plus two attempts for the failing case.
    assert endpoint.calls == 7

    failed = [o for o in read_outcomes(result.out_path) if o.parse_status is ParseStatus.failed]
    assert [o.user_id for o in failed] == ['u4']
    assert failed[0].model == 'gpt-3.5-turbo'


def test_live_auth_error_aborts(tmp_path, revisit_dataset):
    endpoint = CurrentPositionEndpoint(failing_poi='p3', status=401)
    with pytest.raises(AuthError):
        run(
            make_config(tmp_path, revisit_dataset, use_cache=False, concurrency=1),
            backend=live_api(endpoint),
            show_progress=False,
        )


def test_live_answers_are_cached(tmp_path, revisit_dataset):
    endpoint = CurrentPositionEndpoint()
    first = run(
        make_config(tmp_path, revisit_dataset, 'first'),
        backend=live_api(endpoint),
        show_progress=False,
    )
    assert endpoint.calls == 6

    second = run(
        make_config(tmp_path, revisit_dataset, 'second'),
        backend=live_api(endpoint),
        show_progress=False,
    )
    assert endpoint.calls == 6
    assert metrics_of(second.report) == metrics_of(first.report)


def test_compare(tmp_path, wander_dataset, no_network):
    dist = run(make_config(tmp_path, wander_dataset, 'dist', method='dist'), show_progress=False)
    popu = run(make_config(tmp_path, wander_dataset, 'popu', method='popu'), show_progress=False)
    nearest = run(
        make_config(tmp_path, wander_dataset, 'nearest', backend='nearest_k', ordering='rand'),
        show_progress=False,
    )

    table = compare([dist.out_path, popu.out_path, nearest.out_path])
    rows = table.to_dict(orient='records')

    assert [(r['method'], r['flags'], r['ordering']) for r in rows] == [
        ('dist', '-', 'dist-asc'),
        ('llmmove', 'lp+rp+geo+seq', 'rand'),
        ('popu', '-', 'dist-asc'),
    ]
    by_method = {r['method']: r for r in rows}
    for result in (dist, popu, nearest):
        row = by_method[result.report.config['method']]
        assert row['n'] == result.report.n
        assert row['acc1'] == pytest.approx(result.report.acc1)
        assert row['mrr'] == pytest.approx(result.report.mrr)


def test_subsample_is_seeded_and_chronological(tmp_path, wander_dataset):
    cases = prepare_experiment(make_config(tmp_path, wander_dataset)).test_cases
    picked = select_test_cases(cases, 3, seed=7)

    assert len(picked) == 3
    assert picked == select_test_cases(cases, 3, seed=7)
    positions = [cases.index(case) for case in picked]
    assert positions == sorted(positions)
    assert select_test_cases(cases, 100, seed=7) == list(cases)


def test_dump_prompts(tmp_path, revisit_dataset):
    config = make_config(tmp_path, revisit_dataset, ordering='rand')
    paths = dump_prompts(config, tmp_path / 'prompts', limit=4)

    assert len(paths) == 4
    for path in paths:
        text = path.read_text()
        assert text.startswith('### system\n')
        assert '\n### user\n' in text
        assert text.count('(POIID ') >= 10


@pytest.mark.live
@pytest.mark.skipif(
    not (os.environ.get('LLM_API_KEY') and os.environ.get('NEXTPOI_NYC_PATH')),
    reason='needs LLM_API_KEY and NEXTPOI_NYC_PATH',
)
def test_live_endpoint_beats_chance(tmp_path):
    config = make_config(
        tmp_path, Path(os.environ['NEXTPOI_NYC_PATH']), max_test_cases=50, seed=0
    )
    result = run(config, show_progress=False)
    assert result.report.n == 50
    assert result.report.mrr > 0.10
