"""Experiment orchestration: test-case preparation, the evaluation loop and result files.

Results are JSONL, one EvalOutcome per line. A run appends outcomes as they complete, skips
trajectories already present in the output file (resume), and finally rewrites the file
sorted by trajectory_id next to a ``<stem>.report.json`` with the aggregate metrics.
"""
import contextvars
import os
import tempfile
from concurrent.futures import Future, ThreadPoolExecutor, as_completed
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Set, Union

import numpy as np
import pandas as pd
import structlog
from pydantic import ValidationError
from structlog.contextvars import bound_contextvars
from tqdm.auto import tqdm

from nextpoi.baselines import recommend_dist, recommend_popu
from nextpoi.candidates import make_candidate_set
from nextpoi.config import Backend, LLMSettings, Method, RunConfig
from nextpoi.dataset import (
    DatasetStats,
    PoiCatalog,
    TrainStats,
    build_stats,
    chronological_split,
    describe_dataset,
    load_dataset,
    make_test_cases,
)
from nextpoi.errors import MalformedRecord, ResultFileError, ResumeMismatch
from nextpoi.llm_client.api import ChatBackend, ChatCompletionsAPI, complete
from nextpoi.llm_client.cache import ResponseCache, cached_complete
from nextpoi.llm_client.errors import (
    AuthError,
    CacheIoError,
    FixtureExhausted,
    LLMClientError,
    MissingCredentialError,
)
from nextpoi.llm_client.mock import mock_backend
from nextpoi.llm_client.types import ChatMessage, ChatRequest, Role
from nextpoi.metrics import EvalOutcome, EvalReport, aggregate, rank_of_ground_truth
from nextpoi.prompting import PromptBundle, build_prompt
from nextpoi.response_parse import ParseStatus, to_recommendation
from nextpoi.types import TestCase
from nextpoi.util import derive_seed

logger = structlog.get_logger(__name__)

BASELINE_FLAGS_TAG = "-"

# Client errors that end the whole run instead of failing a single case.
FATAL_CLIENT_ERRORS = (AuthError, MissingCredentialError, FixtureExhausted, CacheIoError)


@dataclass(frozen=True)
class ExperimentContext:
    config: RunConfig
    catalog: PoiCatalog
    stats: TrainStats
    test_cases: Sequence[TestCase]
    """Cases to evaluate, chronological by trajectory start"""
    dataset_stats: DatasetStats


@dataclass(frozen=True)
class RunResult:
    report: EvalReport
    out_path: Path
    report_path: Path
    evaluated: int
    resumed: int


def prepare_experiment(config: RunConfig) -> ExperimentContext:
    ingested = load_dataset(config.dataset_path, strict=config.strict)
    split = chronological_split(ingested.checkins, config.split_ratios)
    stats = build_stats(split.train, ingested.catalog)
    cases = select_test_cases(
        make_test_cases(split, ingested.catalog), config.max_test_cases, config.seed
    )

    return ExperimentContext(
        config=config,
        catalog=ingested.catalog,
        stats=stats,
        test_cases=cases,
        dataset_stats=describe_dataset(config.dataset_path.stem, ingested, split),
    )


def select_test_cases(
    cases: Sequence[TestCase], max_test_cases: Optional[int], seed: int
) -> List[TestCase]:
    """A seeded uniform subsample, returned in the original (chronological) order."""
    if max_test_cases is None or max_test_cases >= len(cases):
        return list(cases)

    rng = np.random.default_rng(derive_seed(seed, "", "test-cases"))
    picked = sorted(rng.choice(len(cases), size=max_test_cases, replace=False).tolist())
    return [cases[i] for i in picked]


def make_backend(
    config: RunConfig, settings: Optional[LLMSettings] = None, stats: Optional[TrainStats] = None
) -> ChatBackend:
    if config.backend is Backend.live:
        settings = settings or LLMSettings()
        if settings.llm_api_key is None:
            raise MissingCredentialError()
        return ChatCompletionsAPI(
            base_url=config.base_url or settings.llm_base_url,
            api_key=settings.llm_api_key.get_secret_value(),
            timeout_seconds=config.timeout_seconds,
            max_attempts=config.max_attempts,
        )
    if config.backend is Backend.popular_k:
        return mock_backend(config.backend.value, popularity=stats)
    if config.backend is Backend.fixture_replay:
        return mock_backend(config.backend.value, path=config.replay_fixture)
    return mock_backend(config.backend.value)


def build_request(bundle: PromptBundle, config: RunConfig) -> ChatRequest:
    return ChatRequest(
        model=config.model,
        messages=[
            ChatMessage(role=Role.system, content=bundle.system_text),
            ChatMessage(role=Role.user, content=bundle.user_text),
        ],
        temperature=config.temperature,
        max_output_tokens=config.max_output_tokens,
    )


def evaluate_case(
    test_case: TestCase,
    ctx: ExperimentContext,
    backend: Optional[ChatBackend] = None,
    cache: Optional[ResponseCache] = None,
) -> EvalOutcome:
    config = ctx.config
    candidate_set = make_candidate_set(
        test_case,
        ctx.catalog,
        ctx.stats,
        n=config.n_candidates,
        ordering=config.ordering,
        seed=config.seed,
    )

    common = dict(
        trajectory_id=test_case.trajectory_id,
        user_id=test_case.user_id,
        ground_truth=test_case.ground_truth_poi,
        method=config.method.value,
        ordering=config.ordering.value,
        seed=config.seed,
    )

    if config.method is Method.popu:
        ids = recommend_popu(
            candidate_set, ctx.stats, config.top_k, config.popu_scope, test_case.user_id
        )
        return _baseline_outcome(common, ids, test_case)
    if config.method is Method.dist:
        return _baseline_outcome(common, recommend_dist(candidate_set, config.top_k), test_case)

    bundle = build_prompt(
        test_case,
        candidate_set,
        ctx.stats.history(test_case.user_id),
        config.flags,
        ctx.catalog,
        m=config.m_long_term,
        top_k=config.top_k,
    )
    request = build_request(bundle, config)
    common.update(flags=config.flags.tag, model=config.model, temperature=config.temperature)

    try:
        if cache is not None:
            response = cached_complete(backend, cache, request)
        else:
            response = complete(backend, request)
    except FATAL_CLIENT_ERRORS:
        raise
    except LLMClientError as e:
        logger.warning(
            "chat completion failed, recording a failed outcome", error=str(e)
        )
        return EvalOutcome(
            **common, recommended_ids=[], rank=None, parse_status=ParseStatus.failed
        )

    recommendation = to_recommendation(response.text, candidate_set, k=config.top_k)
    return EvalOutcome(
        **common,
        recommended_ids=recommendation.poi_ids,
        rank=rank_of_ground_truth(recommendation.poi_ids, test_case.ground_truth_poi),
        parse_status=recommendation.parse_status,
        reason=recommendation.reason,
        prompt_tokens=response.prompt_tokens,
        completion_tokens=response.completion_tokens,
        latency_ms=response.latency_ms,
    )


def _baseline_outcome(common: dict, ids: List[str], test_case: TestCase) -> EvalOutcome:
    return EvalOutcome(
        **common,
        flags=BASELINE_FLAGS_TAG,
        recommended_ids=ids,
        rank=rank_of_ground_truth(ids, test_case.ground_truth_poi),
        parse_status=ParseStatus.clean,
    )


def run(
    config: RunConfig,
    settings: Optional[LLMSettings] = None,
    backend: Optional[ChatBackend] = None,
    show_progress: bool = True,
) -> RunResult:
    """Evaluate every pending test case, then write the sorted JSONL and the report.

    Log events emitted during the run carry ``run`` (the results file stem) and ``method``.
    """
    with bound_contextvars(run=config.out.stem, method=config.method.value):
        return _run(config, settings, backend, show_progress)


def _run(
    config: RunConfig,
    settings: Optional[LLMSettings],
    backend: Optional[ChatBackend],
    show_progress: bool,
) -> RunResult:
    ctx = prepare_experiment(config)
    out_path = config.out

    try:
        out_path.parent.mkdir(parents=True, exist_ok=True)
        done = completed_trajectory_ids(out_path)
    except OSError as e:
        raise ResultFileError(out_path, e) from e

    stray = done - {case.trajectory_id for case in ctx.test_cases}
    if stray:
        raise ResumeMismatch(out_path, len(stray))

    pending =[case for case in ctx.test_cases if case.trajectory_id not in done]
    logger.info(
        "starting evaluation",
        backend=config.backend.value,
        test_cases=len(ctx.test_cases),
        pending=len(pending),
        resumed=len(ctx.test_cases) - len(pending),
    )

    owned_backend = None
    if config.method is Method.llmmove and backend is None and pending:
        backend = owned_backend = make_backend(config, settings, ctx.stats)

    # The cache key does not name the backend, so mock answers stay out of it.
    cache = None
    if config.use_cache and config.method is Method.llmmove and config.backend is Backend.live:
        cache = ResponseCache(config.cache_dir)

    try:
        _evaluate_pending(pending, ctx, backend, cache, out_path, show_progress)
    finally:
        if isinstance(owned_backend, ChatCompletionsAPI):
            owned_backend.close()

    outcomes = finalize_results(out_path)
    report = aggregate(outcomes)
    write_report(report, config.report_path)

    logger.info(
        "evaluation finished",
        n=report.n,
        acc1=report.acc1,
        acc5=report.acc5,
        acc10=report.acc10,
        mrr=report.mrr,
        out=str(out_path),
    )

    return RunResult(
        report=report,
        out_path=out_path,
        report_path=config.report_path,
        evaluated=len(pending),
        resumed=len(ctx.test_cases) - len(pending),
    )


def _evaluate_pending(
    pending: Sequence[TestCase],
    ctx: ExperimentContext,
    backend: Optional[ChatBackend],
    cache: Optional[ResponseCache],
    out_path: Path,
    show_progress: bool,
) -> None:
    if not pending:
        return

    # Workers only compute; this thread is the single writer of the JSONL file.
    with open(out_path, "a", encoding="utf-8") as outfile, ThreadPoolExecutor(
        max_workers=ctx.config.concurrency
    ) as pool:
        # Workers run in a copy of this thread's context, so their events keep the run keys.
        futures: Dict[Future, TestCase] = {
            pool.submit(
                contextvars.copy_context().run, _evaluate_in_context, case, ctx, backend, cache
            ): case
            for case in pending
        }
        try:
            for future in tqdm(
                as_completed(futures),
                total=len(futures),
                desc=f"{ctx.config.method.value} cases",
                disable=not show_progress,
            ):
                outcome = future.result()
                outfile.write(outcome.json() + "\n")
                outfile.flush()
        except BaseException:
            for future in futures:
                future.cancel()
            raise


def _evaluate_in_context(
    test_case: TestCase,
    ctx: ExperimentContext,
    backend: Optional[ChatBackend],
    cache: Optional[ResponseCache],
) -> EvalOutcome:
    with bound_contextvars(trajectory_id=test_case.trajectory_id):
        return evaluate_case(test_case, ctx, backend, cache)


def completed_trajectory_ids(path: Path) -> Set[str]:
    """Trajectory ids already recorded in ``path``; a torn last line is cut off first."""
    if not path.exists():
        return set()

    _truncate_partial_line(path)
    return {outcome.trajectory_id for outcome in read_outcomes(path)}


def _truncate_partial_line(path: Path) -> None:
    with open(path, "rb+") as f:
        data = f.read()
        if not data or data.endswith(b"\n"):
            return
        keep = data.rfind(b"\n") + 1
        logger.warning(
            "dropping partial trailing record from interrupted run",
            path=str(path),
            dropped_bytes=len(data) - keep,
        )
        f.truncate(keep)


def read_outcomes(path: Union[str, Path]) -> List[EvalOutcome]:
    path = Path(path)
    outcomes = []
    try:
        with open(path, encoding="utf-8") as infile:
            for line_number, line in enumerate(infile, start=1):
                if not line.strip():
                    continue
                try:
                    outcomes.append(EvalOutcome.parse_raw(line))
                except ValidationError as e:
                    raise MalformedRecord(str(e), line_number, source=str(path)) from None
    except (OSError, UnicodeDecodeError) as e:
        raise ResultFileError(path, e) from e
    return outcomes


def finalize_results(out_path: Path) -> List[EvalOutcome]:
    """Rewrite the JSONL sorted by trajectory_id, one record per trajectory."""
    by_id: Dict[str, EvalOutcome] = {}
    for outcome in read_outcomes(out_path):
        by_id.setdefault(outcome.trajectory_id, outcome)

    outcomes = [by_id[trajectory_id] for trajectory_id in sorted(by_id)]
    _atomic_write(out_path, "".join(outcome.json() + "\n" for outcome in outcomes))
    return outcomes


def write_report(report: EvalReport, path: Path) -> None:
    _atomic_write(path, report.to_json() + "\n")


def _atomic_write(path: Path, text: str) -> None:
    tmp_name = None
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with tempfile.NamedTemporaryFile(
            "w", encoding="utf-8", dir=path.parent, suffix=".tmp", delete=False
        ) as tmp:
            tmp_name = tmp.name
            tmp.write(text)
        os.replace(tmp_name, path)
    except OSError as e:
        if tmp_name is not None and os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise ResultFileError(path, e) from e


def report(path: Union[str, Path]) -> EvalReport:
    """Recompute the aggregate metrics from a persisted JSONL result file."""
    return aggregate(read_outcomes(path))


COMPARE_KEYS = ["method", "flags", "ordering"]


def compare(paths: Iterable[Union[str, Path]]) -> pd.DataFrame:
    """One row per (method, flags, ordering) across result files, with n, Acc@1/5/10 and MRR."""
    records = [
        {
            "method": outcome.method,
            "flags": outcome.flags,
            "ordering": outcome.ordering,
            "rank": outcome.rank,
        }
        for path in paths
        for outcome in read_outcomes(path)
    ]
    if not records:
        return pd.DataFrame(columns=[*COMPARE_KEYS, "n", "acc1", "acc5", "acc10", "mrr"])

    frame = pd.DataFrame.from_records(records)
    rank = frame["rank"].astype(float)
    frame = frame.assign(
        acc1=(rank <= 1).astype(float),
        acc5=(rank <= 5).astype(float),
        acc10=(rank <= 10).astype(float),
        mrr=(1.0 / rank).fillna(0.0),
    )

    summary = (
        frame.groupby(COMPARE_KEYS, sort=True)
        .agg(
            n=("rank", "size"),
            acc1=("acc1", "mean"),
            acc5=("acc5", "mean"),
            acc10=("acc10", "mean"),
            mrr=("mrr", "mean"),
        )
        .reset_index()
    )
    return summary


def dump_prompts(config: RunConfig, out_dir: Path, limit: Optional[int] = None) -> List[Path]:
    """Write ``<trajectory_id>.txt`` with the system and user texts for the first cases."""
    ctx = prepare_experiment(config)
    cases = ctx.test_cases if limit is None else ctx.test_cases[:limit]

    written = []
    for test_case in cases:
        candidate_set = make_candidate_set(
            test_case,
            ctx.catalog,
            ctx.stats,
            n=config.n_candidates,
            ordering=config.ordering,
            seed=config.seed,
        )
        bundle = build_prompt(
            test_case,
            candidate_set,
            ctx.stats.history(test_case.user_id),
            config.flags,
            ctx.catalog,
            m=config.m_long_term,
            top_k=config.top_k,
        )
        path = out_dir / f"{test_case.trajectory_id}.txt"
        _atomic_write(path, format_prompt_dump(bundle))
        written.append(path)

    logger.info("wrote prompts", count=len(written), out_dir=str(out_dir))
    return written


def format_prompt_dump(bundle: PromptBundle) -> str:
    return f"### system\n{bundle.system_text}\n\n### user\n{bundle.user_text}\n"
