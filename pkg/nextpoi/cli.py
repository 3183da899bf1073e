from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional

import click

from nextpoi import __version__
from nextpoi.baselines import PopularityScope
from nextpoi.candidates import OrderingStrategy
from nextpoi.command import NextPoiCommand, OutputModel, metrics_table
from nextpoi.config import Backend, Method, build_run_config, load_config_file
from nextpoi.dataset import (
    DEFAULT_SPLIT_RATIOS,
    DatasetStats,
    chronological_split,
    describe_dataset,
    load_dataset,
    validate_split_ratios,
)
from nextpoi.harness import compare, dump_prompts, report, run
from nextpoi.llm_client.cache import CacheStats, ResponseCache
from nextpoi.logging import LOG_LEVELS, configure_logging
from nextpoi.metrics import EvalReport
from nextpoi.prompting import FLAG_NAMES
from nextpoi.util import catch_em_all

PATH_TYPE = click.Path(dir_okay=False, path_type=Path)
METRIC_COLUMNS = ["n", "acc1", "acc5", "acc10", "mrr"]


@click.group(name="nextpoi", help="Zero-shot next-POI recommendation benchmark")
@click.version_option(__version__, prog_name="nextpoi")
@click.option(
    "--log-level",
    type=click.Choice(LOG_LEVELS, case_sensitive=False),
    default="WARNING",
    show_default=True,
    help="Log level for nextpoi events; other libraries log at WARNING",
)
@click.option("--dev-logging/--json-logging", default=True, help="Console or JSON log lines")
@click.option("--log-file", type=PATH_TYPE, help="Also write JSON log lines to this file")
def nextpoi(log_level: str, dev_logging: bool, log_file: Optional[Path]):
    configure_logging(dev_logging, "WARNING", log_level.upper(), log_file=log_file)


def main():
    nextpoi(prog_name="nextpoi")


_EXPERIMENT_OPTIONS = [
    click.option(
        "--config",
        "config_file",
        type=click.Path(exists=True, dir_okay=False, path_type=Path),
        help="TOML run config; explicit flags override its values",
    ),
    click.option("--dataset", "dataset_path", type=PATH_TYPE, help="Check-in file (TSV)"),
    click.option(
        "--split-ratios", type=float, nargs=3, help="Train / validation / test shares"
    ),
    click.option("--seed", type=int, help="Seed for candidate sampling and subsampling"),
    click.option("--n-candidates", type=int, help="Sampled candidates besides the ground truth"),
    click.option(
        "--ordering",
        type=click.Choice([o.value for o in OrderingStrategy]),
        help="Candidate presentation order",
    ),
    click.option("--method", type=click.Choice([m.value for m in Method])),
    click.option(
        "--ablate",
        type=click.Choice(FLAG_NAMES),
        multiple=True,
        help="Drop a requirement factor from the prompt; repeatable",
    ),
    click.option("--m-long-term", type=int, help="Long-term check-ins shown in the prompt"),
    click.option("--top-k", type=int, help="Length of the requested recommendation list"),
    click.option("--model", help="Model name sent to the endpoint"),
    click.option("--base-url", help="Endpoint base URL; defaults to LLM_BASE_URL"),
    click.option("--temperature", type=float),
    click.option("--max-test-cases", type=int, help="Seeded uniform subsample of test cases"),
    click.option("--concurrency", type=int, help="Cases evaluated in parallel"),
    click.option("--cache-dir", type=click.Path(file_okay=False, path_type=Path)),
    click.option("--out", type=PATH_TYPE, help="JSONL result file"),
    click.option("--backend", type=click.Choice([b.value for b in Backend])),
    click.option("--replay-fixture", type=PATH_TYPE, help="JSONL texts for fixture_replay"),
    click.option("--max-output-tokens", type=int),
    click.option("--timeout-seconds", type=float),
    click.option("--max-attempts", type=int, help="Attempts per request on 429 / 5xx"),
    click.option("--popu-scope", type=click.Choice([s.value for s in PopularityScope])),
    click.option("--strict/--no-strict", default=None, help="Abort on malformed input lines"),
    click.option("--cache/--no-cache", "use_cache", default=None, help="Use the response cache"),
]


def experiment_options(fn):
    for option in reversed(_EXPERIMENT_OPTIONS):
        fn = option(fn)
    return fn


def resolve_config(config_file: Optional[Path], ablate: Iterable[str], **overrides: Any):
    file_values = load_config_file(config_file) if config_file else {}
    ablate = tuple(ablate or ())
    if ablate:
        # Only the ablated factors are overridden; the rest keep their file values.
        overrides["flags"] = {name: False for name in ablate}
    return build_run_config(file_values, overrides)


class DatasetStatsOutput(OutputModel):
    stats: DatasetStats

    def get_human_readable_output(self) -> Iterable[Any]:
        row = self.stats.dict()
        return [
            metrics_table([row], ["dataset", "users", "pois", "categories", "checkins"]),
            metrics_table(
                [row],
                [
                    "train_checkins",
                    "validation_checkins",
                    "test_checkins",
                    "test_trajectories",
                    "test_cases",
                    "dropped_short_trajectories",
                ],
            ),
            f"{self.stats.category_names} distinct category names, "
            f"{self.stats.malformed_records} malformed records skipped, "
            f"{self.stats.duplicate_poi_conflicts} conflicting POI definitions",
        ]


@nextpoi.command(help="Validate a check-in file and print its statistics", cls=NextPoiCommand)
@click.argument("dataset", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--split-ratios", type=float, nargs=3, default=None)
@click.option("--strict/--no-strict", default=False, help="Abort on malformed input lines")
@catch_em_all
def ingest(dataset: Path, split_ratios, strict: bool):
    ratios = split_ratios or DEFAULT_SPLIT_RATIOS
    try:
        validate_split_ratios(ratios)
    except ValueError as e:
        raise click.BadParameter(str(e), param_hint="--split-ratios") from None

    ingested = load_dataset(dataset, strict=strict)
    split = chronological_split(ingested.checkins, ratios)
    return DatasetStatsOutput(stats=describe_dataset(dataset.stem, ingested, split))


class ReportOutput(OutputModel):
    report: EvalReport
    out_path: Optional[str] = None
    report_path: Optional[str] = None
    evaluated: Optional[int] = None
    resumed: Optional[int] = None

    def get_human_readable_output(self) -> Iterable[Any]:
        row = {**self.report.config, **self.report.dict(include=set(METRIC_COLUMNS))}
        output: List[Any] = [
            metrics_table([row], ["method", "flags", "ordering", "model", *METRIC_COLUMNS]),
            "parse status: "
            + ", ".join(f"{k}={v}" for k, v in self.report.parse_status_counts.items()),
        ]
        if self.out_path:
            output.append(
                f"[green]{self.evaluated} cases evaluated, {self.resumed} resumed; "
                f"results in {self.out_path}, report in {self.report_path}[/green]"
            )
        return output


@nextpoi.command(name="run", help="Evaluate a method over the test cases", cls=NextPoiCommand)
@experiment_options
@click.option("--progress/--no-progress", default=True, help="Show a progress bar")
@catch_em_all
def run_command(config_file, ablate, progress: bool, **overrides):
    config = resolve_config(config_file, ablate, **overrides)
    result = run(config, show_progress=progress)
    return ReportOutput(
        report=result.report,
        out_path=str(result.out_path),
        report_path=str(result.report_path),
        evaluated=result.evaluated,
        resumed=result.resumed,
    )


@nextpoi.command(
    name="report", help="Recompute metrics from a JSONL result file", cls=NextPoiCommand
)
@click.argument("results", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@catch_em_all
def report_command(results: Path):
    return ReportOutput(report=report(results))


class CompareOutput(OutputModel):
    rows: List[Dict[str, Any]]

    def get_human_readable_output(self) -> Iterable[Any]:
        return [metrics_table(self.rows, ["method", "flags", "ordering", *METRIC_COLUMNS])]


@nextpoi.command(
    name="compare", help="Tabulate metrics of several result files", cls=NextPoiCommand
)
@click.argument(
    "results", nargs=-1, required=True, type=click.Path(exists=True, dir_okay=False, path_type=Path)
)
@catch_em_all
def compare_command(results: List[Path]):
    summary = compare(results)
    rows = [
        {key: (value.item() if hasattr(value, "item") else value) for key, value in row.items()}
        for row in summary.to_dict(orient="records")
    ]
    return CompareOutput(rows=rows)


@nextpoi.group(help="Inspect rendered prompts")
def prompts():
    pass


class PromptsDumpOutput(OutputModel):
    paths: List[str]

    def get_human_readable_output(self) -> Iterable[Any]:
        return [f"[green]Wrote {len(self.paths)} prompt file(s)[/green]"]


@prompts.command(name="dump", help="Write rendered prompts to text files", cls=NextPoiCommand)
@experiment_options
@click.option("--limit", type=int, default=None, help="Only the first N test cases")
@click.option(
    "--out-dir",
    required=True,
    type=click.Path(file_okay=False, path_type=Path),
    help="Directory for the <trajectory_id>.txt files",
)
@catch_em_all
def prompts_dump(config_file, ablate, limit: Optional[int], out_dir: Path, **overrides):
    config = resolve_config(config_file, ablate, **overrides)
    paths = dump_prompts(config, out_dir, limit=limit)
    return PromptsDumpOutput(paths=[str(p) for p in paths])


@nextpoi.group(help="Inspect the response cache")
def cache():
    pass


class CacheStatsOutput(OutputModel):
    stats: CacheStats

    def get_human_readable_output(self) -> Iterable[Any]:
        output: List[Any] = [
            metrics_table(
                [self.stats.dict()], ["cache_dir", "entries", "total_bytes", "corrupt_entries"]
            )
        ]
        if self.stats.entries_by_model:
            output.append(
                metrics_table(
                    [{"model": m, "entries": n} for m, n in self.stats.entries_by_model.items()],
                    ["model", "entries"],
                )
            )
        return output


@cache.command(name="stats", help="Count response cache entries", cls=NextPoiCommand)
@click.option(
    "--cache-dir",
    type=click.Path(file_okay=False, path_type=Path),
    default=Path(".nextpoi-cache"),
    show_default=True,
)
@catch_em_all
def cache_stats(cache_dir: Path):
    return CacheStatsOutput(stats=ResponseCache(cache_dir).stats())
