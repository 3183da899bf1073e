"""Run configuration: defaults, an optional TOML file and explicit CLI overrides, in that order."""
import enum
import math
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple, Union

import structlog
import tomli
from pydantic import (
    BaseModel,
    BaseSettings,
    Field,
    SecretStr,
    ValidationError,
    conint,
    root_validator,
    validator,
)

from nextpoi.baselines import PopularityScope
from nextpoi.candidates import DEFAULT_CANDIDATE_COUNT, OrderingStrategy
from nextpoi.dataset import DEFAULT_SPLIT_RATIOS, validate_split_ratios
from nextpoi.errors import ConfigurationError
from nextpoi.llm_client.api import DEFAULT_BASE_URL
from nextpoi.llm_client.types import DEFAULT_MAX_OUTPUT_TOKENS, DEFAULT_MODEL
from nextpoi.prompting import (
    DEFAULT_LONG_TERM_LENGTH,
    DEFAULT_TOP_K,
    FLAG_NAMES,
    RequirementFlags,
)

logger = structlog.get_logger(__name__)


@enum.unique
class Method(str, enum.Enum):
    llmmove = "llmmove"
    popu = "popu"
    dist = "dist"


@enum.unique
class Backend(str, enum.Enum):
    live = "live"
    nearest_k = "nearest_k"
    popular_k = "popular_k"
    garbage = "garbage"
    fixture_replay = "fixture_replay"

    @property
    def is_mock(self) -> bool:
        return self is not Backend.live


class RunConfig(BaseModel):
    dataset_path: Path
    split_ratios: Tuple[float, float, float] = DEFAULT_SPLIT_RATIOS
    seed: int = 0
    n_candidates: conint(ge=0) = DEFAULT_CANDIDATE_COUNT
    ordering: OrderingStrategy = OrderingStrategy.dist_asc
    method: Method = Method.llmmove
    flags: RequirementFlags = RequirementFlags()
    m_long_term: conint(ge=0) = DEFAULT_LONG_TERM_LENGTH
    top_k: conint(ge=1) = DEFAULT_TOP_K
    model: str = DEFAULT_MODEL
    base_url: Optional[str] = None
    """Falls back to LLM_BASE_URL, then the public endpoint"""
    temperature: float = 0.0
    max_test_cases: Optional[conint(ge=1)] = None
    concurrency: conint(ge=1) = 4
    cache_dir: Path = Path(".nextpoi-cache")
    out: Path = Path("results/run.jsonl")

    backend: Backend = Backend.live
    replay_fixture: Optional[Path] = None
    max_output_tokens: conint(ge=1) = DEFAULT_MAX_OUTPUT_TOKENS
    timeout_seconds: float = 60.0
    max_attempts: conint(ge=1) = 5
    popu_scope: PopularityScope = PopularityScope.global_
    strict: bool = False
    use_cache: bool = True

    class Config:
        extra = "forbid"

    @validator("split_ratios")
    def validate_ratios(cls, v):
        validate_split_ratios(v)
        return v

    @validator("temperature")
    def validate_temperature(cls, v):
        if not math.isfinite(v) or not 0.0 <= v <= 2.0:
            raise ValueError(f"temperature must lie in [0, 2], got {v}")
        return v

    @validator("timeout_seconds")
    def validate_timeout(cls, v):
        if not v > 0:
            raise ValueError("timeout_seconds must be positive")
        return v

    @root_validator(skip_on_failure=True)
    def validate_backend(cls, values):
        if values["backend"] is Backend.fixture_replay and values.get("replay_fixture") is None:
            raise ValueError("the fixture_replay backend needs replay_fixture")
        return values

    @property
    def report_path(self) -> Path:
        return self.out.with_name(f"{self.out.stem}.report.json")


class LLMSettings(BaseSettings):
    """Endpoint credentials, read from the environment only."""

    llm_api_key: Optional[SecretStr] = Field(None, env="LLM_API_KEY")
    llm_base_url: str = Field(DEFAULT_BASE_URL, env="LLM_BASE_URL")


def load_config_file(path: Union[str, Path]) -> Dict[str, Any]:
    """Read a TOML run config into RunConfig field values.

    Flags may sit in a ``[flags]`` table or as top-level ``lp``/``rp``/``geo``/``seq`` keys.
    """
    try:
        with open(path, "rb") as infile:
            values = tomli.load(infile)
    except OSError as e:
        raise ConfigurationError(f"Unable to read config file {str(path)!r}: {e}") from e
    except tomli.TOMLDecodeError as e:
        raise ConfigurationError(f"Config file {str(path)!r} is not valid TOML: {e}") from e

    flags = values.pop("flags", {})
    if not isinstance(flags, dict):
        raise ConfigurationError(f"Config file {str(path)!r}: 'flags' must be a table")
    flags = dict(flags)
    for name in FLAG_NAMES:
        if name in values:
            flags[name] = values.pop(name)
    if flags:
        values["flags"] = flags

    return values


def build_run_config(
    file_values: Optional[Mapping[str, Any]] = None,
    overrides: Optional[Mapping[str, Any]] = None,
) -> RunConfig:
    """Merge file values with overrides; a None override means "not given" and is skipped."""
    values: Dict[str, Any] = dict(file_values or {})
    flags: Dict[str, Any] = dict(values.pop("flags", None) or {})

    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key == "flags":
            flags.update(value.dict() if isinstance(value, BaseModel) else value)
        else:
            values[key] = value

    if flags:
        values["flags"] = flags

    try:
        config = RunConfig(**values)
    except ValidationError as e:
        raise ConfigurationError(f"Invalid run configuration:\n{e}") from None

    logger.debug("resolved run configuration", **config.dict(exclude={"flags"}))
    return config
