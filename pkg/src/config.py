"""Run configuration: TOML file plus command-line overrides."""

from __future__ import annotations

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Any, Literal

from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    PositiveFloat,
    ValidationError,
    model_validator,
)

from src.errors import ConfigError
from src.fedmavg import CRule, FedMAvgParams
from src.fedmc_admm import HyperParams
from src.kernels import RegularizerSpec
from src.sampling import SamplingMode, SamplingPolicy
from src.synthetic import SyntheticSpec

Algorithm = Literal["fedmc-admm", "fedmavg"]


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DataSection(_Section):
    path: Path
    format: Literal["movielens", "triplet-csv", "synthetic-npz"] = "triplet-csv"
    max_users: int | None = Field(None, ge=1)
    shuffle_rows: bool = False


class AdmmSection(_Section):
    N: int = Field(10, ge=1)
    beta: PositiveFloat | Literal["auto"] = 0.1


class FedMAvgSection(_Section):
    Q1: int = Field(10, ge=1)
    Q2: int = Field(10, ge=1)
    c_rule: CRule = "mirror"


class SamplingSection(_Section):
    mode: SamplingMode = "fixed"
    size: int | None = Field(10, ge=1)
    probs: list[float] | None = None


class SeedSection(_Section):
    split: int = Field(0, ge=0)
    init: int = Field(0, ge=0)
    sampling: int = Field(0, ge=0)


class RunConfig(_Section):
    """Everything one run needs; (config, seeds) determine every number it writes."""

    algo: Algorithm = "fedmc-admm"
    clients: int = Field(100, ge=1)
    rank: int = Field(5, ge=1)
    rounds: int = Field(100, ge=1)
    eval_every: int = Field(10, ge=1)
    train_fraction: float = Field(0.8, gt=0.0, lt=1.0)
    out: Path = Path("metrics.csv")
    checkpoint: Path | None = None
    workers: int = Field(1, ge=1)
    window: int = Field(0, ge=0)
    timing: Literal["wall", "off"] = "wall"
    check_invariants: bool = True

    data: DataSection | None = None
    synthetic: SyntheticSpec | None = None
    reg: RegularizerSpec = RegularizerSpec()
    admm: AdmmSection = AdmmSection()
    fedmavg: FedMAvgSection = FedMAvgSection()
    sampling: SamplingSection = SamplingSection()
    seeds: SeedSection = SeedSection()

    @model_validator(mode="after")
    def _check_run(self) -> RunConfig:
        if (self.data is None) == (self.synthetic is None):
            raise ValueError("exactly one of [data] or [synthetic] is required")
        if self.algo == "fedmavg" and self.reg.kind != "l2":
            raise ValueError("fedmavg supports the l2 regularizer only")
        self.sampling_policy().validate_for(self.clients)
        return self

    def sampling_policy(self) -> SamplingPolicy:
        return SamplingPolicy(
            mode=self.sampling.mode,
            size=self.sampling.size,
            probs=self.sampling.probs,
            seed=self.seeds.sampling,
        )

    def hyperparams(self, beta: float) -> HyperParams:
        """ADMM settings with ``beta`` resolved (``auto`` is resolved by the harness)."""
        return HyperParams(
            N=self.admm.N,
            beta=beta,
            reg=self.reg,
            rank=self.rank,
            init_seed=self.seeds.init,
            check_invariants=self.check_invariants,
        )

    def fedmavg_params(self) -> FedMAvgParams:
        return FedMAvgParams(
            Q1=self.fedmavg.Q1,
            Q2=self.fedmavg.Q2,
            lam=self.reg.lam,
            gamma=self.reg.gamma,
            c_rule=self.fedmavg.c_rule,
            rank=self.rank,
            init_seed=self.seeds.init,
        )


def _merge(base: dict[str, Any], overrides: dict[str, Any]) -> dict[str, Any]:
    """Apply dotted-key overrides (``admm.beta``) on a nested mapping; None is skipped."""
    merged = {k: dict(v) if isinstance(v, dict) else v for k, v in base.items()}
    for key, value in overrides.items():
        if value is None:
            continue
        *parents, leaf = key.split(".")
        target = merged
        for part in parents:
            target = target.setdefault(part, {})
        target[leaf] = value
    return merged


def _format_validation(e: ValidationError) -> str:
    parts = []
    for err in e.errors():
        where = ".".join(str(x) for x in err["loc"]) or "config"
        parts.append(f"{where}: {err['msg']}")
    return "; ".join(parts)


def build_config(
    raw: dict[str, Any], overrides: dict[str, Any] | None = None
) -> RunConfig:
    """Validate a mapping (plus overrides) into a RunConfig.

    Raises:
        ConfigError: With pydantic's messages joined per field
    """
    try:
        return RunConfig.model_validate(_merge(raw, overrides or {}))
    except ValidationError as e:
        raise ConfigError(_format_validation(e)) from e


def load_config(
    path: Path | str, overrides: dict[str, Any] | None = None
) -> RunConfig:
    """Read a TOML run file, apply overrides and validate.

    Relative ``data.path`` values resolve against the config file's folder.

    Raises:
        ConfigError: If the file is missing, not TOML, or invalid
    """
    path = Path(path)
    try:
        with path.open("rb") as f:
            raw = tomllib.load(f)
    except FileNotFoundError as e:
        raise ConfigError(f"Config file not found: {path}") from e
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path.name}: {e}") from e

    data = raw.get("data")
    if isinstance(data, dict) and "path" in data:
        data_path = Path(data["path"])
        if not data_path.is_absolute():
            data["path"] = str(path.parent / data_path)
    return build_config(raw, overrides)


def load_synthetic_spec(path: Path | str) -> SyntheticSpec:
    """Read a ``[synthetic]`` table (or a bare table) for ``fedmc synth``.

    Raises:
        ConfigError: If the file is missing, not TOML, or invalid
    """
    path = Path(path)
    try:
        with path.open("rb") as f:
            raw = tomllib.load(f)
        return SyntheticSpec.model_validate(raw.get("synthetic", raw))
    except FileNotFoundError as e:
        raise ConfigError(f"Spec file not found: {path}") from e
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path.name}: {e}") from e
    except ValidationError as e:
        raise ConfigError(_format_validation(e)) from e
