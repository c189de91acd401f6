"""Engine configuration via environment variables and an optional JSON file."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Literal, Self

from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from rsuper_engine.errors import GridIOError, MalformedDocument
from rsuper_engine.models import LossWeights, SizeMode, Variant

#: Fixed default seed; runs are never seeded from the clock.
DEFAULT_SEED = 7

#: Face (6) or full (26) voxel adjacency.
CONNECTIVITIES = (6, 26)


class FitSettings(BaseModel):
    steps: int = Field(default=500, ge=1)
    lr: float = Field(default=0.5, gt=0.0)
    init_logit: float = -2.0
    init_jitter: float = Field(default=0.01, ge=0.0)
    presence_surrogate: Literal["peak", "volume"] = "peak"
    presence_margin: float = Field(default=0.1, ge=0.0)
    workers: int = Field(default=1, ge=1)


class EngineConfig(BaseSettings):
    model_config = SettingsConfigDict(env_prefix="RSUPER_", env_nested_delimiter="__")

    # Thresholding and components
    tau: float = Field(default=0.5, gt=0.0, le=1.0)
    connectivity: int = 26

    # Loss composition
    size_mode: SizeMode = SizeMode.MAX_EXTENT
    size_one_sided: bool = False
    variant: Variant = Variant.HARD
    weights: LossWeights = Field(default_factory=LossWeights)

    # Optimizer
    fit: FitSettings = Field(default_factory=FitSettings)

    @field_validator("connectivity")
    @classmethod
    def _check_connectivity(cls, value: int) -> int:
        if value not in CONNECTIVITIES:
            raise ValueError(f"connectivity must be 6 or 26, got {value}")
        return value

    @model_validator(mode="after")
    def _check_presence_target(self) -> Self:
        if self.tau + self.fit.presence_margin > 1.0:
            raise ValueError(
                "tau + fit.presence_margin must not exceed 1 (presence target unreachable)"
            )
        return self

    @classmethod
    def from_file(cls, path: Path | str | None = None, **overrides: Any) -> EngineConfig:
        """Build a config with precedence override > file > environment > default.

        ``None`` overrides are ignored so CLI flags that were not given fall
        through to the file.
        """
        data: dict[str, Any] = {}
        if path is not None:
            p = Path(path)
            try:
                data = json.loads(p.read_text(encoding="utf-8"))
            except OSError as e:
                raise GridIOError(f"cannot read config {p}: {e.strerror}") from e
            except json.JSONDecodeError as e:
                raise MalformedDocument(f"config {p} is not valid JSON: {e.msg}") from e
            if not isinstance(data, dict):
                raise MalformedDocument(f"config {p} must hold a JSON object")
        data.update({k: v for k, v in overrides.items() if v is not None})
        try:
            return cls(**data)
        except ValidationError as e:
            err = e.errors()[0]
            loc = ".".join(str(x) for x in err["loc"])
            raise MalformedDocument(f"invalid config {loc}: {err['msg']}") from e
