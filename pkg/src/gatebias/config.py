"""Pipeline configuration: one JSON document with a section per stage.

Every artifact records the hash of the normalized configuration so a report
can refuse to mix outputs from different runs.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
from pathlib import Path
from typing import Any, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from ._validation import coerce
from .errors import ConfigError
from .sae import SaeHyper
from .surrogate import SurrogateConfig

STAGES = ("simulate", "ingest", "split", "train-sae", "discover", "probe", "diagnose", "calibrate", "steer",
          "evaluate", "report")
REPORT_DIR_ENV = "GATEBIAS_REPORT_DIR"


class _Section(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


class PathsConfig(_Section):
    workdir: str = "gatebias-run"
    reports: Optional[str] = None


class CorpusConfig(_Section):
    """Generic first-stage SAE training data drawn over the planted basis."""

    size: int = Field(50000, ge=1)
    n_active: int = Field(1, ge=1)
    scale: float = Field(1.0, gt=0)


class SplitConfig(_Section):
    cal_fraction: float = Field(0.5, gt=0, lt=1)


class DiscoveryConfig(_Section):
    R: list[int] = Field(default_factory=lambda: [32, 64, 128])
    use_R: int = Field(128, ge=1)

    @model_validator(mode="after")
    def _check(self):
        if not self.R or any(r < 1 for r in self.R):
            raise ValueError("R must be a nonempty list of positive integers")
        if self.use_R not in self.R:
            raise ValueError(f"use_R={self.use_R} must be one of R={self.R}")
        return self


class ProbeConfig(_Section):
    counts: list[int] = Field(default_factory=lambda: [1, 2, 3, 5, 10, 20])
    folds: int = Field(5, ge=2)
    l2: Optional[float] = Field(None, ge=0)

    @field_validator("counts")
    @classmethod
    def _counts(cls, v):
        if not v or any(k < 1 for k in v):
            raise ValueError("counts must be a nonempty list of positive integers")
        return v


class SteeringConfig(_Section):
    rs: list[int] = Field(default_factory=lambda: [5, 10, 15, 20, 25, 30])
    alpha: float = Field(0.8, ge=0, le=1)
    suppress_factor: float = Field(0.5, ge=0)
    promote_factor: float = Field(1.5, ge=0)
    steer_r: Optional[int] = Field(None, ge=1)

    @field_validator("rs")
    @classmethod
    def _rs(cls, v):
        if not v or any(r < 1 for r in v):
            raise ValueError("rs must be a nonempty list of positive integers")
        return v


def _desk_sae() -> SaeHyper:
    return SaeHyper(batch_tokens=256, stage1_steps=8000, stage2_steps=4000, n_features=512, k=2)


class PipelineConfig(_Section):
    seed: int = Field(0, ge=0, lt=2**32)
    paths: PathsConfig = Field(default_factory=PathsConfig)
    surrogate: SurrogateConfig = Field(default_factory=SurrogateConfig)
    corpus: CorpusConfig = Field(default_factory=CorpusConfig)
    sae: SaeHyper = Field(default_factory=_desk_sae)
    split: SplitConfig = Field(default_factory=SplitConfig)
    discovery: DiscoveryConfig = Field(default_factory=DiscoveryConfig)
    probe: ProbeConfig = Field(default_factory=ProbeConfig)
    steering: SteeringConfig = Field(default_factory=SteeringConfig)

    def stage_seed(self, stage: str) -> int:
        """Seed for one stage, derived from the global seed and the stage's position."""
        if stage not in STAGES:
            raise ConfigError(f"unknown stage {stage!r}")
        ss = np.random.SeedSequence([self.seed, STAGES.index(stage)])
        return int(ss.generate_state(1, np.uint32)[0])

    def canonical_json(self) -> str:
        """Sorted compact JSON of every setting except file locations."""
        return json.dumps(self.model_dump(mode="json", exclude={"paths"}), sort_keys=True, separators=(",", ":"))

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()

    def workdir(self) -> Path:
        return Path(self.paths.workdir)

    def report_dir(self, environ=None) -> Path:
        env = os.environ if environ is None else environ
        if env.get(REPORT_DIR_ENV):
            return Path(env[REPORT_DIR_ENV])
        if self.paths.reports:
            return Path(self.paths.reports)
        return self.workdir() / "reports"


_DESK_SAE_DEFAULTS = _desk_sae().model_dump()


def validate_config(document: dict | None) -> PipelineConfig:
    """Fill defaults and check bounds; errors name the offending field path.

    A missing ``surrogate.seed`` is derived from the global seed, and the SAE
    section starts from the desk-scale defaults rather than the library ones.
    """
    doc = copy.deepcopy(document) if document else {}
    if not isinstance(doc, dict):
        raise ConfigError("<root>: config document must be a JSON object")
    sae = doc.get("sae", {})
    if isinstance(sae, dict):
        doc["sae"] = {**_DESK_SAE_DEFAULTS, **sae}
    cfg = coerce(PipelineConfig, doc)
    if "seed" not in (doc.get("surrogate") or {}):
        cfg = cfg.model_copy(update={"surrogate": cfg.surrogate.model_copy(update={"seed": cfg.stage_seed("simulate")})})
    return cfg


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(document: dict, overrides: list[str]) -> dict:
    """Set ``a.b.c=value`` entries on a copy of ``document``; values parse as JSON when possible."""
    doc = copy.deepcopy(document) if document else {}
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like section.field=value")
        key, raw = item.split("=", 1)
        parts = [p for p in key.strip().split(".") if p]
        if not parts:
            raise ConfigError(f"override {item!r} has an empty field path")
        node = doc
        for p in parts[:-1]:
            nxt = node.setdefault(p, {})
            if not isinstance(nxt, dict):
                raise ConfigError(f"{'.'.join(parts)}: {p} is not a section")
            node = nxt
        node[parts[-1]] = _parse_value(raw)
    return doc


def load_config(path=None, overrides: list[str] | None = None) -> PipelineConfig:
    doc: dict = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return validate_config(apply_overrides(doc, overrides or []))
