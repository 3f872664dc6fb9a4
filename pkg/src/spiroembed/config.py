"""Run configuration: one validated document covering every stage, plus seed derivation.

Every random stream is derived from the top-level ``seed`` with
:func:`derive_seed`, so a config file and a seed fully determine a run.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from pydantic import ValidationError as _PydanticError

from . import augment, byol, gbdt, synth
from .cohort import LVEF_THRESHOLD, RVEF_THRESHOLD
from .exceptions import ParameterError
from .pipeline import EnsembleConfig, PipelineConfig, ProbeConfig, derive_seed
from .spiro import BlowCriteria


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class CohortSection(_Strict):
    n_subjects: int = Field(4000, ge=10)
    positive_rate: float = Field(0.2, gt=0, lt=1)
    effect_size: float = Field(1.0, ge=0, le=1)
    risk_weights: dict[str, float] = Field(default_factory=lambda: dict(synth.DEFAULT_RISK_WEIGHTS))
    severity_weight: float = 5.0
    rvef_noise: float = Field(3.0, ge=0)
    scoop_gain: float = 0.6
    scoop_noise: float = Field(0.15, ge=0)
    flow_noise: float = Field(0.02, ge=0)


class BlowSection(_Strict):
    min_volume_l: float = Field(0.5, ge=0)
    min_duration_s: float = Field(0.5, ge=0)
    monotone_tol_l: float = Field(1e-6, ge=0)


class ThresholdSection(_Strict):
    rvef: float = Field(RVEF_THRESHOLD, gt=0, le=100)
    lvef: float = Field(LVEF_THRESHOLD, gt=0, le=100)


class AugmentEntry(_Strict):
    kind: Literal[augment.KINDS]
    ranges: dict[str, tuple[float, float]] = Field(default_factory=dict)
    weight: float = Field(1.0, ge=0)

    @field_validator("ranges")
    @classmethod
    def _ordered(cls, v):
        for name, (lo, hi) in v.items():
            if lo > hi:
                raise ValueError(f"range for {name} has low > high")
        return v


def _default_entries() -> list[AugmentEntry]:
    return [
        AugmentEntry(kind=t.kind, ranges=dict(t.ranges), weight=t.weight)
        for t in augment.AugmentDistribution.default().entries
    ]


class AugmentSection(_Strict):
    T: list[AugmentEntry] = Field(default_factory=_default_entries, min_length=1)
    T_prime: list[AugmentEntry] = Field(default_factory=_default_entries, min_length=1)


class EncoderSection(_Strict):
    channels: tuple[int, ...] = (16, 32, 64)
    kernel: int = Field(5, ge=1)
    stride: int = Field(2, ge=1)
    latent_dim: int = Field(8, ge=1)


class SlseSection(_Strict):
    tau: float = Field(0.99, ge=0, le=1)
    lr: float = Field(1e-3, gt=0)
    batch_size: int = Field(64, ge=1)
    total_steps: int = Field(300, ge=1)
    projector_hidden: int = Field(64, ge=1)
    projection_dim: int = Field(32, ge=1)
    predictor_hidden: int = Field(64, ge=1)
    encoder: EncoderSection = Field(default_factory=EncoderSection)


class ProbeSection(_Strict):
    hidden: int = Field(16, ge=1)
    steps: int = Field(500, ge=1)
    lr: float = Field(1e-2, gt=0)


class GbdtSection(_Strict):
    n_trees: int = Field(100, ge=1)
    max_depth: int = Field(3, ge=1)
    shrinkage: float = Field(0.1, gt=0)
    min_child_weight: float = Field(1.0, ge=0)
    reg_lambda: float = Field(1.0, ge=0)
    min_split_gain: float = Field(0.0, ge=0)
    subsample: float = Field(0.8, gt=0, le=1)


class EnsembleSection(_Strict):
    n_runs: int = Field(10, ge=1)
    k: int = Field(3, ge=1)
    extended_features: bool = False

    @model_validator(mode="after")
    def _k_le_runs(self):
        if self.k > self.n_runs:
            raise ValueError("k must not exceed n_runs")
        return self


class SplitSection(_Strict):
    ratios: tuple[float, float, float] = (0.7, 0.15, 0.15)

    @field_validator("ratios")
    @classmethod
    def _sum_to_one(cls, v):
        if any(r < 0 for r in v) or abs(sum(v) - 1.0) > 1e-9:
            raise ValueError("split ratios must be nonnegative and sum to 1")
        return v


class PathSection(_Strict):
    out: str = "runs/default"


class RunConfig(_Strict):
    seed: int = Field(0, ge=0)
    cohort: CohortSection = Field(default_factory=CohortSection)
    blow: BlowSection = Field(default_factory=BlowSection)
    thresholds: ThresholdSection = Field(default_factory=ThresholdSection)
    augment: AugmentSection = Field(default_factory=AugmentSection)
    slse: SlseSection = Field(default_factory=SlseSection)
    probe: ProbeSection = Field(default_factory=ProbeSection)
    gbdt: GbdtSection = Field(default_factory=GbdtSection)
    ensemble: EnsembleSection = Field(default_factory=EnsembleSection)
    split: SplitSection = Field(default_factory=SplitSection)
    paths: PathSection = Field(default_factory=PathSection)

    # --- identity ----------------------------------------------------------

    def canonical(self) -> dict:
        """Everything that influences results; output paths are excluded."""
        return self.model_dump(mode="json", exclude={"paths"})

    def config_hash(self) -> str:
        text = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def stage_seed(self, stage: str) -> int:
        return derive_seed(self.seed, stage)

    # --- conversion to module configs --------------------------------------

    def cohort_config(self) -> synth.CohortConfig:
        return synth.CohortConfig(**self.cohort.model_dump(), seed=self.stage_seed("cohort"))

    def blow_criteria(self) -> BlowCriteria:
        return BlowCriteria(**self.blow.model_dump())

    @staticmethod
    def _distribution(entries: list[AugmentEntry]) -> augment.AugmentDistribution:
        return augment.AugmentDistribution(
            [augment.AugmentTemplate(e.kind, dict(e.ranges), e.weight) for e in entries]
        )

    def slse_config(self) -> byol.SlseConfig:
        s = self.slse.model_dump(exclude={"encoder"})
        return byol.SlseConfig(
            **s,
            seed=self.stage_seed("pretrain"),
            encoder=byol.EncoderSpec(**self.slse.encoder.model_dump()),
            augment=self._distribution(self.augment.T),
            augment_prime=self._distribution(self.augment.T_prime),
        )

    def pipeline_config(self) -> PipelineConfig:
        ensemble = EnsembleConfig(
            n_runs=self.ensemble.n_runs,
            k=self.ensemble.k,
            probe=ProbeConfig(**self.probe.model_dump()),
            trees=gbdt.GbdtParams(**self.gbdt.model_dump()),
            extended=self.ensemble.extended_features,
            seed=self.stage_seed("ensemble"),
        )
        return PipelineConfig(ratios=self.split.ratios, seed=self.seed, slse=self.slse_config(), ensemble=ensemble)


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Read a YAML or JSON document (JSON is valid YAML) and validate it.

    ``overrides`` holds dotted keys, e.g. ``{"seed": 3, "paths.out": "x"}``.
    """
    data = {}
    if path is not None:
        text = Path(path).read_text()
        try:
            data = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ParameterError(f"cannot parse config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ParameterError(f"config {path} must be a mapping")
    for dotted, value in (overrides or {}).items():
        node = data
        *parents, leaf = dotted.split(".")
        for key in parents:
            node = node.setdefault(key, {})
        node[leaf] = value
    try:
        return RunConfig.model_validate(data)
    except _PydanticError as exc:
        raise ParameterError(f"invalid configuration: {exc}") from exc


def dump_config(config: RunConfig) -> str:
    return yaml.safe_dump(config.model_dump(mode="json"), sort_keys=False)
