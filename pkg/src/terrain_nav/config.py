"""Application config: one JSON file with a section per module.

Unknown keys are rejected everywhere; cross-section constraints are checked
once the sections are assembled.
"""

from __future__ import annotations

from pathlib import Path
from typing import Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator

from .assessment import AssessmentConfig
from .gpr import GprConfig
from .nmpc import NmpcConfig
from .planner import PlannerConfig


class MapConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    res: float = Field(0.1, gt=0, description="voxel edge length (m)")


class SimConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    replan_interval: float = Field(2.0, gt=0, description="sim seconds between global replans")
    sensing_radius: float = Field(5.0, gt=0)
    goal_tolerance: float = Field(0.5, gt=0)
    max_sim_time: float = Field(120.0, gt=0)
    max_plan_failures: int = Field(3, ge=1)
    replan_iterations: int = Field(500, ge=0, description="planner iterations for replans after the first")
    sensing_noise: float = Field(0.0, ge=0, description="std of noise added to sensed obstacles (m); off by default")


class AppConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    seed: int = 0
    map: MapConfig = MapConfig()
    assessment: AssessmentConfig = AssessmentConfig()
    planner: PlannerConfig = PlannerConfig()
    gpr: GprConfig = GprConfig()
    nmpc: NmpcConfig = NmpcConfig()
    sim: SimConfig = SimConfig()

    @model_validator(mode="after")
    def _cross_check(self):
        half = self.assessment.side / 2.0
        if not self.planner.step < half:
            raise ValueError(f"planner.step ({self.planner.step}) must be < assessment.side/2 ({half})")
        if not self.planner.neighbor_radius < half:
            raise ValueError(f"planner.neighbor_radius ({self.planner.neighbor_radius}) must be "
                             f"< assessment.side/2 ({half})")
        if not self.sim.goal_tolerance > self.planner.goal_region_radius:
            raise ValueError("sim.goal_tolerance must exceed planner.goal_region_radius")
        return self

    @property
    def planner_seeded(self) -> PlannerConfig:
        return self.planner.model_copy(update={"seed": self.seed})

    @property
    def length_scale(self) -> float:
        return self.gpr.length_scale if self.gpr.length_scale is not None else self.planner.step

    @classmethod
    def load(cls, path: Optional[str | Path]) -> "AppConfig":
        if path is None:
            return cls()
        p = Path(path)
        try:
            text = p.read_text()
        except FileNotFoundError:
            raise FileNotFoundError(f"config not found: {p}") from None
        return cls.model_validate_json(text)

    def with_overrides(self, updates: dict) -> "AppConfig":
        """Re-validated copy with dotted-path overrides, e.g. ``{"nmpc.use_traversability_weight": False}``."""
        data = self.model_dump()
        for key, value in updates.items():
            node = data
            *parents, leaf = key.split(".")
            for part in parents:
                node = node[part]
            node[leaf] = value
        return AppConfig.model_validate(data)
