"""Request models for the API."""

from pathlib import Path
from typing import Optional

from pydantic import BaseModel, ConfigDict, Field

from config import settings
from core.errors import ArgumentError
from core.schemas import ExperimentSpec, SolverConfig

INPUT_FIELDS = ("events_path", "truth_path", "graph_path")


def confine(path: str, root: Path, name: str) -> str:
    """Resolve ``path`` against ``root``; anything that lands outside ``root`` is refused."""
    base = Path(root).resolve()
    target = (base / path).resolve()
    if not target.is_relative_to(base):
        raise ArgumentError(f"{name} must lie under {base}")
    return str(target)


class StaticJobRequest(BaseModel):
    """Request model for a static evaluation job."""

    model_config = ConfigDict(extra="forbid")

    events_path: str = Field(..., description="Event CSV under the server's data root")
    truth_path: str = Field(..., description="Truth CSV for the scored GDs")
    graph_path: Optional[str] = Field(None, description="Location graph CSV")
    K: int = Field(..., ge=1, description="Maximum number of updates per GD")
    n_locations: Optional[int] = Field(None, ge=1)
    n_features: Optional[int] = Field(None, ge=1)
    epoch: int = 1
    horizon: Optional[int] = None
    output_dir: Optional[str] = Field(None, description="Under the server's output directory; defaults to the job id")
    score_all_gds: bool = False
    solver: SolverConfig = Field(default_factory=SolverConfig)

    def _spec_values(self, job_id: str, exclude: set[str]) -> dict:
        """Request fields with input paths under ``data_root`` and the output under ``output_dir``."""
        values = self.model_dump(exclude={"solver", *exclude}, exclude_none=True)
        for key in INPUT_FIELDS:
            if key in values:
                values[key] = confine(values[key], settings.data_root, key)
        values["output_dir"] = confine(values.get("output_dir", job_id), settings.output_dir, "output_dir")
        return values

    def to_spec(self, job_id: str) -> ExperimentSpec:
        return ExperimentSpec(mode="static", solver=self.solver, **self._spec_values(job_id, set()))


class DynamicJobRequest(StaticJobRequest):
    """Request model for a dynamic replay job."""

    replay_start: int = Field(..., description="Horizon of the initial batch fit")
    restart_batch: bool = Field(default=True, description="Refit from scratch at every arrival too")
    first_appearance_only: bool = False

    def to_spec(self, job_id: str) -> ExperimentSpec:
        values = self._spec_values(job_id, {"score_all_gds"})
        return ExperimentSpec(mode="dynamic", solver=self.solver, **values)


class ScoreRequest(BaseModel):
    """Aligned estimate and truth values."""

    estimates: list[float] = Field(..., min_length=1)
    truth: list[float] = Field(..., min_length=1)
    scope: str = Field(default="underreported", max_length=100)
