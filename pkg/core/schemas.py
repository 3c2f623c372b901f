"""Pydantic models for solver, generator and experiment configuration, and score reports."""

from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator

from config import settings

# Delay profile used when K = 4 and nothing else is configured.
DEFAULT_PROFILE_K4 = (0.6, 0.25, 0.1, 0.05)


class SolverConfig(BaseModel):
    """Parameters of the batch solver and of the online tracker."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    rank: int = Field(default=settings.default_rank, ge=1, description="CP rank F")
    alpha: float = Field(
        default=settings.default_alpha, gt=0.0, lt=1.0, description="Weight of fully observed slabs"
    )
    rho_a: float = Field(default=settings.default_rho_a, ge=0.0, description="Graph regularization weight")
    rho: float = Field(default=settings.default_rho, ge=0.0, description="Smoothness weight for C and D")
    smooth_boundary: Literal["free", "fixed"] = Field(
        default="free", description="Second differences over interior rows only, or with zero padding at both ends"
    )
    max_outer_iters: int = Field(default=settings.max_outer_iters, ge=0)
    tol_rel_obj: float = Field(default=settings.tol_rel_obj, gt=0.0)
    tol_station: float = Field(default=settings.tol_station, gt=0.0)
    momentum: Literal["fista", "none"] = "fista"
    restart_tol: float = Field(default=1e-6, ge=0.0, description="Relative increase that resets momentum")
    init_iters: int = Field(default=settings.init_iters, ge=0, description="NTF sweeps during initialization")
    nnls_iters: int = Field(default=500, ge=1, description="Projected-gradient cap for initial D rows")
    nnls_tol: float = Field(default=1e-8, gt=0.0)
    eig_tol: float = Field(default=settings.eig_tol, gt=0.0)
    normalize: bool = Field(default=True, description="Scale data to unit max before solving")
    literal_update: bool = Field(default=False, description="Unprojected step anchored at the previous iterate")
    seed: int = 0

    # Online tracking
    fp_iters: int = Field(default=settings.fp_iters, ge=1)
    fp_tol: float = Field(default=settings.fp_tol, gt=0.0)
    literal_fp: bool = Field(default=False, description="Fit the new GD row against unmasked data")
    resync_every: Optional[int] = Field(default=None, ge=1, description="Batch refit every R arrivals")

    def unregularized(self) -> "SolverConfig":
        """The same solver with rho_a = rho = 0 (plain 4-way completion)."""
        return self.model_copy(update={"rho_a": 0.0, "rho": 0.0})


class GeneratorConfig(BaseModel):
    """Synthetic multi-version data generator settings."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    I: int = Field(ge=1, description="Locations")  # noqa: E741
    J: int = Field(ge=1, description="Features")
    S: int = Field(ge=1, description="Generation dates")
    K: int = Field(ge=1, description="Maximum updates per GD")
    F: int = Field(ge=1, description="Rank")
    seed: int = 0
    fractions: Optional[list[float]] = None
    concentration: Optional[list[float]] = None
    noise_scale: float = Field(default=0.0, ge=0.0)
    factor_smoothness: bool = False
    mismatch_scale: float = Field(default=0.0, ge=0.0)
    communities: int = Field(default=0, ge=0, description="Planted location communities (0 = none)")
    community_spread: float = Field(default=0.05, ge=0.0)
    epoch: int = 1

    @model_validator(mode="after")
    def _check_profile(self) -> "GeneratorConfig":
        if self.fractions is not None and self.concentration is not None:
            raise ValueError("give either fractions or concentration, not both")
        if self.fractions is not None:
            if len(self.fractions) != self.K:
                raise ValueError(f"expected {self.K} fractions, got {len(self.fractions)}")
            if any(p < 0 for p in self.fractions):
                raise ValueError("fractions must be nonnegative")
            if abs(sum(self.fractions) - 1.0) > 1e-12:
                raise ValueError(f"fractions sum to {sum(self.fractions)!r}, not 1")
        if self.concentration is not None:
            if len(self.concentration) != self.K:
                raise ValueError(f"expected {self.K} concentration values, got {len(self.concentration)}")
            if any(a <= 0 for a in self.concentration):
                raise ValueError("concentration values must be positive")
        if self.communities > self.I:
            raise ValueError("more communities than locations")
        return self

    @property
    def profile(self) -> tuple[float, ...]:
        """Mean delay profile p_1..p_K."""
        if self.fractions is not None:
            return tuple(self.fractions)
        if self.concentration is not None:
            total = sum(self.concentration)
            return tuple(a / total for a in self.concentration)
        if self.K == 4:
            return DEFAULT_PROFILE_K4
        weights = [0.4**k for k in range(self.K)]
        total = sum(weights)
        return tuple(w / total for w in weights)


class ExperimentSpec(BaseModel):
    """Inputs and parameters of a static or dynamic evaluation run."""

    model_config = ConfigDict(extra="forbid")

    mode: Literal["static", "dynamic"] = "static"
    events_path: Path
    truth_path: Optional[Path] = None
    graph_path: Optional[Path] = None
    K: int = Field(ge=1)
    n_locations: Optional[int] = Field(default=None, ge=1)
    n_features: Optional[int] = Field(default=None, ge=1)
    epoch: int = 1
    horizon: Optional[int] = Field(default=None, description="Last loading date replayed; defaults to the log's")
    replay_start: Optional[int] = Field(default=None, description="Horizon of the initial batch fit (dynamic)")
    solver: SolverConfig = Field(default_factory=SolverConfig)
    output_dir: Path = settings.output_dir
    restart_batch: bool = Field(default=True, description="Also refit from scratch at every arrival")
    first_appearance_only: bool = False
    score_all_gds: bool = False

    @model_validator(mode="after")
    def _check_inputs(self) -> "ExperimentSpec":
        for name in ("events_path", "truth_path", "graph_path"):
            path = getattr(self, name)
            if path is not None and not Path(path).exists():
                raise ValueError(f"{name} does not exist: {path}")
        if self.mode == "static" and self.truth_path is None:
            raise ValueError("static experiments need a truth file for the withheld GDs")
        if self.mode == "dynamic" and self.replay_start is None:
            raise ValueError("dynamic experiments need replay_start")
        return self


class ScoreReport(BaseModel):
    """RMSE, MAE and R^2 over a scored set of entries."""

    rmse: float = Field(ge=0.0)
    mae: float = Field(ge=0.0)
    r2: Optional[float] = Field(default=None, le=1.0, description="None when the truth has zero variance")
    n: int = Field(gt=0)
    scope: str = "underreported"


class MetricSummary(BaseModel):
    mean: float
    std: float


class AggregateReport(BaseModel):
    """Mean and standard deviation of per-GD scores."""

    rmse: MetricSummary
    mae: MetricSummary
    r2: Optional[MetricSummary] = None
    n_scores: int
