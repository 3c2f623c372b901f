"""Application settings and configuration."""

from pathlib import Path
from typing import Literal

from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Process-wide defaults loaded from environment variables (prefix ``MVTC_``)."""

    model_config = SettingsConfigDict(
        env_prefix="MVTC_",
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="ignore",
    )

    # Job service
    api_host: str = "127.0.0.1"
    api_port: int = 8000
    api_key: str = Field(default="change-me-in-production")
    debug: bool = False

    # Solver defaults
    default_rank: int = 5
    default_alpha: float = 0.7
    default_rho_a: float = 0.01
    default_rho: float = 0.01
    max_outer_iters: int = 500
    init_iters: int = 200
    tol_rel_obj: float = 1e-8
    tol_station: float = 1e-6
    fp_iters: int = 50
    fp_tol: float = 1e-8

    # Eigenvalue estimation
    eig_tol: float = 1e-6
    eig_max_iter: int = 5000
    dense_eig_cutoff: int = 32  # matrices up to this size use a dense eigensolver

    # Paths
    output_dir: Path = Path("./runs")
    data_root: Path = Path(".")  # job inputs must lie under it

    # Logging
    log_level: str = "INFO"
    log_format: Literal["json", "console"] = "console"


# Global settings instance
settings = Settings()
