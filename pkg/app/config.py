"""
Configuration settings for loewner-lab
"""
from typing import ClassVar, Dict
from pydantic_settings import BaseSettings
from pydantic import AliasChoices, Field


class Settings(BaseSettings):
    # App settings
    DEBUG: bool = Field(default=False)
    LOG_LEVEL: str = Field(default="INFO")
    VERSION: ClassVar[str] = "0.1.0"

    # Output directory (LOEWNER_LAB_OUT is the documented fallback for --out)
    OUTPUT_DIR: str = Field(
        default="output",
        validation_alias=AliasChoices("LOEWNER_LAB_OUT", "OUTPUT_DIR"),
    )

    # Worker pool
    DEFAULT_THREADS: int = Field(default=1)
    MC_CHUNK_PATHS: int = Field(default=512)

    # Flow solver
    FLOW_SCHEME: str = Field(default="rk4")
    FLOW_SUBSTEPS: int = Field(default=8)
    SWALLOW_DELTA_FACTOR: float = Field(default=1e-6)  # delta = factor * sqrt(dt)
    MIN_IMAG_GUARD: float = Field(default=1e-12)
    SLIT_SWITCH_RATIO: float = Field(default=16.0)
    MAX_SUBSTEP_DOUBLINGS: int = Field(default=3)

    # Tolerances and pass policy
    DETERMINISTIC_TOL: float = Field(default=1e-4)
    STOCHASTIC_TOL: float = Field(default=1e-2)
    DETERMINISTIC_SLACK: float = Field(default=1e-3)
    STOCHASTIC_SLACK: float = Field(default=5e-2)
    PASS_FRACTION: float = Field(default=0.95)
    # finest partition mesh over y² above which sampled estimates are noise dominated
    MAX_ANCHOR_RESOLUTION: float = Field(default=0.025)
    MAX_REPRESENTATION_RESOLUTION: float = Field(default=0.008)

    # Partitions
    MIN_PARTITION_STRIDE: int = Field(default=4)
    MIN_TAIL_EXCEEDANCES: int = Field(default=10)

    # Recorded in every artifact
    RNG_ALGORITHM: ClassVar[str] = "PCG64(SeedSequence)"

    # Experiments with a kappa < 2 hypothesis
    KAPPA_GATED_EXPERIMENTS: ClassVar[Dict[str, str]] = {
        "verify-keyest": "keyest",
        "verify-key1": "key1",
        "mc-moment": "moment",
        "momentof-f": "momentofF",
        "tail": "grid tail",
    }

    model_config = {
        "env_file": ".env",
        "case_sensitive": True,
        "extra": "ignore",
    }


settings = Settings()
