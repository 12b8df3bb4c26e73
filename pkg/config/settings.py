"""Configuration management using Pydantic settings.

Values come from the environment or a local ``.env`` file; anything an
experiment needs to vary lives in the run config instead (see
``stages.schemas.RunConfig``).
"""

from typing import Literal

from dotenv import load_dotenv
from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict

# Load environment variables from .env file (for local development)
load_dotenv()


class Settings(BaseSettings):
    """Toolkit-wide settings with validation."""

    model_config = SettingsConfigDict(env_file=".env", case_sensitive=True, extra="ignore")

    # Numerics
    LAYER_NORM_EPS: float = Field(default=1e-5, gt=0.0, description="Layer normalization epsilon")
    FD_STEP: float = Field(default=1e-5, gt=0.0, description="Central finite-difference step")

    # Segment attention
    IMAGE_SHARE_THRESHOLD: float = Field(
        default=0.02, ge=0.0, le=1.0, description="Image-share level that flags a layer"
    )

    # Saliency
    CAM_NOISE_SUGGESTION: float = Field(
        default=0.1,
        ge=0.0,
        description="Suggested noise std for smoothed CAM; not applied unless configured",
    )
    CAM_WORKERS: int = Field(default=1, ge=1, description="Threads for independent CAM samples")
    OVERLAY_ALPHA: float = Field(default=0.5, ge=0.0, le=1.0, description="Heatmap blend weight")
    PATCH_PIXELS: int = Field(default=8, ge=1, description="Raster pixels per patch side")

    # Sweeps
    SWEEP_WORKERS: int = Field(default=1, ge=1, description="Threads for independent sweep points")

    # Output
    OUTPUT_DIR: str = Field(default="runs", description="Default output directory for the CLI")

    # Logging
    LOG_LEVEL: str = Field(default="INFO", description="Logging level")
    LOG_FORMAT: Literal["json", "text"] = Field(
        default="text", description="Log format (json for batch runs, text for dev)"
    )
    LOG_DIR: str | None = Field(default=None, description="Directory for log files; unset = console only")


# Global settings instance
settings = Settings()
