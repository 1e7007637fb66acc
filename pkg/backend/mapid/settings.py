from pydantic import BaseModel, Field
import os
from typing import Optional


def _optional_int(name: str) -> Optional[int]:
    raw = os.getenv(name)
    return int(raw) if raw not in (None, "") else None


class Settings(BaseModel):
    # Overrides base_seed of every experiment and CLI run when set
    seed: Optional[int] = Field(default_factory=lambda: _optional_int("MAPID_SEED"))
    log_level: str = Field(default_factory=lambda: os.getenv("MAPID_LOG_LEVEL", "INFO"))
    output_dir: str = Field(default_factory=lambda: os.getenv("MAPID_OUTPUT_DIR", "runs"))
    workers: int = Field(default_factory=lambda: int(os.getenv("MAPID_WORKERS", "1")), ge=1)
    run_slow: bool = Field(
        default_factory=lambda: os.getenv("MAPID_RUN_SLOW", "false").lower() in ("1", "true", "yes")
    )
