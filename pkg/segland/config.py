import os
import json
import logging
from pathlib import Path
from typing import Optional, Type, TypeVar, Union

from dotenv import load_dotenv
from pydantic import BaseModel, Field, ValidationError

from segland.errors import ConfigError

# Local .env overrides (the shell environment still wins)
load_dotenv()

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

ModelT = TypeVar("ModelT", bound=BaseModel)


class Settings(BaseModel):
    num_workers: int = Field(0, ge=0, description="Cap on data-pipeline worker processes")
    log_level: str = "INFO"
    device: str = "cpu"


def get_settings() -> Settings:
    """Read settings from the environment"""
    return Settings(
        num_workers=int(os.getenv("SEGLAND_NUM_WORKERS", "0")),
        log_level=os.getenv("SEGLAND_LOG_LEVEL", "INFO").upper(),
        device=os.getenv("SEGLAND_DEVICE", "cpu"),
    )


def setup_logging(level: Optional[str] = None) -> None:
    """Configure root logging once for command-line runs"""
    level = level or get_settings().log_level
    logging.basicConfig(level=getattr(logging, level, logging.INFO), format=LOG_FORMAT)


def load_config(path: Union[str, Path, None], model: Type[ModelT], **overrides) -> ModelT:
    """Validate a JSON config document, with non-None overrides, against a pydantic model"""
    data = {}
    if path:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"Cannot read config {path}: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError(f"Config {path} must hold a JSON object")
    data.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return model.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"Invalid {model.__name__} settings in {path or 'arguments'}: {e}") from e
