"""Run configuration: one JSON document, overridable by command-line flags."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from .agent import DEFAULT_BUDGET, DEFAULT_TOKEN_CEILING
from .errors import ConfigError
from .evalkit import CATEGORIES, DEFAULT_CATEGORY_MAPPING
from .memory import EXTRACTOR_MODES
from .store import DEFAULT_K

BACKENDS = ("remote", "scripted")
EMBEDDERS = ("local", "remote")


@dataclass
class RunConfig:
    dataset_path: str | None = None
    store_dir: str | None = None
    out_dir: str = "runs/latest"
    backend: str = "remote"
    endpoint_url: str = "https://api.openai.com/v1/chat/completions"
    model_name: str = "gpt-4o-mini"
    temperature: float = 0.0
    max_retries: int = 3
    request_timeout_s: float = 60.0
    api_key_env: str = "TAMEM_API_KEY"
    fixture_path: str | None = None
    embedder: str = "local"
    embedding_endpoint_url: str | None = None
    embedding_model: str = "all-MiniLM-L6-v2"
    extractor: str = "llm"
    overlap_msgs: int = 1
    k: int = DEFAULT_K
    budget: int = DEFAULT_BUDGET
    concurrency: int = 4
    token_ceiling: int = DEFAULT_TOKEN_CEILING
    category_mapping: dict[str, str] = field(
        default_factory=lambda: {str(k): v for k, v in DEFAULT_CATEGORY_MAPPING.items()}
    )

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if self.backend not in BACKENDS:
            raise ConfigError(f"backend must be one of {BACKENDS}, got {self.backend!r}")
        if self.embedder not in EMBEDDERS:
            raise ConfigError(f"embedder must be one of {EMBEDDERS}, got {self.embedder!r}")
        if self.extractor not in EXTRACTOR_MODES:
            raise ConfigError(f"extractor must be one of {EXTRACTOR_MODES}, got {self.extractor!r}")
        for name in ("k", "budget", "concurrency", "token_ceiling"):
            if not isinstance(getattr(self, name), int) or getattr(self, name) < 1:
                raise ConfigError(f"{name} must be a positive integer, got {getattr(self, name)!r}")
        if self.overlap_msgs < 0:
            raise ConfigError(f"overlap_msgs must be >= 0, got {self.overlap_msgs}")
        for key, value in self.category_mapping.items():
            if not str(key).lstrip("-").isdigit() or value not in CATEGORIES:
                raise ConfigError(f"bad category mapping entry {key!r}: {value!r}")

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> RunConfig:
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path: str | Path) -> RunConfig:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except ValueError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        return cls.from_dict(data)

    def override(self, **values: Any) -> RunConfig:
        data = self.to_dict()
        data.update({k: v for k, v in values.items() if v is not None})
        return RunConfig.from_dict(data)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def write(self, directory: str | Path) -> Path:
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        path = out / "config.json"
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path
