"""Single-file configuration with per-module sections and environment
overrides (GRAMMARCTL_<SECTION>_<KEY>)."""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Any

DEFAULTS: dict[str, dict[str, Any]] = {
    "egp": {"skill_file": None, "fix_template_typo": False},
    "detector": {"bundle_dir": None, "folds": 5, "seed": 0},
    "corpus": {"normalized_path": None},
    "decoding": {
        "alpha": 0.95,
        "eta": 1e-3,
        "top_k": 200,
        "retire_satisfied": True,
        "max_tokens": 128,
    },
    "finetune": {
        "learning_rate": 5e-4,
        "lora_r": 64,
        "lora_alpha": 16.0,
        "lora_dropout": 0.1,
        "eval_every": 200,
        "max_steps": 1000,
    },
    "gateway": {
        "chat_base_url": None,
        "chat_model": None,
        "judge_model": None,
        "api_key_env": "GRAMMARCTL_API_KEY",
        "audit_log": None,
    },
    "service": {"persist_dir": "sessions", "host": "127.0.0.1", "port": 8000},
    "run": {"seed": 0, "output_dir": "runs"},
}

ENV_PREFIX = "GRAMMARCTL"


def _coerce(value: str, template: Any) -> Any:
    if isinstance(template, bool):
        return value.lower() in ("1", "true", "yes", "on")
    if isinstance(template, int) and not isinstance(template, bool):
        return int(value)
    if isinstance(template, float):
        return float(value)
    return value


class Config:
    """Layered config: defaults < file < environment."""

    def __init__(self, sections: dict[str, dict[str, Any]]):
        self.sections = sections

    @classmethod
    def load(cls, path: str | Path | None = None, env: dict | None = None) -> "Config":
        sections = {name: dict(values) for name, values in DEFAULTS.items()}
        if path is not None:
            loaded = json.loads(Path(path).read_text(encoding="utf-8"))
            for name, values in loaded.items():
                sections.setdefault(name, {}).update(values)
        env = env if env is not None else os.environ
        for name, values in sections.items():
            for key in list(values):
                env_key = f"{ENV_PREFIX}_{name.upper()}_{key.upper()}"
                if env_key in env:
                    template = DEFAULTS.get(name, {}).get(key)
                    values[key] = _coerce(env[env_key], template)
        return cls(sections)

    def get(self, section: str, key: str, default: Any = None) -> Any:
        return self.sections.get(section, {}).get(key, default)

    def section(self, name: str) -> dict[str, Any]:
        return dict(self.sections.get(name, {}))

    def dump(self) -> str:
        return json.dumps(self.sections, indent=2, sort_keys=True)
