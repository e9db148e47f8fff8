"""
Resolve the project root and run-relative paths. Relative output directories
in a config are taken relative to the working directory, falling back to the
project root when running from a frozen bundle.
"""

import sys
from pathlib import Path


def project_root() -> Path:
    if getattr(sys, "frozen", False):
        return Path(sys.executable).resolve().parent
    return Path(__file__).resolve().parent


def resolve_output_dir(raw: str | Path) -> Path:
    path = Path(raw)
    if not path.is_absolute():
        base = project_root() if getattr(sys, "frozen", False) else Path.cwd()
        path = base / path
    return path.resolve()


def example_config_path() -> Path:
    return project_root() / "config.example.yaml"
