"""Versioned prompt and rubric text shipped with the package."""

from importlib import resources


def load_asset(name: str) -> str:
    return resources.files(__name__).joinpath(name).read_text(encoding="utf-8")
