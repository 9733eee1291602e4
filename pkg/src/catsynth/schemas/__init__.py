"""JSON schemas for the report files."""

import json
from importlib import resources


def load_schema(name: str) -> dict:
    """``name`` is ``"utility_report"`` or ``"risk_report"``."""
    return json.loads(resources.files(__name__).joinpath(f"{name}.schema.json").read_text())
