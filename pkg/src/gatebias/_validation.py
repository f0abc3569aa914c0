"""Turn pydantic validation failures into `ConfigError` with dotted field paths."""

from __future__ import annotations

from typing import Any, TypeVar

from pydantic import BaseModel, ValidationError

from .errors import ConfigError

M = TypeVar("M", bound=BaseModel)


def describe(exc: ValidationError, prefix: str = "") -> str:
    parts = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"])
        path = ".".join(p for p in (prefix, loc) if p) or "<root>"
        msg = err["msg"]
        if msg.startswith("Value error, "):
            msg = msg[len("Value error, "):]
        parts.append(f"{path}: {msg}")
    return "; ".join(parts)


def coerce(model: type[M], obj: Any, prefix: str = "") -> M:
    """Return ``obj`` as a validated ``model`` instance.

    Accepts an instance (returned unchanged) or a mapping; anything invalid
    raises `ConfigError` naming the offending field.
    """
    if isinstance(obj, model):
        return obj
    if obj is None:
        obj = {}
    try:
        return model.model_validate(obj)
    except ValidationError as exc:
        raise ConfigError(describe(exc, prefix)) from None
