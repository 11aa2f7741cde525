"""Convert domain values into JSON-compatible primitives for run summaries."""

from dataclasses import fields, is_dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Mapping

import numpy as np
from pydantic import BaseModel


def serialize_saao_domain(value: Any) -> Any:
    if is_dataclass(value) and not isinstance(value, type):
        return {
            field.name: serialize_saao_domain(getattr(value, field.name))
            for field in fields(value)
        }

    if isinstance(value, BaseModel):
        return serialize_saao_domain(value.model_dump())

    if isinstance(value, Enum):
        return value.value

    if isinstance(value, Path):
        return str(value)

    if isinstance(value, np.ndarray):
        return value.tolist()

    if isinstance(value, np.generic):
        return value.item()

    if isinstance(value, Mapping):
        return {
            serialize_saao_domain(key): serialize_saao_domain(item)
            for key, item in value.items()
        }

    if isinstance(value, (list, tuple)):
        return [serialize_saao_domain(item) for item in value]

    return value
