"""Input checks shared by the estimators and the network entry points."""
from __future__ import annotations

import numpy as np
import torch


class ShapeError(ValueError):
    pass


def check_shape(x, expected: tuple, name: str):
    """``expected`` may contain ``None`` for free dimensions."""
    shape = tuple(x.shape)
    if len(shape) != len(expected) or any(e is not None and e != s for s, e in zip(shape, expected)):
        want = tuple("*" if e is None else e for e in expected)
        raise ShapeError(f"{name}: expected shape {want}, got {shape}")
    return x


def check_finite(x, name: str):
    ok = torch.isfinite(x).all() if isinstance(x, torch.Tensor) else np.isfinite(np.asarray(x)).all()
    if not bool(ok):
        raise ValueError(f"{name} contains non-finite values")
    return x


def check_positive(value, name: str):
    if not value > 0:
        raise ValueError(f"{name} must be positive, got {value}")
    return value


def as_tensor(x, dtype=torch.float32) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if x.dtype == dtype else x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype)
