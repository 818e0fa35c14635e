"""Input checks shared by the estimator front end."""

from __future__ import annotations

from collections.abc import Iterable

import numpy as np


def check_texts(X, *, name: str = "X", allow_empty_strings: bool = False) -> list[str]:
    """Coerce ``X`` to a non-empty list of ``str``.

    Accepts lists, tuples, 1-D numpy arrays and pandas Series; a bare string is
    rejected because iterating it would silently yield characters.
    """
    if isinstance(X, (str, bytes)):
        raise TypeError(f"{name} must be a sequence of strings, not a single string")
    if isinstance(X, np.ndarray):
        if X.ndim != 1:
            raise ValueError(f"{name} must be 1-D, got shape {X.shape}")
        X = X.tolist()
    elif hasattr(X, "tolist") and not isinstance(X, list):
        X = X.tolist()
    if not isinstance(X, Iterable):
        raise TypeError(f"{name} must be an iterable of strings, got {type(X).__name__}")
    out = list(X)
    if not out:
        raise ValueError(f"{name} is empty")
    for i, x in enumerate(out):
        if not isinstance(x, str):
            raise TypeError(f"{name}[{i}] is {type(x).__name__}, expected str")
        if not allow_empty_strings and not x:
            raise ValueError(f"{name}[{i}] is an empty string")
    return out


def check_pairs(X, y) -> tuple[list[str], list[str]]:
    X = check_texts(X)
    y = check_texts(y, name="y", allow_empty_strings=True)
    if len(X) != len(y):
        raise ValueError(f"X and y have different lengths ({len(X)} vs {len(y)})")
    return X, y


def check_positive_int(value, name: str) -> int:
    if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value < 1:
        raise ValueError(f"{name} must be a positive integer, got {value!r}")
    return int(value)
