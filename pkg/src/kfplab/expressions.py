"""Whitelisted analytic expression grammar for CLI-supplied sources.

Nodes are JSON dicts: {"type": ..., ...}.  Supported types:

    const     {"value": c}
    coord     {"axis": i}                 -- x_i
    time      {}                          -- t
    sum       {"terms": [node, ...]}
    product   {"terms": [node, ...]}
    pow       {"base": node, "exponent": int >= 0}
    sin / cos / exp   {"arg": node}
    gaussian_bump     {"center": [..], "width": w}      -- exp(-|x-c|^2 / w^2)
    time_bump         {"t0": a, "t1": b}  -- smooth bump in t, vanishing outside

Evaluation is vectorized over (P, N) point arrays with matching (P,) times.
"""

from __future__ import annotations

import numpy as np

__all__ = ["evaluate", "validate"]

_TYPES = {"const", "coord", "time", "sum", "product", "pow", "sin", "cos",
          "exp", "gaussian_bump", "time_bump"}


def validate(node: dict, n_axes: int):
    if not isinstance(node, dict) or "type" not in node:
        raise ValueError(f"expression node must be a dict with 'type': {node!r}")
    kind = node["type"]
    if kind not in _TYPES:
        raise ValueError(f"expression type {kind!r} is not in the whitelist")
    if kind == "const":
        float(node["value"])
    elif kind == "coord":
        if not 0 <= int(node["axis"]) < n_axes:
            raise ValueError(f"coord axis {node['axis']} out of range")
    elif kind in ("sum", "product"):
        terms = node["terms"]
        if not terms:
            raise ValueError(f"{kind} needs at least one term")
        for sub in terms:
            validate(sub, n_axes)
    elif kind == "pow":
        if int(node["exponent"]) < 0:
            raise ValueError("pow exponent must be a nonnegative integer")
        validate(node["base"], n_axes)
    elif kind in ("sin", "cos", "exp"):
        validate(node["arg"], n_axes)
    elif kind == "gaussian_bump":
        if len(node["center"]) != n_axes:
            raise ValueError("gaussian_bump center has wrong dimension")
        if float(node["width"]) <= 0:
            raise ValueError("gaussian_bump width must be positive")
    elif kind == "time_bump":
        if not float(node["t0"]) < float(node["t1"]):
            raise ValueError("time_bump needs t0 < t1")


def evaluate(node: dict, X: np.ndarray, T: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    T = np.asarray(T, dtype=float)
    kind = node["type"]
    if kind == "const":
        return np.full(T.shape, float(node["value"]))
    if kind == "coord":
        return X[..., int(node["axis"])]
    if kind == "time":
        return T.copy()
    if kind == "sum":
        out = evaluate(node["terms"][0], X, T)
        for sub in node["terms"][1:]:
            out = out + evaluate(sub, X, T)
        return out
    if kind == "product":
        out = evaluate(node["terms"][0], X, T)
        for sub in node["terms"][1:]:
            out = out * evaluate(sub, X, T)
        return out
    if kind == "pow":
        return evaluate(node["base"], X, T) ** int(node["exponent"])
    if kind == "sin":
        return np.sin(evaluate(node["arg"], X, T))
    if kind == "cos":
        return np.cos(evaluate(node["arg"], X, T))
    if kind == "exp":
        return np.exp(evaluate(node["arg"], X, T))
    if kind == "gaussian_bump":
        c = np.asarray(node["center"], dtype=float)
        w = float(node["width"])
        return np.exp(-np.sum((X - c) ** 2, axis=-1) / w**2)
    if kind == "time_bump":
        return smooth_time_bump(T, float(node["t0"]), float(node["t1"]))
    raise ValueError(f"unknown expression type {kind!r}")


def smooth_time_bump(T: np.ndarray, t0: float, t1: float) -> np.ndarray:
    """C-infinity bump supported exactly on (t0, t1), peak value 1."""
    T = np.asarray(T, dtype=float)
    u = (2.0 * T - (t0 + t1)) / (t1 - t0)
    out = np.zeros(T.shape)
    inside = np.abs(u) < 1.0
    ui = u[inside]
    out[inside] = np.exp(1.0 - 1.0 / (1.0 - ui**2))
    return out


def smooth_time_bump_dt(T: np.ndarray, t0: float, t1: float) -> np.ndarray:
    """Time derivative of smooth_time_bump."""
    T = np.asarray(T, dtype=float)
    u = (2.0 * T - (t0 + t1)) / (t1 - t0)
    out = np.zeros(T.shape)
    inside = np.abs(u) < 1.0
    ui = u[inside]
    phi = np.exp(1.0 - 1.0 / (1.0 - ui**2))
    out[inside] = phi * (-2.0 * ui / (1.0 - ui**2) ** 2) * (2.0 / (t1 - t0))
    return out
