"""Small double-precision numerical core.

Parameters are plain ``dict[str, np.ndarray]`` mappings. Every kernel works on
row batches (``x`` has shape ``(batch, features)``) and returns a cache that the
matching backward function consumes. 1-D inputs are accepted and treated as a
batch of one.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

Params = dict[str, np.ndarray]

FORMAT_VERSION = 1

# how the GRU candidate state is driven
CANDIDATE_PRINTED = "printed"  # tanh(W_h h_prev + U_h (r * h_prev) + b_h)
CANDIDATE_INPUT = "input"  # tanh(W_h x + U_h (r * h_prev) + b_h), the usual GRU
CANDIDATE_MODES = (CANDIDATE_PRINTED, CANDIDATE_INPUT)


class ShapeError(ValueError):
    pass


def _as_batch(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    return a[None, :] if a.ndim == 1 else a


def sigmoid(x):
    # tanh form is overflow free and exact enough for gradient checks
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def tanh(x):
    return np.tanh(np.asarray(x, dtype=np.float64))


def relu(x):
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def relu_backward(pre: np.ndarray, dout: np.ndarray) -> np.ndarray:
    return np.where(pre > 0.0, dout, 0.0)


def dense_forward(W: np.ndarray, b: np.ndarray, x: np.ndarray):
    x = _as_batch(x)
    if x.shape[1] != W.shape[1] or b.shape != (W.shape[0],):
        raise ShapeError(f"dense: W{W.shape} b{b.shape} x{x.shape}")
    return x @ W.T + b, x


def dense_backward(W: np.ndarray, x: np.ndarray, dout: np.ndarray):
    """Returns ``(dW, db, dx)`` for ``out = x W^T + b``."""
    dout = _as_batch(dout)
    return dout.T @ x, dout.sum(axis=0), dout @ W


def gru_shapes(n_in: int, n_h: int, candidate_input: str = CANDIDATE_PRINTED) -> dict[str, tuple]:
    if candidate_input not in CANDIDATE_MODES:
        raise ValueError(f"unknown candidate_input {candidate_input!r}")
    w_h_cols = n_h if candidate_input == CANDIDATE_PRINTED else n_in
    return {
        "W_z": (n_h, n_in), "U_z": (n_h, n_h), "b_z": (n_h,),
        "W_r": (n_h, n_in), "U_r": (n_h, n_h), "b_r": (n_h,),
        "W_h": (n_h, w_h_cols), "U_h": (n_h, n_h), "b_h": (n_h,),
    }


def candidate_mode_of(params: Mapping[str, np.ndarray]) -> str:
    n_h, n_in = params["W_z"].shape
    cols = params["W_h"].shape[1]
    if n_in == n_h:
        raise ShapeError("n_in == n_h: candidate mode must be given explicitly")
    return CANDIDATE_PRINTED if cols == n_h else CANDIDATE_INPUT


def gru_forward(params: Mapping[str, np.ndarray], h_prev, x, candidate_input: str | None = None):
    """One GRU step.

    z = sigmoid(W_z x + U_z h + b_z), r = sigmoid(W_r x + U_r h + b_r),
    h' = z * h + (1 - z) * tanh(W_h s + U_h (r * h) + b_h)
    where ``s`` is ``h`` in printed mode and ``x`` in input mode.
    """
    h_prev = _as_batch(h_prev)
    x = _as_batch(x)
    if candidate_input is None:
        candidate_input = candidate_mode_of(params)
    n_h, n_in = params["W_z"].shape
    if h_prev.shape[1] != n_h or x.shape[1] != n_in or h_prev.shape[0] != x.shape[0]:
        raise ShapeError(f"gru: h{h_prev.shape} x{x.shape} for n_in={n_in}, n_h={n_h}")
    src = h_prev if candidate_input == CANDIDATE_PRINTED else x
    if params["W_h"].shape[1] != src.shape[1]:
        raise ShapeError(f"gru: W_h{params['W_h'].shape} incompatible with mode {candidate_input}")

    z = sigmoid(x @ params["W_z"].T + (h_prev @ params["U_z"].T + params["b_z"]))
    r = sigmoid(x @ params["W_r"].T + (h_prev @ params["U_r"].T + params["b_r"]))
    rh = r * h_prev
    c = np.tanh(src @ params["W_h"].T + rh @ params["U_h"].T + params["b_h"])
    h = z * h_prev + (1.0 - z) * c
    cache = (candidate_input, h_prev, x, z, r, rh, c)
    return h, cache


def gru_forward_pairs(params: Mapping[str, np.ndarray], states, inputs, state_idx, input_idx,
                      candidate_input: str) -> np.ndarray:
    """Forward-only GRU over many (state, input) pairs.

    Row ``i`` of the result is ``GRU(states[state_idx[i]], inputs[input_idx[i]])``.
    Input and state projections are computed once per distinct row, which is what
    makes scoring every candidate document from every state affordable.
    """
    states = _as_batch(states)
    inputs = _as_batch(inputs)
    hz = states @ params["U_z"].T + params["b_z"]
    hr = states @ params["U_r"].T + params["b_r"]
    xz = inputs @ params["W_z"].T
    xr = inputs @ params["W_r"].T
    h = states[state_idx]
    z = sigmoid(xz[input_idx] + hz[state_idx])
    r = sigmoid(xr[input_idx] + hr[state_idx])
    if candidate_input == CANDIDATE_PRINTED:
        base = (states @ params["W_h"].T)[state_idx]
    else:
        base = (inputs @ params["W_h"].T)[input_idx]
    c = np.tanh(base + (r * h) @ params["U_h"].T + params["b_h"])
    return z * h + (1.0 - z) * c


def gru_backward(params: Mapping[str, np.ndarray], cache, dh):
    """Returns ``(grads, dh_prev, dx)``; ``grads`` is keyed like ``params``."""
    mode, h_prev, x, z, r, rh, c = cache
    dh = _as_batch(dh)
    if dh.shape != h_prev.shape:
        raise ShapeError(f"gru backward: dh{dh.shape} vs cache{h_prev.shape}")
    src = h_prev if mode == CANDIDATE_PRINTED else x

    dz = dh * (h_prev - c)
    da_h = dh * (1.0 - z) * (1.0 - c * c)
    dh_prev = dh * z
    drh = da_h @ params["U_h"]
    dr = drh * h_prev
    dh_prev += drh * r
    dsrc = da_h @ params["W_h"]
    da_z = dz * z * (1.0 - z)
    da_r = dr * r * (1.0 - r)

    grads = {
        "W_z": da_z.T @ x, "U_z": da_z.T @ h_prev, "b_z": da_z.sum(axis=0),
        "W_r": da_r.T @ x, "U_r": da_r.T @ h_prev, "b_r": da_r.sum(axis=0),
        "W_h": da_h.T @ src, "U_h": da_h.T @ rh, "b_h": da_h.sum(axis=0),
    }
    dx = da_z @ params["W_z"] + da_r @ params["W_r"]
    dh_prev += da_z @ params["U_z"] + da_r @ params["U_r"]
    if mode == CANDIDATE_PRINTED:
        dh_prev += dsrc
    else:
        dx += dsrc
    return grads, dh_prev, dx


def init_weights(shape: tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    """Glorot-uniform for matrices; vectors and scalars start at zero."""
    if len(shape) < 2:
        return np.zeros(shape)
    fan_out, fan_in = shape[0], int(np.prod(shape[1:]))
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Adam:
    """Adam with bias correction. ``step`` updates ``params`` in place."""

    def __init__(self, learning_rate: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: Params = {}
        self.v: Params = {}
        self.t = 0

    def step(self, params: Params, grads: Mapping[str, np.ndarray]) -> None:
        for name, g in grads.items():
            if name not in params or params[name].shape != np.shape(g):
                raise ShapeError(f"adam: gradient {name} does not match a parameter")
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"adam: non-finite gradient for {name}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        corr1 = 1.0 - b1**self.t
        corr2 = 1.0 - b2**self.t
        for name, g in grads.items():
            m = self.m.setdefault(name, np.zeros_like(params[name]))
            v = self.v.setdefault(name, np.zeros_like(params[name]))
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = self.learning_rate * (m / corr1) / (np.sqrt(v / corr2) + self.eps)
            params[name] -= update


def finite_difference_check(
    f: Callable[[Params], float],
    params: Params,
    grads: Mapping[str, np.ndarray],
    h: float = 1e-5,
    names=None,
) -> float:
    """Max relative error between ``grads`` and central differences of ``f``.

    Relative error per coordinate is ``|a - n| / max(1e-8, |a| + |n|)``.
    ``params`` is perturbed in place and restored.
    """
    worst = 0.0
    for name in names or params:
        p = params[name]
        ga = np.asarray(grads[name])
        for i in np.ndindex(p.shape):
            old = p[i]
            p[i] = old + h
            fp = f(params)
            p[i] = old - h
            fm = f(params)
            p[i] = old
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise FloatingPointError(f"non-finite evaluation at {name}{list(i)}")
            num = (fp - fm) / (2.0 * h)
            err = abs(ga[i] - num) / max(1e-8, abs(ga[i]) + abs(num))
            worst = max(worst, err)
    return worst


def copy_params(params: Mapping[str, np.ndarray]) -> Params:
    return {k: np.array(v, copy=True) for k, v in params.items()}


def params_equal(a: Mapping[str, np.ndarray], b: Mapping[str, np.ndarray]) -> bool:
    return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


def params_digest(params: Mapping[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for k in sorted(params):
        h.update(k.encode())
        h.update(np.ascontiguousarray(params[k]).tobytes())
    return h.hexdigest()


def save_params(path, params: Mapping[str, np.ndarray], meta: dict | None = None) -> None:
    """Write a ``.npz`` checkpoint with a format tag, shapes and JSON metadata."""
    header = {
        "format": "doublerank-params",
        "version": FORMAT_VERSION,
        "shapes": {k: list(v.shape) for k, v in params.items()},
        "meta": meta or {},
    }
    arrays = {f"p:{k}": np.asarray(v, dtype=np.float64) for k, v in params.items()}
    with open(path, "wb") as fh:
        np.savez(fh, __header__=np.array(json.dumps(header, sort_keys=True)), **arrays)


def load_params(path, expected_shapes: Mapping[str, tuple] | None = None) -> tuple[Params, dict]:
    with np.load(Path(path), allow_pickle=False) as data:
        header = json.loads(str(data["__header__"]))
        if header.get("format") != "doublerank-params" or header.get("version") != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint format {header.get('format')} v{header.get('version')}")
        params = {k[2:]: np.array(data[k]) for k in data.files if k.startswith("p:")}
    for k, shape in header["shapes"].items():
        if list(params[k].shape) != shape:
            raise ShapeError(f"{path}: tensor {k} has shape {params[k].shape}, header says {shape}")
    if expected_shapes is not None:
        if set(expected_shapes) != set(params):
            raise ShapeError(f"{path}: tensor names differ from the expected model")
        for k, shape in expected_shapes.items():
            if params[k].shape != tuple(shape):
                raise ShapeError(f"{path}: tensor {k} has shape {params[k].shape}, expected {tuple(shape)}")
    return params, header["meta"]
