"""Framework-free dense numerics for the tiny detector.

Tensors are float64 numpy arrays. Convolutions accept a single ``[C, H, W]``
tensor or a batch ``[N, C, H, W]`` and return the matching rank.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import kernels

CHECKPOINT_MAGIC = "ITERDET-CKPT-1"


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


@dataclass
class ConvLayer:
    weights: np.ndarray  # [out_ch, in_ch, k, k]
    bias: np.ndarray  # [out_ch]
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.weights.ndim != 4 or self.weights.shape[2] != self.weights.shape[3]:
            raise ShapeError(f"weights must be [out, in, k, k], got {self.weights.shape}")
        if self.weights.shape[2] % 2 == 0:
            raise ShapeError(f"kernel size must be odd, got {self.weights.shape[2]}")
        if self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(
                f"bias shape {self.bias.shape} does not match out_ch {self.weights.shape[0]}"
            )
        if self.stride < 1 or self.padding < 0:
            raise ShapeError(f"bad stride/padding {self.stride}/{self.padding}")

    @property
    def out_ch(self) -> int:
        return self.weights.shape[0]

    @property
    def in_ch(self) -> int:
        return self.weights.shape[1]

    @property
    def k(self) -> int:
        return self.weights.shape[2]

    def out_size(self, h: int, w: int) -> tuple[int, int]:
        return (
            (h + 2 * self.padding - self.k) // self.stride + 1,
            (w + 2 * self.padding - self.k) // self.stride + 1,
        )


def init_conv(rng: np.random.Generator, in_ch, out_ch, k, stride=1, padding=None) -> ConvLayer:
    """Glorot-uniform weights, zero bias. ``padding`` defaults to ``k // 2``."""
    fan_in = in_ch * k * k
    fan_out = out_ch * k * k
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    w = rng.uniform(-limit, limit, size=(out_ch, in_ch, k, k))
    return ConvLayer(w, np.zeros(out_ch), stride, k // 2 if padding is None else padding)


def _as_batch(x):
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"expected [C,H,W] or [N,C,H,W], got shape {x.shape}")


def _pad(x, p):
    if p == 0:
        return np.ascontiguousarray(x, dtype=np.float64)
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def conv2d_forward(x: np.ndarray, layer: ConvLayer, return_cols: bool = False):
    """Cross-correlation with zero padding.

    With ``return_cols`` the unfolded input is returned as well so a
    subsequent :func:`conv2d_backward` can skip recomputing it.
    """
    xb, single = _as_batch(x)
    n, c, h, w = xb.shape
    if c != layer.in_ch:
        raise ShapeError(f"input has {c} channels, layer expects in_ch={layer.in_ch}")
    oh, ow = layer.out_size(h, w)
    if oh < 1 or ow < 1:
        raise ShapeError(
            f"input {h}x{w} too small for kernel {layer.k} with padding {layer.padding}"
        )
    cols = kernels.im2col(_pad(xb, layer.padding), layer.k, layer.stride, oh, ow)
    wmat = layer.weights.reshape(layer.out_ch, -1)
    out = np.matmul(wmat, cols) + layer.bias[None, :, None]
    out = out.reshape(n, layer.out_ch, oh, ow)
    if single:
        out = out[0]
    return (out, cols) if return_cols else out


def conv2d_backward(x: np.ndarray, layer: ConvLayer, upstream: np.ndarray, cols=None,
                    need_input_grad: bool = True):
    """Gradients ``(grad_input, grad_weights, grad_bias)`` of the forward map."""
    xb, single = _as_batch(x)
    gb, _ = _as_batch(upstream)
    n, c, h, w = xb.shape
    oh, ow = layer.out_size(h, w)
    if gb.shape != (n, layer.out_ch, oh, ow):
        raise ShapeError(
            f"upstream gradient shape {upstream.shape} does not match forward output "
            f"{(layer.out_ch, oh, ow) if single else (n, layer.out_ch, oh, ow)}"
        )
    if cols is None:
        cols = kernels.im2col(_pad(xb, layer.padding), layer.k, layer.stride, oh, ow)
    g = gb.reshape(n, layer.out_ch, oh * ow)
    kk = cols.shape[1]
    g2 = g.transpose(1, 0, 2).reshape(layer.out_ch, n * oh * ow)
    c2 = cols.transpose(1, 0, 2).reshape(kk, n * oh * ow)
    grad_w = (g2 @ c2.T).reshape(layer.weights.shape)
    grad_b = g.sum(axis=(0, 2))
    grad_x = None
    if need_input_grad:
        wmat = layer.weights.reshape(layer.out_ch, -1)
        dcols = np.ascontiguousarray(np.matmul(wmat.T, g))
        p = layer.padding
        dpad = kernels.col2im(dcols, c, h + 2 * p, w + 2 * p, layer.k, layer.stride, oh, ow)
        grad_x = dpad[:, :, p:p + h, p:p + w] if p else dpad
        if single:
            grad_x = grad_x[0]
    return grad_x, grad_w, grad_b


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    return np.where(x > 0, upstream, 0.0)


@dataclass
class OptimizerState:
    """Adam moments keyed by parameter name."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: OptimizerState) -> None:
    """One bias-corrected Adam update, applied in place to ``params`` and ``state``."""
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ShapeError(f"{name}: grad shape {g.shape} != param shape {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for name, g in grads.items():
        if name not in state.m:
            state.m[name] = np.zeros_like(params[name])
            state.v[name] = np.zeros_like(params[name])
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        params[name] -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def numerical_grad(f: Callable[[dict], float], point: dict, step: float = 1e-5,
                   coords: dict | None = None) -> dict:
    """Central differences of ``f`` at ``point`` (perturbed in place, then restored).

    ``coords`` optionally restricts each tensor to a subset of flat indices;
    unevaluated entries are NaN.
    """
    out = {}
    for name, arr in point.items():
        flat = arr.reshape(-1)
        g = np.full(flat.shape, np.nan) if coords is not None else np.empty(flat.shape)
        idx = range(flat.size) if coords is None else coords.get(name, ())
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            fp = f(point)
            flat[i] = orig - step
            fm = f(point)
            flat[i] = orig
            g[i] = (fp - fm) / (2.0 * step)
        out[name] = g.reshape(arr.shape)
    return out


def grad_check(f: Callable[[dict], tuple[float, dict]], point: dict, step: float = 1e-5,
               coords: dict | None = None, floor: float = 1e-5) -> float:
    """Worst relative error between the analytic and central-difference gradients.

    ``f`` returns ``(value, analytic_grads)``. Relative error per coordinate is
    ``|a - n| / max(|a| + |n|, floor)``, so coordinates whose true gradient is
    numerically zero are compared in absolute terms against ``floor``.
    """
    _, analytic = f(point)
    analytic = {k: np.array(v, dtype=np.float64) for k, v in analytic.items()}
    numeric = numerical_grad(lambda p: f(p)[0], point, step, coords)
    worst = 0.0
    for name in point:
        a = analytic.get(name, np.zeros_like(point[name])).reshape(-1)
        n = numeric[name].reshape(-1)
        mask = ~np.isnan(n)
        if not mask.any():
            continue
        err = np.abs(a[mask] - n[mask]) / np.maximum(np.abs(a[mask]) + np.abs(n[mask]), floor)
        worst = max(worst, float(err.max()))
    return worst


def save_checkpoint(path, params: dict, header: dict | None = None,
                    optimizer: OptimizerState | None = None, extra: dict | None = None) -> None:
    """Write parameters (and optionally Adam state) as a versioned JSON document."""

    def pack(tensors):
        return [
            {"name": k, "shape": list(v.shape), "values": v.reshape(-1).tolist()}
            for k, v in tensors.items()
        ]

    doc = {"magic": CHECKPOINT_MAGIC, "header": header or {}, "params": pack(params)}
    if optimizer is not None:
        doc["optimizer"] = {
            "lr": optimizer.lr,
            "beta1": optimizer.beta1,
            "beta2": optimizer.beta2,
            "eps": optimizer.eps,
            "step": optimizer.step,
            "m": pack(optimizer.m),
            "v": pack(optimizer.v),
        }
    if extra:
        doc["extra"] = extra
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path) -> tuple[dict, dict, OptimizerState | None, dict]:
    """Inverse of :func:`save_checkpoint`: ``(params, header, optimizer, extra)``."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ValueError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("magic") != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not an {CHECKPOINT_MAGIC} checkpoint")

    def unpack(entries):
        out = {}
        for e in entries:
            arr = np.asarray(e["values"], dtype=np.float64)
            if arr.size != int(np.prod(e["shape"])):
                raise ValueError(f"{path}: tensor {e['name']} has wrong number of values")
            out[e["name"]] = arr.reshape(e["shape"])
        return out

    opt = None
    if "optimizer" in doc:
        o = doc["optimizer"]
        opt = OptimizerState(o["lr"], o["beta1"], o["beta2"], o["eps"], o["step"],
                             unpack(o["m"]), unpack(o["v"]))
    return unpack(doc["params"]), doc.get("header", {}), opt, doc.get("extra", {})
