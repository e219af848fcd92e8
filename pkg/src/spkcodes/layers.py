"""Layer and adapter kernels with their backward passes.

Every forward accepts a single input vector of shape ``(d,)`` or a batch of
row vectors ``(B, d)`` and returns an output of the matching rank together
with a :class:`LayerCache`. Speaker codes may likewise be a single vector
(shared by all rows) or one row per input; code gradients come back in the
same shape as the code that was passed in.

Diagonal scalings are always carried as vectors and applied elementwise.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .numeric import ShapeError, as_matrix, as_vector, sigmoid

__all__ = [
    "Activation",
    "DenseLayer",
    "FmllrTransform",
    "ScalingAdapter",
    "BiasAdapter",
    "BottleneckLayer",
    "SpeakerCode",
    "LayerCache",
    "fmllr_apply",
    "dense_forward",
    "lhuc_forward",
    "fold_lhuc",
    "scaling_from_code",
    "bias_from_code",
    "factored_forward",
    "bottleneck_forward",
    "layer_backward",
]


class Activation(str, Enum):
    SIGMOID = "sigmoid"
    LINEAR = "linear"

    def __call__(self, z: np.ndarray) -> np.ndarray:
        return sigmoid(z) if self is Activation.SIGMOID else z

    def grad(self, act: np.ndarray) -> np.ndarray:
        """Derivative expressed through the activation output."""
        if self is Activation.SIGMOID:
            return act * (1.0 - act)
        return np.ones_like(act)


@dataclass
class DenseLayer:
    W: np.ndarray
    c: np.ndarray
    activation: Activation = Activation.SIGMOID

    def __post_init__(self):
        self.W = as_matrix(self.W, "W")
        self.c = as_vector(self.c, "c")
        self.activation = Activation(self.activation)
        if self.W.shape[0] != self.c.shape[0]:
            raise ShapeError(f"W {self.W.shape} and c ({self.c.shape[0]},) disagree on output size")


@dataclass
class FmllrTransform:
    A: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.A = as_matrix(self.A, "A")
        self.b = as_vector(self.b, "b")
        if self.A.shape[0] != self.A.shape[1] or self.A.shape[0] != self.b.shape[0]:
            raise ShapeError(f"fMLLR needs square A matching b, got A {self.A.shape}, b ({self.b.shape[0]},)")


@dataclass
class ScalingAdapter:
    """Projection from a scaling code (length p) to an m-long diagonal."""

    W_A: np.ndarray

    def __post_init__(self):
        self.W_A = as_matrix(self.W_A, "W_A")


@dataclass
class BiasAdapter:
    """Projection from a bias code (length q) to an m-long bias."""

    W_b: np.ndarray

    def __post_init__(self):
        self.W_b = as_matrix(self.W_b, "W_b")


@dataclass
class BottleneckLayer:
    """Speaker-scaled weight U diag(a) V plus a residual connection."""

    U: np.ndarray
    V: np.ndarray
    c: np.ndarray
    activation: Activation = Activation.SIGMOID

    def __post_init__(self):
        self.U = as_matrix(self.U, "U")
        self.V = as_matrix(self.V, "V")
        self.c = as_vector(self.c, "c")
        self.activation = Activation(self.activation)
        m, n = self.U.shape
        if self.V.shape[0] != n:
            raise ShapeError(f"U {self.U.shape} and V {self.V.shape} disagree on bottleneck width")
        if self.c.shape[0] != m:
            raise ShapeError(f"c ({self.c.shape[0]},) does not match U rows {m}")
        if self.V.shape[1] != m:
            raise ShapeError(f"residual needs input width == output width, got {self.V.shape[1]} != {m}")

    @property
    def n(self) -> int:
        return self.U.shape[1]


@dataclass
class SpeakerCode:
    """Everything one speaker owns.

    ``s_A``/``s_b`` are the scaling and bias codes. ``lhuc`` maps a layer index
    to its LHUC amplitude vector and ``layers`` maps parameter names to
    speaker-specific copies (fine-tuned layers).
    """

    s_A: np.ndarray | None = None
    s_b: np.ndarray | None = None
    lhuc: dict[int, np.ndarray] = field(default_factory=dict)
    layers: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "SpeakerCode":
        return SpeakerCode(
            None if self.s_A is None else self.s_A.copy(),
            None if self.s_b is None else self.s_b.copy(),
            {k: v.copy() for k, v in self.lhuc.items()},
            {k: v.copy() for k, v in self.layers.items()},
        )


@dataclass
class LayerCache:
    kind: str
    layer: object
    h: np.ndarray
    act: np.ndarray
    out: np.ndarray
    lin: np.ndarray | None = None
    scale: np.ndarray | None = None
    s_A: np.ndarray | None = None
    s_b: np.ndarray | None = None
    a: np.ndarray | None = None
    scaling: ScalingAdapter | None = None
    bias: BiasAdapter | None = None
    squeeze: bool = False


def _batch(h, width: int, what: str) -> tuple[np.ndarray, bool]:
    h = np.asarray(h, dtype=np.float64)
    if h.ndim == 1:
        h = h[None, :]
        squeeze = True
    elif h.ndim == 2:
        squeeze = False
    else:
        raise ShapeError(f"{what} must be 1-D or 2-D, got shape {h.shape}")
    if h.shape[1] != width:
        raise ShapeError(f"{what} has width {h.shape[1]}, expected {width}")
    return h, squeeze


def _check_code(code, width: int, what: str) -> np.ndarray:
    code = np.asarray(code, dtype=np.float64)
    if code.ndim not in (1, 2) or code.shape[-1] != width:
        raise ShapeError(f"{what} of shape {code.shape} does not match adapter width {width}")
    return code


def fmllr_apply(t: FmllrTransform, x) -> np.ndarray:
    x, squeeze = _batch(x, t.A.shape[1], "x")
    out = x @ t.A.T + t.b
    return out[0] if squeeze else out


def dense_forward(l: DenseLayer, h) -> tuple[np.ndarray, LayerCache]:
    h, squeeze = _batch(h, l.W.shape[1], "h")
    pre = h @ l.W.T + l.c
    act = l.activation(pre)
    cache = LayerCache("dense", l, h, act, act, squeeze=squeeze)
    return (act[0] if squeeze else act), cache


def lhuc_forward(l: DenseLayer, a, h) -> tuple[np.ndarray, LayerCache]:
    a = _check_code(a, l.W.shape[0], "LHUC amplitudes")
    h, squeeze = _batch(h, l.W.shape[1], "h")
    act = l.activation(h @ l.W.T + l.c)
    out = a * act
    cache = LayerCache("lhuc", l, h, act, out, a=a, squeeze=squeeze)
    return (out[0] if squeeze else out), cache


def fold_lhuc(W_next, a) -> np.ndarray:
    """Absorb LHUC amplitudes of one layer into the next layer's weights."""
    W_next = as_matrix(W_next, "W_next")
    a = as_vector(a, "a")
    if a.shape[0] != W_next.shape[1]:
        raise ShapeError(f"cannot fold amplitudes ({a.shape[0]},) into weights {W_next.shape}")
    return W_next * a[None, :]


def scaling_from_code(ad: ScalingAdapter, s_A) -> np.ndarray:
    s_A = _check_code(s_A, ad.W_A.shape[1], "scaling code")
    return s_A @ ad.W_A.T


def bias_from_code(ad: BiasAdapter, s_b) -> np.ndarray:
    s_b = _check_code(s_b, ad.W_b.shape[1], "bias code")
    return s_b @ ad.W_b.T


def _code_terms(sa, ba, code: SpeakerCode, width: int):
    scale = bias = None
    if sa is not None:
        if code.s_A is None:
            raise ValueError("scaling adapter present but speaker code has no s_A")
        if sa.W_A.shape[0] != width:
            raise ShapeError(f"W_A {sa.W_A.shape} does not produce {width} scalings")
        scale = scaling_from_code(sa, code.s_A)
    if ba is not None:
        if code.s_b is None:
            raise ValueError("bias adapter present but speaker code has no s_b")
        if ba.W_b.shape[0] != width:
            raise ShapeError(f"W_b {ba.W_b.shape} does not produce {width} biases")
        bias = bias_from_code(ba, code.s_b)
    return scale, bias


def factored_forward(
    l: DenseLayer,
    sa: ScalingAdapter | None,
    ba: BiasAdapter | None,
    code: SpeakerCode,
    h,
) -> tuple[np.ndarray, LayerCache]:
    """f(diag(W_A s_A) W h + c + W_b s_b); a missing adapter is neutral."""
    h, squeeze = _batch(h, l.W.shape[1], "h")
    scale, bias = _code_terms(sa, ba, code, l.W.shape[0])
    lin = h @ l.W.T
    pre = lin if scale is None else scale * lin
    pre = pre + l.c
    if bias is not None:
        pre = pre + bias
    act = l.activation(pre)
    cache = LayerCache(
        "factored", l, h, act, act, lin=lin, scale=scale,
        s_A=None if sa is None else np.asarray(code.s_A, dtype=np.float64),
        s_b=None if ba is None else np.asarray(code.s_b, dtype=np.float64),
        scaling=sa, bias=ba, squeeze=squeeze,
    )
    return (act[0] if squeeze else act), cache


def bottleneck_forward(
    bl: BottleneckLayer,
    sa: ScalingAdapter,
    ba: BiasAdapter | None,
    code: SpeakerCode,
    h,
) -> tuple[np.ndarray, LayerCache]:
    """f(U diag(W_A s_A) V h + c + W_b s_b + h)."""
    h, squeeze = _batch(h, bl.V.shape[1], "h")
    if sa is None:
        raise ValueError("bottleneck layer requires a scaling adapter")
    if sa.W_A.shape[0] != bl.n:
        raise ShapeError(f"W_A {sa.W_A.shape} does not match bottleneck width {bl.n}")
    scale = scaling_from_code(sa, _need(code.s_A, "s_A"))
    bias = None
    if ba is not None:
        if ba.W_b.shape[0] != bl.U.shape[0]:
            raise ShapeError(f"W_b {ba.W_b.shape} does not produce {bl.U.shape[0]} biases")
        bias = bias_from_code(ba, _need(code.s_b, "s_b"))
    lin = h @ bl.V.T
    pre = (scale * lin) @ bl.U.T + bl.c + h
    if bias is not None:
        pre = pre + bias
    act = bl.activation(pre)
    cache = LayerCache(
        "bottleneck", bl, h, act, act, lin=lin, scale=scale,
        s_A=np.asarray(code.s_A, dtype=np.float64),
        s_b=None if ba is None else np.asarray(code.s_b, dtype=np.float64),
        scaling=sa, bias=ba, squeeze=squeeze,
    )
    return (act[0] if squeeze else act), cache


def _need(v, name):
    if v is None:
        raise ValueError(f"speaker code is missing {name}")
    return v


def _code_grad(g_rows: np.ndarray, code: np.ndarray) -> np.ndarray:
    # a code shared by all rows collects the summed gradient
    return g_rows.sum(axis=0) if code.ndim == 1 else g_rows


def layer_backward(layer, cache: LayerCache, upstream) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss given dLoss/dOutput for one forward call.

    Keys present depend on the layer kind: ``W``, ``c``, ``U``, ``V``,
    ``W_A``, ``W_b``, ``s_A``, ``s_b``, ``a`` and always ``h``.
    """
    if cache.layer is not layer:
        raise ValueError("cache was produced by a different layer")
    g = np.asarray(upstream, dtype=np.float64)
    if g.ndim == 1:
        g = g[None, :]
    if g.shape != cache.out.shape:
        raise ShapeError(f"upstream {g.shape} does not match layer output {cache.out.shape}")

    grads: dict[str, np.ndarray] = {}
    if cache.kind == "lhuc":
        grads["a"] = _code_grad(g * cache.act, cache.a)
        g = g * cache.a
    dz = g * layer.activation.grad(cache.act)
    h = cache.h

    if cache.kind in ("dense", "lhuc"):
        grads["W"] = dz.T @ h
        grads["c"] = dz.sum(axis=0)
        grads["h"] = dz @ layer.W
    elif cache.kind == "factored":
        dlin = dz if cache.scale is None else dz * cache.scale
        grads["W"] = dlin.T @ h
        grads["c"] = dz.sum(axis=0)
        grads["h"] = dlin @ layer.W
        if cache.scaling is not None:
            dscale = dz * cache.lin
            grads["W_A"] = _scatter_code(dscale, cache.s_A)
            grads["s_A"] = _code_grad(dscale @ cache.scaling.W_A, cache.s_A)
    elif cache.kind == "bottleneck":
        core = cache.scale * cache.lin
        grads["U"] = dz.T @ core
        grads["c"] = dz.sum(axis=0)
        dcore = dz @ layer.U
        dlin = dcore * cache.scale
        grads["V"] = dlin.T @ h
        grads["h"] = dlin @ layer.V + dz
        dscale = dcore * cache.lin
        grads["W_A"] = _scatter_code(dscale, cache.s_A)
        grads["s_A"] = _code_grad(dscale @ cache.scaling.W_A, cache.s_A)
    else:
        raise ValueError(f"unknown cache kind {cache.kind!r}")

    if cache.kind in ("factored", "bottleneck") and cache.bias is not None:
        grads["W_b"] = _scatter_code(dz, cache.s_b)
        grads["s_b"] = _code_grad(dz @ cache.bias.W_b, cache.s_b)

    if cache.squeeze:
        grads["h"] = grads["h"][0]
        for k in ("a", "s_A", "s_b"):
            if k in grads and grads[k].ndim == 2:
                grads[k] = grads[k][0]
    return grads


def _scatter_code(d_out: np.ndarray, code: np.ndarray) -> np.ndarray:
    """Gradient of a projection matrix given per-row output gradients."""
    if code.ndim == 1:
        return np.outer(d_out.sum(axis=0), code)
    return d_out.T @ code
