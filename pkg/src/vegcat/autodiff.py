"""Minimal reverse-mode differentiation kernel.

Provides exactly the layer set the segmentation network needs: 1x1/2x2/3x3
convolutions (valid or zero-padded same), ReLU, 2x2 max pooling, nearest
upsampling, centered crop-and-concat, a numerically stable pixel-wise
softmax, the weighted cross-entropy loss, the sqrt(2/N) Gaussian
initializer, and SGD with momentum and stepwise learning-rate decay.

Tensors wrap single-image (no batch axis) numpy buffers; a graph of
backward closures is recorded while gradients are enabled and replayed in
reverse topological order by ``Tensor.backward``.  Every op validates its
output for NaN/Inf; non-finite values are a hard failure, never silently
propagated.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Operands with incompatible shapes."""


class TilingError(ValueError):
    """Spatial dims violate the even-size rule required for 2x2 pooling."""


class LabelError(ValueError):
    """Label index outside the class range."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording (used for inference and finite differences)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _ensure_finite(values: np.ndarray, op: str):
    if not np.isfinite(values).all():
        raise FloatingPointError(f"{op} produced non-finite values")


class Tensor:
    """N-dimensional value buffer with an optional gradient buffer."""

    __slots__ = ("values", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, values, requires_grad: bool = False, dtype=None):
        self.values = np.asarray(values, dtype=dtype) if dtype else np.asarray(values)
        if self.values.dtype.kind != "f":
            self.values = self.values.astype(np.float32)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn = None

    @property
    def dims(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    def item(self) -> float:
        return float(self.values)

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.values.dtype)
        else:
            self.grad += g

    def backward(self):
        """Backpropagate from a scalar through the recorded graph."""
        if self.values.size != 1:
            raise ShapeError("backward() starts from a scalar tensor")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.values)
        for node in reversed(topo):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)

    def __repr__(self):
        return f"Tensor(dims={self.dims}, dtype={self.values.dtype}, requires_grad={self.requires_grad})"


def _make_node(values: np.ndarray, parents: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    _ensure_finite(values, op)
    out = Tensor(values)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward_fn = backward_fn
    return out


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


# ---------------------------------------------------------------------------
# Layer ops
# ---------------------------------------------------------------------------


def conv2d(x: Tensor, w: Tensor, b: Tensor, padding: str = "valid") -> Tensor:
    """Cross-correlation plus bias over a (C, H, W) tensor.

    ``valid`` shrinks each spatial dim by k-1; ``same`` zero-pads so the
    output matches the input (even kernels pad one extra on the
    right/bottom).
    """
    xv, wv, bv = x.values, w.values, b.values
    if xv.ndim != 3 or wv.ndim != 4 or bv.ndim != 1:
        raise ShapeError("conv2d expects x:(C,H,W), w:(Cout,Cin,k,k), b:(Cout,)")
    cout, cin, k, k2 = wv.shape
    if k != k2 or k not in (1, 2, 3):
        raise ShapeError(f"kernel must be square with k in {{1,2,3}}, got {k}x{k2}")
    if xv.shape[0] != cin:
        raise ShapeError(f"input has {xv.shape[0]} channels, kernel expects {cin}")
    if bv.shape[0] != cout:
        raise ShapeError("bias length must equal output channels")
    if padding == "same":
        pb = (k - 1) // 2
        pa = k - 1 - pb
        xp = np.pad(xv, ((0, 0), (pb, pa), (pb, pa)))
    elif padding == "valid":
        if xv.shape[1] < k or xv.shape[2] < k:
            raise ShapeError(f"input {xv.shape[1]}x{xv.shape[2]} smaller than kernel {k}")
        pb = pa = 0
        xp = xv
    else:
        raise ValueError(f"padding must be 'valid' or 'same', got {padding!r}")
    ho = xp.shape[1] - k + 1
    wo = xp.shape[2] - k + 1

    out = np.zeros((cout, ho, wo), dtype=xv.dtype)
    for di in range(k):
        for dj in range(k):
            out += np.tensordot(wv[:, :, di, dj], xp[:, di : di + ho, dj : dj + wo], axes=(1, 0))
    out += bv[:, None, None]

    def backward_fn(g):
        if b.requires_grad:
            b.accumulate_grad(g.sum(axis=(1, 2)))
        if w.requires_grad:
            dw = np.empty_like(wv)
            for di in range(k):
                for dj in range(k):
                    dw[:, :, di, dj] = np.tensordot(g, xp[:, di : di + ho, dj : dj + wo], axes=([1, 2], [1, 2]))
            w.accumulate_grad(dw)
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            for di in range(k):
                for dj in range(k):
                    dxp[:, di : di + ho, dj : dj + wo] += np.tensordot(wv[:, :, di, dj], g, axes=(0, 0))
            if pb or pa:
                dxp = dxp[:, pb : xp.shape[1] - pa, pb : xp.shape[2] - pa]
            x.accumulate_grad(dxp)

    return _make_node(out, (x, w, b), backward_fn, "conv2d")


def relu(x: Tensor) -> Tensor:
    mask = x.values > 0
    out = np.where(mask, x.values, 0)

    def backward_fn(g):
        if x.requires_grad:
            x.accumulate_grad(g * mask)

    return _make_node(out, (x,), backward_fn, "relu")


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; input spatial dims must be even."""
    c, h, w = x.values.shape
    if h % 2 or w % 2:
        raise TilingError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    windows = x.values.reshape(c, h2, 2, w2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h2, w2, 4)
    idx = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

    def backward_fn(g):
        if x.requires_grad:
            dwin = np.zeros_like(windows)
            np.put_along_axis(dwin, idx[..., None], g[..., None], axis=-1)
            dx = dwin.reshape(c, h2, w2, 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h, w)
            x.accumulate_grad(dx)

    return _make_node(out, (x,), backward_fn, "maxpool2")


def upsample2(x: Tensor) -> Tensor:
    """2x nearest-neighbor upsampling."""
    out = x.values.repeat(2, axis=1).repeat(2, axis=2)

    def backward_fn(g):
        if x.requires_grad:
            c, h2, w2 = x.values.shape
            x.accumulate_grad(g.reshape(c, h2, 2, w2, 2).sum(axis=(2, 4)))

    return _make_node(out, (x,), backward_fn, "upsample2")


def upconv2(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Up-convolution: 2x nearest upsample followed by a 2x2 same-conv
    (conventionally halving the channel count)."""
    return conv2d(upsample2(x), w, b, padding="same")


def crop_concat(skip: Tensor, up: Tensor) -> Tensor:
    """Center-crop `skip` to `up`'s spatial dims and concatenate channels."""
    cs, hs, ws = skip.values.shape
    cu, hu, wu = up.values.shape
    if hs < hu or ws < wu:
        raise ShapeError(f"skip {hs}x{ws} smaller than up {hu}x{wu}")
    if (hs - hu) % 2 or (ws - wu) % 2:
        raise ShapeError(f"centered crop needs matching parity, got skip {hs}x{ws} vs up {hu}x{wu}")
    oy = (hs - hu) // 2
    ox = (ws - wu) // 2
    out = np.concatenate([skip.values[:, oy : oy + hu, ox : ox + wu], up.values], axis=0)

    def backward_fn(g):
        if skip.requires_grad:
            ds = np.zeros_like(skip.values)
            ds[:, oy : oy + hu, ox : ox + wu] = g[:cs]
            skip.accumulate_grad(ds)
        if up.requires_grad:
            up.accumulate_grad(g[cs:])

    return _make_node(out, (skip, up), backward_fn, "crop_concat")


def softmax_px(a: Tensor) -> Tensor:
    """Pixel-wise softmax over the channel axis, max-subtracted for stability."""
    if a.values.ndim != 3 or a.values.shape[0] < 2:
        raise ShapeError("softmax_px expects (K, H, W) with K >= 2")
    shifted = a.values - a.values.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=0, keepdims=True)

    def backward_fn(g):
        if a.requires_grad:
            dot = (g * p).sum(axis=0, keepdims=True)
            a.accumulate_grad(p * (g - dot))

    return _make_node(p, (a,), backward_fn, "softmax_px")


def weighted_ce(p: Tensor, l, w) -> Tensor:
    """Weighted cross-entropy: sum_x w(x) * -log p_{l(x)}(x).

    The summed log-likelihood E = sum w log p is the model fit; the value
    returned is the training loss -E, which is zero for a perfect
    prediction.  `l` and `w` may be LabelMask / WeightMap objects or bare
    (H, W) arrays.
    """
    labels = np.asarray(getattr(l, "labels", l))
    weights = np.asarray(getattr(w, "w", w))
    k, h, wdt = p.values.shape
    if labels.shape != (h, wdt) or weights.shape != (h, wdt):
        raise ShapeError("labels/weights must match the probability map's spatial dims")
    if labels.min() < 0 or labels.max() >= k:
        raise LabelError(f"label outside 0..{k - 1}")
    if weights.min() <= 0:
        raise ValueError("weights must be strictly positive")
    sel = np.take_along_axis(p.values, labels[None], axis=0)[0]
    # Saturated probabilities are clamped: log(max(sel, floor)).  The floor
    # is sqrt(tiny) so weight/floor stays finite, and the backward pass is
    # the exact derivative of the clamped forward (zero below the floor).
    floor = np.sqrt(np.finfo(p.values.dtype).tiny)
    sel_safe = np.maximum(sel, floor)
    loss = -(weights * np.log(sel_safe)).sum()

    def backward_fn(g):
        if p.requires_grad:
            dsel = np.where(sel >= floor, -(weights / sel_safe), 0.0) * g
            dp = np.zeros_like(p.values)
            np.put_along_axis(dp, labels[None], dsel[None], axis=0)
            p.accumulate_grad(dp)

    return _make_node(np.asarray(loss), (p,), backward_fn, "weighted_ce")


# ---------------------------------------------------------------------------
# Initialization and optimization
# ---------------------------------------------------------------------------


def gaussian_init(shape, seed, dtype=np.float32) -> Tensor:
    """Weights ~ N(0, 2/N) with N the fan-in (k*k*C_in for conv kernels).

    `seed` may be an int or an existing numpy Generator (so a model builder
    can draw all layers from one stream).
    """
    shape = tuple(int(s) for s in shape)
    if len(shape) < 2:
        raise ShapeError("gaussian_init needs a fan-in; use zeros for biases")
    fan_in = int(np.prod(shape[1:]))
    std = np.sqrt(2.0 / fan_in)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return Tensor(rng.normal(0.0, std, size=shape).astype(dtype), requires_grad=True)


def zeros_init(shape, dtype=np.float32) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


@dataclass
class SgdState:
    """Momentum-SGD state with stepwise learning-rate decay."""

    lr: float
    momentum: float = 0.99
    decay_every: int = 4000
    decay_factor: float = 0.1
    step_count: int = 0
    velocity: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")


def sgd_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: SgdState):
    """v <- momentum*v - lr*g; p <- p + v; decay lr at every decay_every-th step."""
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.values.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.values.shape} for {name}")
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(p.values)
        v = state.momentum * v - state.lr * g
        state.velocity[name] = v
        p.values += v
    state.step_count += 1
    if state.decay_every and state.step_count % state.decay_every == 0:
        state.lr *= state.decay_factor


# ---------------------------------------------------------------------------
# Finite-difference checking
# ---------------------------------------------------------------------------


def relative_error(a: np.ndarray, f: np.ndarray) -> float:
    """max |a-f| / max(1, |a|, |f|) over all entries."""
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(f)))
    return float((np.abs(a - f) / denom).max())


def gradient_check(loss_fn, tensors: dict[str, Tensor], eps: float = 1e-3) -> dict[str, float]:
    """Compare analytic gradients of loss_fn() against central differences.

    Returns the per-tensor max relative error.  Buffers should be float64;
    the perturbed re-evaluations run with gradients disabled.
    """
    for t in tensors.values():
        t.zero_grad()
    loss = loss_fn()
    loss.backward()
    analytic = {name: t.grad.copy() if t.grad is not None else np.zeros_like(t.values) for name, t in tensors.items()}

    errors = {}
    with no_grad():
        for name, t in tensors.items():
            flat = t.values.reshape(-1)
            fd = np.zeros_like(flat)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                f_plus = loss_fn().item()
                flat[i] = orig - eps
                f_minus = loss_fn().item()
                flat[i] = orig
                fd[i] = (f_plus - f_minus) / (2 * eps)
            errors[name] = relative_error(analytic[name].reshape(-1), fd)
    return errors
