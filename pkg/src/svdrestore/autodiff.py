"""A small reverse-mode autodiff engine over numpy, plus the restoration layers.

Every op builds its output :class:`Tensor` and, when any input tracks
gradients, a closure that pushes the output gradient back to the inputs.
:meth:`Tensor.backward` runs the closures in reverse topological order and
accumulates into ``.grad``.  Dtypes follow the inputs: training runs in
float32, gradient checks in float64.
"""

from __future__ import annotations

import contextlib
import logging
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ValueError(f"gradient shape {g.shape} does not match {self.data.shape}")
        g = g.astype(self.data.dtype, copy=False)
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            stack.extend((p, False) for p in node._parents if id(p) not in seen)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not _tracks(parent):
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(_lift(other, self), -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)


def _tracks(t: Tensor) -> bool:
    return t.requires_grad or t._backward is not None


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(_tracks(p) for p in parents):
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a = _lift(a)
    b = _lift(b, a)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a = _lift(a)
    if not isinstance(b, Tensor):
        c = np.asarray(b, dtype=a.dtype)
        return _make(a.data * c, (a,), lambda g: (_unbroadcast(g * c, a.shape),))
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def sum_(x: Tensor) -> Tensor:
    return _make(np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                 lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    return _make(np.asarray(x.data.mean(), dtype=x.dtype), (x,),
                 lambda g: (np.full(x.shape, g / n, dtype=x.dtype),))


def add_scalars(terms: Iterable[Tensor]) -> Tensor:
    terms = list(terms)
    out = terms[0]
    for t in terms[1:]:
        out = add(out, t)
    return out


# ---------------------------------------------------------------- convolution


def _im2col(xp: np.ndarray, k: int, h: int, w: int) -> np.ndarray:
    b, c = xp.shape[:2]
    cols = np.empty((b, c, k, k, h, w), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i:i + h, j:j + w]
    return cols.reshape(b, c * k * k, h * w)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Stride-1 'same' convolution (zero padding) with an odd square kernel."""
    b, c, h, w = x.shape
    o, ci, k, k2 = weight.shape
    if ci != c or k != k2 or k % 2 == 0:
        raise ValueError(f"conv2d weight {weight.shape} incompatible with input {x.shape}")
    p = k // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    cols = _im2col(xp, k, h, w)
    w2 = weight.data.reshape(o, c * k * k)
    out = np.matmul(w2, cols).reshape(b, o, h, w)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(b, o, h * w)
        gw = np.einsum("bop,bqp->oq", g2, cols, optimize=True).reshape(weight.shape)
        gcols = np.matmul(w2.T, g2).reshape(b, c, k, k, h, w)
        gxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i:i + h, j:j + w] += gcols[:, :, i, j]
        gx = gxp[:, :, p:p + h, p:p + w] if p else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return _make(out.astype(x.dtype, copy=False), parents, backward)


def channel_matmul(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """1x1 convolution: ``out[b, o] = sum_c weight[o, c] x[b, c]`` (+ bias)."""
    b, c, h, w = x.shape
    if weight.shape[1] != c:
        raise ValueError(f"1x1 weight {weight.shape} incompatible with input {x.shape}")
    xf = x.data.reshape(b, c, h * w)
    out = np.matmul(weight.data, xf).reshape(b, -1, h, w)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(b, -1, h * w)
        grads = [np.matmul(weight.data.T, g2).reshape(x.shape),
                 np.einsum("bop,bcp->oc", g2, xf, optimize=True)]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return _make(out, parents, backward)


# ---------------------------------------------------------------- pixel shuffle


def _unshuffle(a: np.ndarray, r: int) -> np.ndarray:
    b, c, h, w = a.shape
    if h % r or w % r:
        raise ValueError(f"factor {r} does not divide spatial dims {h}x{w}")
    a = a.reshape(b, c, h // r, r, w // r, r)
    return a.transpose(0, 1, 3, 5, 2, 4).reshape(b, c * r * r, h // r, w // r)


def _shuffle(a: np.ndarray, r: int) -> np.ndarray:
    b, m, h, w = a.shape
    if m % (r * r):
        raise ValueError(f"channels {m} not divisible by {r}^2")
    c = m // (r * r)
    a = a.reshape(b, c, r, r, h, w)
    return a.transpose(0, 1, 4, 2, 5, 3).reshape(b, c, h * r, w * r)


def unpixelshuffle(x: Tensor, r: int) -> Tensor:
    """Space-to-depth: ``(b, c, h, w) -> (b, c*r*r, h/r, w/r)``.

    Channel ``c*r*r + i*r + j`` holds the pixels at offset ``(i, j)`` of each
    ``r x r`` cell of input channel ``c``.
    """
    return _make(_unshuffle(x.data, r), (x,), lambda g: (_shuffle(g, r),))


def pixelshuffle(x: Tensor, r: int) -> Tensor:
    return _make(_shuffle(x.data, r), (x,), lambda g: (_unshuffle(g, r),))


# ---------------------------------------------------------------- layers


class Module:
    def parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for name, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                out.append((name, val))
            elif isinstance(val, Module):
                out += [(f"{name}.{n}", t) for n, t in val.parameters()]
            elif isinstance(val, list):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out += [(f"{name}.{i}.{n}", t) for n, t in item.parameters()]
        return out

    def modules(self) -> Iterable["Module"]:
        yield self
        for val in vars(self).values():
            items = val if isinstance(val, list) else [val]
            for item in items:
                if isinstance(item, Module):
                    yield from item.modules()

    def zero_grad(self) -> None:
        for _, p in self.parameters():
            p.grad = None


def _param(a: np.ndarray, dtype) -> Tensor:
    return Tensor(np.asarray(a, dtype=dtype), requires_grad=True)


def orthogonal_init(n: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int = 3, rng=None, dtype=np.float32,
                 gain: float = np.sqrt(2.0), bias: bool = True):
        rng = rng if rng is not None else np.random.default_rng(0)
        std = gain / np.sqrt(cin * k * k)
        self.weight = _param(rng.standard_normal((cout, cin, k, k)) * std, dtype)
        self.bias = _param(np.zeros(cout), dtype) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        if self.weight.shape[2] == 1:
            return channel_matmul(x, _reshape(self.weight, self.weight.shape[:2]), self.bias)
        return conv2d(x, self.weight, self.bias)


def _reshape(t: Tensor, shape) -> Tensor:
    return _make(t.data.reshape(shape), (t,), lambda g: (g.reshape(t.shape),))


class SveoLayer(Module):
    """Unpixelshuffle, an orthogonally initialized 1x1 conv over the
    ``c*r*r`` channels, then pixelshuffle back."""

    def __init__(self, channels: int, r: int = 2, rng=None, dtype=np.float32, bias: bool = True):
        rng = rng if rng is not None else np.random.default_rng(0)
        m = channels * r * r
        self.r = r
        self.w = _param(orthogonal_init(m, rng), dtype)
        self.bias = _param(np.zeros(m), dtype) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return sveo_forward(x, self)


def sveo_forward(x: Tensor, layer: SveoLayer) -> Tensor:
    z = unpixelshuffle(x, layer.r)
    return pixelshuffle(channel_matmul(z, layer.w, layer.bias), layer.r)


class SvaoLayer(Module):
    """Mixes DFT amplitudes across channels with a 1x1 weight; phase untouched."""

    def __init__(self, channels: int, dtype=np.float32, eps: float = 1e-8, activation: str = "none",
                 rng=None):
        self.w_amp = _param(np.eye(channels), dtype)
        self.eps = eps
        if activation not in ("none", "relu"):
            raise ValueError(f"unknown svao activation {activation!r}")
        self.activation = activation

    def __call__(self, x: Tensor) -> Tensor:
        return svao_forward(x, self)


def svao_forward(x: Tensor, layer: SvaoLayer) -> Tensor:
    """out = Re(IDFT(G * A'/(A + eps))) with A = |DFT(x)| and A' = w_amp (1x1) A.

    Scaling G by a real factor keeps its phase exactly.  The backward pass
    flows through A' and through A in the denominator and the magnitude.
    """
    eps = layer.eps
    w = layer.w_amp
    b, c, h, wd = x.shape
    n = h * wd
    g = np.fft.fft2(x.data, axes=(-2, -1))
    amp = np.abs(g)
    amp_mix = np.einsum("oc,bcuv->bouv", w.data, amp, optimize=True)
    pre_act = amp_mix
    if layer.activation == "relu":
        amp_mix = np.maximum(amp_mix, 0)
    ratio = amp_mix / (amp + eps)
    z = g * ratio
    out = np.fft.ifft2(z, axes=(-2, -1)).real.astype(x.dtype)

    def backward(gout):
        # dL/dZ convention: conj(ifft2(gout)) equals fft2(gout)/n for real gout
        zbar = np.fft.fft2(gout, axes=(-2, -1)) / n
        gbar = zbar * ratio
        rbar = np.real(np.conj(zbar) * g)
        mixbar = rbar / (amp + eps)
        if layer.activation == "relu":
            mixbar = mixbar * (pre_act > 0)
        abar = -rbar * amp_mix / (amp + eps) ** 2
        abar += np.einsum("oc,bouv->bcuv", w.data, mixbar, optimize=True)
        wbar = np.einsum("bouv,bcuv->oc", mixbar, amp, optimize=True)
        safe = np.where(amp > 0, amp, 1.0)
        gbar = gbar + np.where(amp > 0, abar / safe, 0.0) * g
        xbar = n * np.fft.ifft2(gbar, axes=(-2, -1)).real
        return xbar.astype(x.dtype), wbar.astype(w.dtype)

    return _make(out, (x, w), backward)


# ---------------------------------------------------------------- losses


@dataclass(frozen=True)
class LossWeights:
    beta: float = 0.01
    lambda_orth: float = 1e-4
    lambda_dec: float = 0.1

    def __post_init__(self):
        for name in ("beta", "lambda_orth", "lambda_dec"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


def loss_orth(w: Tensor) -> Tensor:
    """Squared Frobenius norm of the off-diagonal part of ``W W^T``."""
    if w.data.ndim != 2 or w.shape[0] != w.shape[1]:
        raise ValueError(f"loss_orth needs a square matrix, got {w.shape}")
    gram = w.data @ w.data.T
    off = gram - np.diag(np.diag(gram))
    return _make(np.asarray((off**2).sum(), dtype=w.dtype), (w,), lambda g: (4.0 * g * off @ w.data,))


def charbonnier(rec: Tensor, clean, eps: float = 1e-3) -> Tensor:
    """Mean of sqrt((rec - clean)^2 + eps^2) over all elements."""
    c = np.asarray(clean.data if isinstance(clean, Tensor) else clean, dtype=rec.dtype)
    d = rec.data - c
    root = np.sqrt(d * d + eps * eps)
    n = d.size
    return _make(np.asarray(root.mean(), dtype=rec.dtype), (rec,), lambda g: (g * d / root / n,))


DEC_DENOM_FLOOR = 1e-8


def _safe_inv_gap(s: np.ndarray) -> np.ndarray:
    """F[..., i, j] = 1 / (s_j^2 - s_i^2), floored in magnitude; zero on the diagonal."""
    s2 = s**2
    d = s2[..., None, :] - s2[..., :, None]
    sign = np.where(d >= 0, 1.0, -1.0)
    f = 1.0 / (sign * np.maximum(np.abs(d), DEC_DENOM_FLOOR))
    idx = np.arange(s.shape[-1])
    f[..., idx, idx] = 0.0
    return f


def svd_backward(u, s, vt, ubar, sbar, vbar) -> np.ndarray:
    """Gradient of a scalar through a square SVD ``X = U diag(s) V^T``.

    First-order perturbation formula; batched over leading axes.
    """
    v = np.swapaxes(vt, -1, -2)
    f = _safe_inv_gap(s)
    ut_ubar = np.swapaxes(u, -1, -2) @ ubar
    vt_vbar = vt @ vbar
    j_u = f * (ut_ubar - np.swapaxes(ut_ubar, -1, -2))
    j_v = f * (vt_vbar - np.swapaxes(vt_vbar, -1, -2))
    inner = j_u * s[..., None, :] + s[..., :, None] * j_v
    idx = np.arange(s.shape[-1])
    inner[..., idx, idx] += sbar
    return u @ inner @ np.swapaxes(v, -1, -2)


def _loss_dec_single(rec: Tensor, clean: np.ndarray, beta: float) -> Tensor:
    if rec.data.ndim != 4:
        raise ValueError(f"loss_dec expects (b, c, h, w), got {rec.shape}")
    b, c, h, w = rec.shape
    if h != w:
        raise ValueError(f"loss_dec needs square patches, got {h}x{w}")
    clean = np.asarray(clean, dtype=np.float64)
    if clean.shape != rec.shape:
        raise ValueError(f"shape mismatch {rec.shape} vs {clean.shape}")
    x = rec.data.astype(np.float64)
    ur, sr, vtr = np.linalg.svd(x)
    uc, sc, vtc = np.linalg.svd(clean)
    pr = ur @ vtr
    pc = uc @ vtc
    live = (np.abs(x).max(axis=(-2, -1)) > 0) & (np.abs(clean).max(axis=(-2, -1)) > 0)
    if not live.all():
        log.warning("loss_dec: %d all-zero channel(s); singular vector term skipped there",
                    int((~live).sum()))
    dp = pr - pc
    vec_term = np.abs(dp).sum(axis=(-2, -1)) * live
    val_term = np.abs(sr - sc).sum(axis=-1)
    total = beta * vec_term.sum() + val_term.sum()

    def backward(g):
        pbar = g * beta * np.sign(dp) * live[..., None, None]
        ubar = pbar @ np.swapaxes(vtr, -1, -2)
        vbar = np.swapaxes(pbar, -1, -2) @ ur
        sbar = g * np.sign(sr - sc)
        return (svd_backward(ur, sr, vtr, ubar, sbar, vbar).astype(rec.dtype),)

    return _make(np.asarray(total, dtype=rec.dtype), (rec,), backward)


def loss_dec(rec: Tensor | Sequence[Tensor], clean, beta: float = 0.01) -> Tensor:
    """Decomposition loss, summed over batch, channels and every output given.

    Per channel: ``beta * |U_r V_r^T - U_c V_c^T|_1 + |sigma_r - sigma_c|_1``.
    Pass a list of outputs to supervise several stages against the same clean
    batch.
    """
    outs = [rec] if isinstance(rec, Tensor) else list(rec)
    c = clean.data if isinstance(clean, Tensor) else clean
    return add_scalars(_loss_dec_single(o, c, beta) for o in outs)


def loss_total(rec, clean, model: Module, weights: LossWeights,
               use_orth: bool = True, use_dec: bool = True) -> tuple[Tensor, dict[str, float]]:
    """Charbonnier + lambda_orth * sum of SVEO orth losses + lambda_dec * L_dec.

    Returns the scalar and a dict of the unweighted parts for logging.
    """
    outs = [rec] if isinstance(rec, Tensor) else list(rec)
    l_ori = charbonnier(outs[-1], clean)
    terms = [l_ori]
    parts = {"l_ori": l_ori.item(), "l_orth": 0.0, "l_dec": 0.0}
    sveo_ws = [m.w for m in model.modules() if isinstance(m, SveoLayer)]
    if use_orth and sveo_ws:
        l_orth = add_scalars(loss_orth(w) for w in sveo_ws)
        parts["l_orth"] = l_orth.item()
        if weights.lambda_orth:
            terms.append(mul(l_orth, weights.lambda_orth))
    if use_dec:
        l_dec = loss_dec(outs, clean, weights.beta)
        parts["l_dec"] = l_dec.item()
        if weights.lambda_dec:
            terms.append(mul(l_dec, weights.lambda_dec))
    total = add_scalars(terms)
    parts["total"] = total.item()
    return total, parts


# ---------------------------------------------------------------- gradient checks

GRADCHECK_BOUNDS = {
    "conv": 1e-6,
    "sveo": 1e-5,
    "svao": 1e-5,
    "loss_dec": 1e-4,
    "loss_orth": 1e-8,
    "charbonnier": 1e-6,
    "pixelshuffle": 1e-6,
}


def _separated(n: int, rng: np.random.Generator, top: float = 4.0, low: float = 0.5) -> np.ndarray:
    """Square matrix with singular values evenly spaced in [low, top]."""
    q1 = orthogonal_init(n, rng)
    q2 = orthogonal_init(n, rng)
    return (q1 * np.linspace(top, low, n)) @ q2.T


def _gradcheck_case(component: str, rng: np.random.Generator):
    """Return (objective, list of float64 leaf tensors) for one component."""
    f64 = np.float64
    if component == "conv":
        x = Tensor(rng.standard_normal((2, 3, 8, 8)), requires_grad=True)
        layer = Conv2d(3, 4, 3, rng=rng, dtype=f64)
        layer.bias.data[:] = rng.standard_normal(4)
        proj = rng.standard_normal((2, 4, 8, 8))
        return (lambda: sum_(mul(layer(x), proj))), [x, layer.weight, layer.bias]
    if component == "pixelshuffle":
        x = Tensor(rng.standard_normal((2, 2, 8, 8)), requires_grad=True)
        proj = rng.standard_normal((2, 2, 8, 8))
        return (lambda: sum_(mul(pixelshuffle(unpixelshuffle(x, 2), 2), proj))), [x]
    if component == "sveo":
        x = Tensor(rng.standard_normal((2, 4, 8, 8)), requires_grad=True)
        layer = SveoLayer(4, 2, rng=rng, dtype=f64)
        layer.w.data += 0.1 * rng.standard_normal(layer.w.shape)
        layer.bias.data[:] = rng.standard_normal(layer.bias.shape)
        proj = rng.standard_normal((2, 4, 8, 8))
        return (lambda: sum_(mul(layer(x), proj))), [x, layer.w, layer.bias]
    if component == "svao":
        x = Tensor(rng.standard_normal((2, 3, 8, 8)), requires_grad=True)
        layer = SvaoLayer(3, dtype=f64)
        layer.w_amp.data += 0.3 * rng.standard_normal((3, 3))
        proj = rng.standard_normal((2, 3, 8, 8))
        return (lambda: sum_(mul(layer(x), proj))), [x, layer.w_amp]
    if component == "loss_dec":
        x = Tensor(np.stack([[_separated(8, rng) for _ in range(2)]]), requires_grad=True)
        clean = np.stack([[_separated(8, rng, top=3.0, low=0.3) for _ in range(2)]])
        return (lambda: loss_dec(x, clean, beta=0.5)), [x]
    if component == "loss_orth":
        w = Tensor(orthogonal_init(6, rng) + 0.1 * rng.standard_normal((6, 6)), requires_grad=True)
        return (lambda: loss_orth(w)), [w]
    if component == "charbonnier":
        x = Tensor(rng.standard_normal((2, 3, 5, 5)), requires_grad=True)
        clean = rng.standard_normal((2, 3, 5, 5))
        return (lambda: charbonnier(x, clean, eps=0.1)), [x]
    raise KeyError(f"unknown gradcheck component {component!r}; known: {sorted(GRADCHECK_BOUNDS)}")


def gradcheck(component: str, seed: int = 0, step: float = 1e-5, max_coords: int = 512) -> float:
    """Max relative error of the analytic gradient against central differences.

    Runs in float64 over at most ``max_coords`` randomly chosen coordinates of
    the component's inputs and parameters.  Per coordinate the error is
    ``|a - n| / max(|a|, |n|, 1e-3 * max|a|)``; the floor keeps coordinates
    whose true gradient is near zero from reporting pure round-off.
    """
    rng = np.random.default_rng(seed)
    objective, leaves = _gradcheck_case(component, rng)
    for t in leaves:
        t.grad = None
    objective().backward()
    analytic = [t.grad.copy() for t in leaves]
    coords = [(i, j) for i, t in enumerate(leaves) for j in range(t.data.size)]
    if len(coords) > max_coords:
        pick = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[k] for k in sorted(pick)]
    scale = max(float(np.abs(a).max()) for a in analytic)
    worst = 0.0
    with no_grad():
        for i, j in coords:
            flat = leaves[i].data.reshape(-1)
            orig = flat[j]
            flat[j] = orig + step
            fp = objective().item()
            flat[j] = orig - step
            fm = objective().item()
            flat[j] = orig
            num = (fp - fm) / (2 * step)
            ana = float(analytic[i].reshape(-1)[j])
            denom = max(abs(ana), abs(num), 1e-3 * scale, 1e-300)
            worst = max(worst, abs(ana - num) / denom)
    return worst
