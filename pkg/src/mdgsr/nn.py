"""Reverse-mode autodiff for the handful of layers the super-resolution CNN uses.

Tensors are ``(batch, channel, H, W)`` arrays. Each op records its parents and
a closure that maps the output gradient to parent gradients; ``backward`` walks
the recorded graph in reverse topological order. Convolutions run in
channels-last layout internally as nine shifted matrix products, which is the
fastest pure-numpy formulation at these channel counts.
"""

from dataclasses import dataclass, field

import numpy as np

from .exceptions import ShapeMismatchError


class Tensor:
    """An array with an optional accumulated gradient."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = np.asarray(data)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        """Accumulate gradients of this tensor into every ancestor."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward without an explicit gradient needs a scalar output")
            grad = np.ones_like(self.data)

        order, seen = [], set()

        def visit(node):
            if id(node) in seen:
                return
            seen.add(id(node))
            for p in node._parents:
                visit(p)
            order.append(node)

        visit(self)
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not _needs_grad(parent):
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg


def _needs_grad(t):
    return t.requires_grad or t._backward is not None


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _pad_replicate(x_nhwc, ph, pw):
    return np.pad(x_nhwc, ((0, 0), (ph, ph), (pw, pw), (0, 0)), mode="edge")


def _unpad_replicate(g, ph, pw, H, W):
    """Adjoint of edge padding: fold border gradients onto the edge pixels."""
    if pw:
        g[:, :, pw] += g[:, :, :pw].sum(axis=2)
        g[:, :, pw + W - 1] += g[:, :, pw + W:].sum(axis=2)
        g = g[:, :, pw:pw + W]
    if ph:
        g[:, ph] += g[:, :ph].sum(axis=1)
        g[:, ph + H - 1] += g[:, ph + H:].sum(axis=1)
        g = g[:, ph:ph + H]
    return g


def conv2d(x, weight, bias=None):
    """Same-size 2-D convolution with replicate padding.

    Args:
        x: input ``(B, C, H, W)``.
        weight: ``(O, C, kh, kw)`` with odd ``kh`` and ``kw``.
        bias: ``(O,)`` or None.
    """
    x, weight = _wrap(x), _wrap(weight)
    bias = None if bias is None else _wrap(bias)
    B, C, H, W = x.shape
    O, Cw, kh, kw = weight.shape
    if Cw != C:
        raise ShapeMismatchError(f"input has {C} channels, weight expects {Cw}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeMismatchError(f"kernel {kh}x{kw} must have odd sides")
    if bias is not None and bias.shape != (O,):
        raise ShapeMismatchError(f"bias shape {bias.shape} != ({O},)")
    ph, pw = (kh - 1) // 2, (kw - 1) // 2

    xp = _pad_replicate(x.data.transpose(0, 2, 3, 1), ph, pw)
    wt = np.ascontiguousarray(weight.data.transpose(2, 3, 1, 0))  # (kh, kw, C, O)
    out = np.zeros((B, H, W, O), dtype=np.result_type(x.data, weight.data))
    for i in range(kh):
        for j in range(kw):
            out += xp[:, i:i + H, j:j + W, :] @ wt[i, j]
    if bias is not None:
        out += bias.data

    def backward(g):
        g = np.ascontiguousarray(g.transpose(0, 2, 3, 1))  # (B, H, W, O)
        g2 = g.reshape(-1, O)
        gx = gw = gb = None
        if _needs_grad(weight):
            gw = np.empty((kh, kw, C, O), dtype=out.dtype)
            for i in range(kh):
                for j in range(kw):
                    gw[i, j] = xp[:, i:i + H, j:j + W, :].reshape(-1, C).T @ g2
            gw = gw.transpose(3, 2, 0, 1)
        if _needs_grad(x):
            wtt = np.ascontiguousarray(wt.transpose(0, 1, 3, 2))
            gp = np.zeros(xp.shape, dtype=out.dtype)
            for i in range(kh):
                for j in range(kw):
                    gp[:, i:i + H, j:j + W, :] += g @ wtt[i, j]
            gx = _unpad_replicate(gp, ph, pw, H, W).transpose(0, 3, 1, 2)
        if bias is not None and _needs_grad(bias):
            gb = g2.sum(axis=0)
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor(out.transpose(0, 3, 1, 2), _parents=parents, _backward=backward)


def relu(x):
    """Elementwise ``max(0, x)``; the subgradient at 0 is 0. NaN propagates."""
    x = _wrap(x)
    mask = x.data > 0
    out = np.maximum(x.data, 0).astype(x.data.dtype, copy=False)
    return Tensor(out, _parents=(x,), _backward=lambda g: (g * mask,))


def nearest_upsample(x, factor=2):
    """Replicate every pixel into a ``factor x factor`` block."""
    x = _wrap(x)
    B, C, H, W = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def backward(g):
        return (g.reshape(B, C, H, factor, W, factor).sum(axis=(3, 5)),)

    return Tensor(out, _parents=(x,), _backward=backward)


def squared_error_sum(mu, y):
    """``sum((y - mu)**2)`` over every element; ``y`` is a constant."""
    mu = _wrap(mu)
    diff = mu.data - np.asarray(y, dtype=mu.data.dtype)
    return Tensor(np.sum(diff * diff), _parents=(mu,), _backward=lambda g: (2.0 * g * diff,))


def spectral_quadratic_sum(mu, y, inv_s):
    """``sum_k |c(k)|**2 * inv_s(k)`` with ``c`` the unitary DFT of ``y - mu``.

    Works on ``(B, 1, H, W)`` tensors; ``inv_s`` broadcasts against ``(B, H, W)``.
    """
    mu = _wrap(mu)
    err = (np.asarray(y) - mu.data)[:, 0]
    c = np.fft.fft2(err, norm="ortho")
    weighted = c * inv_s
    value = np.sum((c.real ** 2 + c.imag ** 2) * inv_s)

    def backward(g):
        grad = -2.0 * np.fft.ifft2(weighted, norm="ortho").real
        return ((g * grad)[:, None].astype(mu.data.dtype, copy=False),)

    return Tensor(np.asarray(value, dtype=mu.data.dtype), _parents=(mu,), _backward=backward)


@dataclass
class LRSchedule:
    """Learning rate per epoch: ``fixed`` or ``exp_decay`` clamped at ``floor``."""

    kind: str = "fixed"
    base: float = 1e-2
    rate: float = 0.95
    floor: float = 1e-4

    def __post_init__(self):
        if self.kind not in ("fixed", "exp_decay"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.kind == "exp_decay" and not self.base > self.floor > 0:
            raise ValueError("exp_decay needs base > floor > 0")

    def __call__(self, epoch):
        return lr_schedule(self.kind, self.base, self.rate, self.floor, epoch)


def lr_schedule(kind, base, rate=0.95, floor=1e-4, epoch=0):
    if kind == "fixed":
        return base
    if kind == "exp_decay":
        return max(floor, base * rate ** epoch)
    raise ValueError(f"unknown schedule kind {kind!r}")


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    schedule: LRSchedule = field(default_factory=LRSchedule)
    epoch: int = 0

    @classmethod
    def for_params(cls, params, **kwargs):
        return cls(m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params], **kwargs)


def adam_step(params, grads, state):
    """One bias-corrected Adam update, applied in place.

    The learning rate is ``state.schedule(state.epoch)``.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeMismatchError("params, grads and optimizer state must align")
    state.t += 1
    lr = state.schedule(state.epoch)
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ShapeMismatchError(f"grad shape {g.shape} != param shape {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype, copy=False)
    return params, state
