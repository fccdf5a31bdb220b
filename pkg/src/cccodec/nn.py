"""Minimal dense-tensor autodiff engine.

Just enough reverse-mode machinery to train and run the small context
networks: float64 numpy storage, 2D convolution (optionally masked and
strided), leaky ReLU / softplus, nearest-neighbour upsampling, channel
concat/slice, and Adam.  Tensors are (C, H, W) or (B, C, H, W); kernels
are (out_ch, in_ch, kh, kw).

Gradients accumulate additively across uses; call ``zero_grad`` between
backward passes (a second backward without zeroing adds into ``grad``).
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf, erfc, expit as sp_expit

MASK_KINDS = ("none", "causal-A", "causal-B", "causal-3d")


class Tensor:
    """A node in the computation graph wrapping a float64 ndarray."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, parents=(), backward=None, name=""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = tuple(parents)
        self._backward = backward
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad = None

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        """Populate ``grad`` for every requires_grad tensor reachable from self."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar loss node")
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self._accum(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad=False, name=""):
    """Build a leaf tensor; rejects non-finite values."""
    arr = np.asarray(data, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("non-finite values in tensor input")
    return Tensor(arr, requires_grad=requires_grad, name=name)


def _node(data, parents, backward):
    rg = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=rg, parents=parents if rg else (),
                  backward=backward if rg else None)


# ---------------------------------------------------------------------------
# elementwise / reduction ops

def add(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data + b.data
    if out_data.shape != a.data.shape or out_data.shape != b.data.shape:
        raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")

    def bwd(g):
        if a.requires_grad:
            a._accum(g)
        if b.requires_grad:
            b._accum(g)

    return _node(out_data, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ValueError(f"sub shape mismatch: {a.shape} vs {b.shape}")

    def bwd(g):
        if a.requires_grad:
            a._accum(g)
        if b.requires_grad:
            b._accum(-g)

    return _node(a.data - b.data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ValueError(f"mul shape mismatch: {a.shape} vs {b.shape}")

    def bwd(g):
        if a.requires_grad:
            a._accum(g * b.data)
        if b.requires_grad:
            b._accum(g * a.data)

    return _node(a.data * b.data, (a, b), bwd)


def scale(a: Tensor, s: float) -> Tensor:
    def bwd(g):
        a._accum(g * s)

    return _node(a.data * s, (a,), bwd)


def square(a: Tensor) -> Tensor:
    def bwd(g):
        a._accum(g * 2.0 * a.data)

    return _node(a.data * a.data, (a,), bwd)


def tsum(a: Tensor) -> Tensor:
    def bwd(g):
        a._accum(np.full_like(a.data, float(g)))

    return _node(a.data.sum(), (a,), bwd)


def tmean(a: Tensor) -> Tensor:
    n = a.data.size

    def bwd(g):
        a._accum(np.full_like(a.data, float(g) / n))

    return _node(a.data.mean(), (a,), bwd)


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    """out = x if x >= 0 else slope * x."""
    pos = a.data >= 0
    out = np.where(pos, a.data, slope * a.data)

    def bwd(g):
        a._accum(g * np.where(pos, 1.0, slope))

    return _node(out, (a,), bwd)


def softplus(a: Tensor) -> Tensor:
    # log1p(exp(-|x|)) + max(x, 0) is stable for both tails
    out = np.log1p(np.exp(-np.abs(a.data))) + np.maximum(a.data, 0.0)

    def bwd(g):
        a._accum(g / (1.0 + np.exp(-a.data)))

    return _node(out, (a,), bwd)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp with pass-through gradient inside [lo, hi], zero outside."""
    inside = (a.data >= lo) & (a.data <= hi)
    out = np.clip(a.data, lo, hi)

    def bwd(g):
        a._accum(g * inside)

    return _node(out, (a,), bwd)


def concat_channels(parts) -> Tensor:
    """Concatenate along the channel axis (axis -3)."""
    parts = list(parts)
    out = np.concatenate([p.data for p in parts], axis=-3)
    sizes = [p.data.shape[-3] for p in parts]

    def bwd(g):
        ofs = 0
        for p, c in zip(parts, sizes):
            if p.requires_grad:
                p._accum(g[..., ofs:ofs + c, :, :])
            ofs += c

    return _node(out, tuple(parts), bwd)


def slice_channels(a: Tensor, start: int, stop: int) -> Tensor:
    def bwd(g):
        buf = np.zeros_like(a.data)
        buf[..., start:stop, :, :] = g
        a._accum(buf)

    return _node(a.data[..., start:stop, :, :], (a,), bwd)


def shift_channels(a: Tensor, k: int) -> Tensor:
    """out[..., c] = a[..., c - k], zero-filled at the boundary."""
    out = np.zeros_like(a.data)
    C = a.data.shape[-3]
    if k >= 0:
        out[..., k:, :, :] = a.data[..., :C - k, :, :]
    else:
        out[..., :C + k, :, :] = a.data[..., -k:, :, :]

    def bwd(g):
        buf = np.zeros_like(a.data)
        if k >= 0:
            buf[..., :C - k, :, :] = g[..., k:, :, :]
        else:
            buf[..., -k:, :, :] = g[..., :C + k, :, :]
        a._accum(buf)

    return _node(out, (a,), bwd)


def stack_as_batch(parts) -> Tensor:
    """Stack (C, H, W) tensors into a (B, C, H, W) batch node."""
    parts = list(parts)
    out = np.stack([p.data for p in parts], axis=0)

    def bwd(g):
        for i, p in enumerate(parts):
            if p.requires_grad:
                p._accum(g[i])

    return _node(out, tuple(parts), bwd)


def stack_new_axis(parts) -> Tensor:
    """Stack equal-shape tensors along a new axis just before (H, W)."""
    parts = list(parts)
    out = np.stack([p.data for p in parts], axis=-3)

    def bwd(g):
        for i, p in enumerate(parts):
            if p.requires_grad:
                p._accum(g[..., i, :, :])

    return _node(out, tuple(parts), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    def bwd(g):
        a._accum(g.reshape(a.data.shape))

    return _node(a.data.reshape(shape), (a,), bwd)


def reshape_lead(a: Tensor, split) -> Tensor:
    """Split the channel axis: (..., c0*c1, H, W) -> (..., c0, c1, H, W)."""
    c0, c1 = split
    s = a.data.shape
    return reshape(a, s[:-3] + (c0, c1) + s[-2:])


def merge_lead(a: Tensor) -> Tensor:
    """Inverse of reshape_lead: (..., c0, c1, H, W) -> (..., c0*c1, H, W)."""
    s = a.data.shape
    return reshape(a, s[:-4] + (s[-4] * s[-3],) + s[-2:])


def upsample2x(a: Tensor) -> Tensor:
    """Nearest-neighbour x2 upsampling of the spatial dims."""
    out = a.data.repeat(2, axis=-2).repeat(2, axis=-1)

    def bwd(g):
        s = g.shape
        gr = g.reshape(s[:-2] + (s[-2] // 2, 2, s[-1] // 2, 2))
        a._accum(gr.sum(axis=(-3, -1)))

    return _node(out, (a,), bwd)


# ---------------------------------------------------------------------------
# convolution

def conv_mask(kind: str, kh: int, kw: int, in_ch: int = 1) -> np.ndarray:
    """Binary mask of shape (1, in_ch, kh, kw) (broadcastable over out_ch).

    causal-A zeroes the centre tap and everything after it in raster order;
    causal-B zeroes strictly-after taps only.  causal-3d treats the in_ch
    axis as a channel window centred at in_ch // 2: channels after the
    centre are fully zeroed, the centre channel gets causal-A, earlier
    channels are unmasked.
    """
    if kind not in MASK_KINDS:
        raise ValueError(f"unknown mask kind: {kind!r}")
    cy, cx = kh // 2, kw // 2
    ys, xs = np.mgrid[0:kh, 0:kw]
    before = (ys < cy) | ((ys == cy) & (xs < cx))
    if kind == "none":
        spatial = np.ones((kh, kw), dtype=np.float64)
    elif kind == "causal-A":
        spatial = before.astype(np.float64)
    elif kind == "causal-B":
        spatial = (before | ((ys == cy) & (xs == cx))).astype(np.float64)
    else:  # causal-3d
        m = np.zeros((1, in_ch, kh, kw), dtype=np.float64)
        centre = in_ch // 2
        m[0, :centre] = 1.0
        m[0, centre] = before.astype(np.float64)
        return m
    return np.broadcast_to(spatial, (1, in_ch, kh, kw)).astype(np.float64)


def apply_mask(w: Tensor, kind: str) -> Tensor:
    """Zero the masked taps of a 4-D kernel tensor (idempotent)."""
    if w.data.ndim != 4:
        raise ValueError("apply_mask expects a 4-D kernel tensor")
    if kind == "none":
        return w
    m = conv_mask(kind, w.data.shape[2], w.data.shape[3], w.data.shape[1])

    def bwd(g):
        w._accum(g * m)

    return _node(w.data * m, (w,), bwd)


def _pad_spatial(x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    pad = [(0, 0)] * (x.ndim - 2) + [(ph, ph), (pw, pw)]
    return np.pad(x, pad)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None,
           stride: int = 1, padding: int | None = None) -> Tensor:
    """2D convolution (cross-correlation) with fixed tap-order accumulation.

    x: (..., C, H, W); w: (O, C, kh, kw); b: (O,).  Default padding keeps
    "same" spatial size for stride 1 and odd kernels.
    """
    O, I, kh, kw = w.data.shape
    if x.data.shape[-3] != I:
        raise ValueError(f"conv2d channel mismatch: input {x.data.shape[-3]} vs kernel {I}")
    if not np.all(np.isfinite(x.data)):
        raise ValueError("non-finite conv2d input")
    ph = kh // 2 if padding is None else padding
    pw = kw // 2 if padding is None else padding
    xp = _pad_spatial(x.data, ph, pw)
    H, W = x.data.shape[-2], x.data.shape[-1]
    Ho = (H + 2 * ph - kh) // stride + 1
    Wo = (W + 2 * pw - kw) // stride + 1
    out = np.zeros(x.data.shape[:-3] + (O, Ho, Wo))
    # fixed (ky, kx) tap order keeps summation deterministic
    for ky in range(kh):
        for kx in range(kw):
            xs = xp[..., :, ky:ky + stride * Ho:stride, kx:kx + stride * Wo:stride]
            out += np.einsum("oi,...iyx->...oyx", w.data[:, :, ky, kx], xs)
    if b is not None:
        if b.data.shape != (O,):
            raise ValueError("conv2d bias shape mismatch")
        out += b.data[:, None, None]

    def bwd(g):
        if w.requires_grad or x.requires_grad:
            gxp = np.zeros_like(xp) if x.requires_grad else None
            for ky in range(kh):
                for kx in range(kw):
                    xs = xp[..., :, ky:ky + stride * Ho:stride, kx:kx + stride * Wo:stride]
                    if w.requires_grad:
                        gw = np.einsum("boyx,biyx->oi",
                                       g.reshape((-1,) + g.shape[-3:]),
                                       xs.reshape((-1,) + xs.shape[-3:]))
                        if w.grad is None:
                            w.grad = np.zeros_like(w.data)
                        w.grad[:, :, ky, kx] += gw
                    if gxp is not None:
                        gxp[..., :, ky:ky + stride * Ho:stride, kx:kx + stride * Wo:stride] += \
                            np.einsum("oi,...oyx->...iyx", w.data[:, :, ky, kx], g)
            if gxp is not None:
                if ph or pw:
                    sl = (Ellipsis, slice(None), slice(ph, ph + H), slice(pw, pw + W))
                    x._accum(gxp[sl])
                else:
                    x._accum(gxp)
        if b is not None and b.requires_grad:
            axes = tuple(range(g.ndim - 3)) + (g.ndim - 2, g.ndim - 1)
            b._accum(g.sum(axis=axes))

    parents = (x, w) if b is None else (x, w, b)
    return _node(out, parents, bwd)


# ---------------------------------------------------------------------------
# rate terms (fused ops with hand-derived gradients)

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)
_LN2 = np.log(2.0)
_P_FLOOR = 1e-12


def _std_cdf_diff(a, b):
    """Phi(b) - Phi(a) computed on the numerically favourable side."""
    upper = 0.5 * erfc(a * _INV_SQRT2) - 0.5 * erfc(b * _INV_SQRT2)
    lower = 0.5 * erfc(-b * _INV_SQRT2) - 0.5 * erfc(-a * _INV_SQRT2)
    return np.where(a + b > 0, upper, lower)


def gaussian_bits(y: Tensor, mu: Tensor, sigma: Tensor) -> Tensor:
    """Elementwise -log2 of the unit-interval Gaussian mass around y.

    p = Phi((y + 0.5 - mu)/sigma) - Phi((y - 0.5 - mu)/sigma), floored at
    a tiny constant so the bits stay finite.
    """
    sd = sigma.data
    a = (y.data - 0.5 - mu.data) / sd
    b = (y.data + 0.5 - mu.data) / sd
    p_raw = _std_cdf_diff(a, b)
    p = np.maximum(p_raw, _P_FLOOR)
    out = -np.log2(p)
    phi_a = _INV_SQRT2PI * np.exp(-0.5 * a * a)
    phi_b = _INV_SQRT2PI * np.exp(-0.5 * b * b)
    live = (p_raw > _P_FLOOR).astype(np.float64)

    def bwd(g):
        dldp = -g / (p * _LN2) * live
        if mu.requires_grad:
            mu._accum(dldp * (phi_a - phi_b) / sd)
        if sigma.requires_grad:
            sigma._accum(dldp * (phi_a * a - phi_b * b) / sd)
        if y.requires_grad:
            y._accum(dldp * (phi_b - phi_a) / sd)

    return _node(out, (y, mu, sigma), bwd)


def _sigmoid(x):
    return sp_expit(x)


def logistic_bits(z: Tensor, loc: Tensor, s: Tensor) -> Tensor:
    """Elementwise -log2 of the unit-interval logistic mass around z.

    loc and s are per-channel (C,) parameters broadcast over space.
    """
    ld = loc.data[:, None, None]
    sd = s.data[:, None, None]
    a = (z.data - 0.5 - ld) / sd
    b = (z.data + 0.5 - ld) / sd
    sa, sb = _sigmoid(a), _sigmoid(b)
    p_raw = sb - sa
    p = np.maximum(p_raw, _P_FLOOR)
    out = -np.log2(p)
    da, db = sa * (1.0 - sa), sb * (1.0 - sb)
    live = (p_raw > _P_FLOOR).astype(np.float64)

    def bwd(g):
        dldp = -g / (p * _LN2) * live
        axes = tuple(range(dldp.ndim - 3)) + (dldp.ndim - 2, dldp.ndim - 1)
        if loc.requires_grad:
            loc._accum((dldp * (da - db) / sd).sum(axis=axes))
        if s.requires_grad:
            s._accum((dldp * (da * a - db * b) / sd).sum(axis=axes))
        if z.requires_grad:
            z._accum(dldp * (db - da) / sd)

    return _node(out, (z, loc, s), bwd)


def std_gaussian_mass(symbols: np.ndarray, mu, sigma) -> np.ndarray:
    """Plain-numpy discretized Gaussian mass (no autodiff), same math."""
    a = (symbols - 0.5 - mu) / sigma
    b = (symbols + 0.5 - mu) / sigma
    return _std_cdf_diff(a, b)


def erf_cdf(x):
    """Standard normal CDF via erf (oracle helper)."""
    return 0.5 * (1.0 + erf(np.asarray(x, dtype=np.float64) * _INV_SQRT2))


# ---------------------------------------------------------------------------
# parameters, init, Adam

class AdamState:
    """Per-parameter-set Adam moments and hyperparameters."""

    def __init__(self, params: dict, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        if lr <= 0:
            raise ValueError("lr must be positive")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}


def adam_step(params: dict, state: AdamState):
    """One Adam update with bias correction; missing grads count as zero."""
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    for k, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ValueError(f"adam_step shape mismatch for {k}")
        state.m[k] = b1 * state.m[k] + (1 - b1) * g
        state.v[k] = b2 * state.v[k] + (1 - b2) * g * g
        mhat = state.m[k] / (1 - b1 ** t)
        vhat = state.v[k] / (1 - b2 ** t)
        p.data = p.data - state.lr * mhat / (np.sqrt(vhat) + state.eps)


def he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / max(1, fan_in))
    return rng.uniform(-bound, bound, size=shape)


def zero_grads(params: dict):
    for p in params.values():
        p.zero_grad()


def residual_block(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor,
                   slope: float = 0.01) -> Tensor:
    """out = x + conv(lrelu(conv(x))); skip requires matching channel counts."""
    if w2.data.shape[0] != x.data.shape[-3]:
        raise ValueError("residual block channel mismatch between skip and branch")
    h = conv2d(x, w1, b1)
    h = leaky_relu(h, slope)
    h = conv2d(h, w2, b2)
    return add(x, h)
