"""Neural building blocks on top of :mod:`crosstalk_mtl.autodiff`.

Convolution, max-pooling, frequency layer normalization and softmax
cross-entropy are fused primitives with hand-written backward rules (they
dominate training time); frequency dynamic convolution is composed from
primitives.  All tensors are laid out as ``[batch, channels, freq, time]``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, apply_op
from .errors import FormatError, LabelError, ShapeError


def _pair(v) -> tuple[int, int]:
    if isinstance(v, int):
        return (v, v)
    a, b = v
    return (int(a), int(b))


# ---------------------------------------------------------------- functional ops

def _gather(xt: np.ndarray, kh: int, kw: int, sh: int, sw: int, Ho: int, Wo: int) -> np.ndarray:
    """Channel-first im2col: ``xt`` is padded input laid out [C, B, H, W]; returns [C*kh*kw, B*Ho*Wo]."""
    C, B = xt.shape[:2]
    cols = np.empty((C, kh, kw, B, Ho, Wo), dtype=xt.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, :, i:i + sh * Ho:sh, j:j + sw * Wo:sw]
    return cols.reshape(C * kh * kw, B * Ho * Wo)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """Cross-correlation with zero padding (no kernel flip)."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and weight, got {x.shape}, {w.shape}")
    B, C, H, W = x.shape
    O, Cw, kh, kw = w.shape
    if C != Cw:
        raise ShapeError(f"conv2d input has {C} channels, kernel expects {Cw}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    Ho = (H + 2 * ph - kh) // sh + 1
    Wo = (W + 2 * pw - kw) // sw + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"kernel {kh}x{kw} does not fit padded input {H}x{W}")
    xt = x.data.transpose(1, 0, 2, 3)
    if ph or pw:
        xt = np.pad(xt, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    cols = _gather(xt, kh, kw, sh, sw, Ho, Wo)
    wm = w.data.reshape(O, C * kh * kw)
    y = (wm @ cols).reshape(O, B, Ho, Wo)
    if b is not None:
        y += b.data.reshape(O, 1, 1, 1)
    y = np.ascontiguousarray(y.transpose(1, 0, 2, 3))
    padded_hw = xt.shape[2:]

    def back(g):
        gm = g.transpose(1, 0, 2, 3).reshape(O, B * Ho * Wo)
        dw = (gm @ cols.T).reshape(w.shape) if w.requires_grad else None
        db = g.sum(axis=(0, 2, 3)) if b is not None and b.requires_grad else None
        dx = None
        if x.requires_grad:
            if sh == sw == 1 and ph < kh and pw < kw:
                # stride 1: correlate the padded gradient with the flipped, transposed kernel
                qh, qw = kh - 1 - ph, kw - 1 - pw
                gt = np.pad(g.transpose(1, 0, 2, 3), ((0, 0), (0, 0), (qh, qh), (qw, qw)))
                wf = np.ascontiguousarray(w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)).reshape(C, O * kh * kw)
                dx = (wf @ _gather(gt, kh, kw, 1, 1, H, W)).reshape(C, B, H, W).transpose(1, 0, 2, 3)
            else:
                dcols = (wm.T @ gm).reshape(C, kh, kw, B, Ho, Wo)
                dxt = np.zeros((C, B) + padded_hw, dtype=g.dtype)
                for i in range(kh):
                    for j in range(kw):
                        dxt[:, :, i:i + sh * Ho:sh, j:j + sw * Wo:sw] += dcols[:, i, j]
                dx = dxt[:, :, ph:ph + H, pw:pw + W].transpose(1, 0, 2, 3)
            dx = np.ascontiguousarray(dx)
        return (dx, dw, db) if b is not None else (dx, dw)

    parents = (x, w, b) if b is not None else (x, w)
    return apply_op("conv2d", y, parents, back)


def max_pool2d(x: Tensor, window=2) -> Tensor:
    """Non-overlapping max-pool; ragged edges are truncated (floor rule).

    The gradient goes to the first maximal element of each window.
    """
    kh, kw = _pair(window)
    if kh < 1 or kw < 1:
        raise ShapeError("empty pooling window")
    B, C, H, W = x.shape
    Ho, Wo = H // kh, W // kw
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"pool window {kh}x{kw} larger than input {H}x{W}")
    xd = x.data
    views = [xd[:, :, i:Ho * kh:kh, j:Wo * kw:kw] for i in range(kh) for j in range(kw)]
    y = views[0].copy()
    for v in views[1:]:
        np.maximum(y, v, out=y)

    def back(g):
        dx = np.zeros(x.shape, dtype=g.dtype)
        taken = np.zeros(y.shape, dtype=bool)
        for k, v in enumerate(views):
            hit = v == y
            hit &= ~taken
            taken |= hit
            i, j = divmod(k, kw)
            dx[:, :, i:Ho * kh:kh, j:Wo * kw:kw] = g * hit
        return (dx,)

    return apply_op("max_pool2d", y, (x,), back)


def pool(kind: str, x: Tensor, window=2) -> Tensor:
    if kind == "max":
        return max_pool2d(x, window)
    if kind == "global_avg":
        return global_avg_pool(x)
    raise ValueError(f"unknown pool kind {kind!r}")


def global_avg_pool(x: Tensor) -> Tensor:
    """[B, C, F, T] -> [B, C]."""
    return ad.reduce("mean", x, axes=(2, 3))


def dense(w: Tensor, b: Tensor | None, x: Tensor) -> Tensor:
    """Affine map of flattened features: x[B, D] @ w[D, K] + b[K]."""
    if x.ndim != 2:
        x = ad.reshape(x, (x.shape[0], -1))
    y = ad.matmul(x, w)
    return ad.add(y, b) if b is not None else y


def frequency_layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize along the frequency axis of each (sample, channel, frame).

    The affine parameters are per frequency bin, broadcast over batch,
    channel and time.
    """
    if x.ndim != 4:
        raise ShapeError(f"FLN expects [B, C, F, T], got {x.shape}")
    F = x.shape[2]
    if gamma.shape != (F,) or beta.shape != (F,):
        raise ShapeError(f"FLN parameters sized {gamma.shape[0]} for {F} frequency bins")
    B, C, _, T = x.shape
    xd = x.data
    # frequency-axis means as [1, F] @ [B*C, F, T] products (much faster than axis reductions)
    avg = np.full((1, F), 1.0 / F, dtype=xd.dtype)

    def fmean(a):
        return (avg @ a.reshape(B * C, F, T)).reshape(B, C, 1, T)

    xc = xd - fmean(xd)
    inv = 1.0 / np.sqrt(fmean(xc * xc) + xd.dtype.type(eps))
    xhat = xc * inv
    g4 = gamma.data.reshape(1, 1, F, 1)
    y = xhat * g4 + beta.data.reshape(1, 1, F, 1)

    def back(g):
        dgamma = np.einsum("bcft,bcft->f", g, xhat) if gamma.requires_grad else None
        dbeta = np.einsum("bcft->f", g) if beta.requires_grad else None
        dx = None
        if x.requires_grad:
            dxhat = g * g4
            dx = inv * (dxhat - fmean(dxhat) - xhat * fmean(dxhat * xhat))
        return (dx, dgamma, dbeta)

    return apply_op("fln", y, (x, gamma, beta), back)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    if logits.ndim != 2:
        raise ShapeError(f"logits must be [batch, K], got {logits.shape}")
    B, K = logits.shape
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != B or B < 1:
        raise ShapeError(f"{labels.shape[0]} labels for a batch of {B}")
    if labels.min() < 0 or labels.max() >= K:
        raise LabelError(f"label outside [0, {K})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.arange(B)
    loss = -logp[rows, labels].mean()
    dtype = logits.dtype

    def back(g):
        p = np.exp(logp)
        p[rows, labels] -= 1
        return (p * (g.reshape(()) / dtype.type(B)),)

    return apply_op("softmax_ce", np.asarray([loss], dtype=dtype), (logits,), back)


# ---------------------------------------------------------------- parameterized layers

class Layer:
    """Parameter holder; ``params`` maps local names to trainable tensors."""

    params: dict[str, Tensor]

    def named_parameters(self, prefix: str = ""):
        for name, p in self.params.items():
            yield prefix + name, p


def _param(arr: np.ndarray, dtype) -> Tensor:
    return Tensor(np.asarray(arr, dtype=dtype), requires_grad=True)


class Conv2D(Layer):
    def __init__(self, in_ch: int, out_ch: int, kernel=3, stride=1, padding=None,
                 rng: np.random.Generator | None = None, dtype=np.float32, init: str = "he"):
        kh, kw = _pair(kernel)
        self.stride = _pair(stride)
        self.padding = (kh // 2, kw // 2) if padding is None else _pair(padding)
        fan_in = in_ch * kh * kw
        if init == "he":
            rng = rng or np.random.default_rng(0)
            w = rng.standard_normal((out_ch, in_ch, kh, kw)) * np.sqrt(2.0 / fan_in)
        elif init == "zeros":
            w = np.zeros((out_ch, in_ch, kh, kw))
        else:
            raise ValueError(f"unknown init {init!r}")
        self.params = {"weight": _param(w, dtype), "bias": _param(np.zeros(out_ch), dtype)}

    @property
    def weight(self) -> Tensor:
        return self.params["weight"]

    @property
    def bias(self) -> Tensor:
        return self.params["bias"]

    def output_size(self, size: int, axis: int) -> int:
        k = self.weight.shape[2 + axis]
        return (size + 2 * self.padding[axis] - k) // self.stride[axis] + 1

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)


class FLN(Layer):
    def __init__(self, freq_bins: int, eps: float = 1e-5, dtype=np.float32):
        self.eps = eps
        self.params = {"gamma": _param(np.ones(freq_bins), dtype), "beta": _param(np.zeros(freq_bins), dtype)}

    def __call__(self, x: Tensor) -> Tensor:
        return frequency_layer_norm(x, self.params["gamma"], self.params["beta"], self.eps)


class FDYConv(Layer):
    """Frequency dynamic convolution.

    K basis kernels are evaluated as one stacked convolution; their outputs
    are mixed per frequency bin by attention weights computed from the
    time-averaged input through a pointwise (1x1) transform and a softmax
    over K at the given temperature.
    """

    def __init__(self, in_ch: int, out_ch: int, kernel=3, stride=1, padding=None, n_basis: int = 4,
                 temperature: float = 31.0, rng: np.random.Generator | None = None, dtype=np.float32):
        if n_basis < 1:
            raise ValueError("FDY needs at least one basis kernel")
        rng = rng or np.random.default_rng(0)
        self.n_basis = n_basis
        self.out_ch = out_ch
        self.temperature = float(temperature)
        self.basis = Conv2D(in_ch, n_basis * out_ch, kernel, stride, padding, rng=rng, dtype=dtype)
        att_w = rng.standard_normal((n_basis, in_ch, 1, 1)) * np.sqrt(1.0 / in_ch)
        self.params = {
            "weight": self.basis.params["weight"],
            "bias": self.basis.params["bias"],
            "att_weight": _param(att_w, dtype),
            "att_bias": _param(np.zeros(n_basis), dtype),
        }

    def attention(self, x: Tensor) -> Tensor:
        """Per-frequency mixing weights, shape [B, K, F]."""
        pooled = ad.reduce("mean", x, axes=3, keepdims=True)
        logits = conv2d(pooled, self.params["att_weight"], self.params["att_bias"])
        pi = ad.softmax(ad.scale(logits, 1.0 / self.temperature), axis=1)
        return ad.reshape(pi, pi.shape[:3])

    def __call__(self, x: Tensor) -> Tensor:
        y = self.basis(x)
        B, _, Fo, To = y.shape
        pi = self.attention(x)
        if pi.shape[2] != Fo:
            raise ShapeError(f"attention has {pi.shape[2]} bins, convolution output {Fo}")
        y5 = ad.reshape(y, (B, self.n_basis, self.out_ch, Fo, To))
        w5 = ad.reshape(pi, (B, self.n_basis, 1, Fo, 1))
        return ad.reduce("sum", ad.mul(y5, w5), axes=1)


class Dense(Layer):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator | None = None,
                 dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        w = rng.standard_normal((in_features, out_features)) * np.sqrt(1.0 / in_features)
        self.params = {"weight": _param(w, dtype), "bias": _param(np.zeros(out_features), dtype)}

    def __call__(self, x: Tensor) -> Tensor:
        return dense(self.params["weight"], self.params["bias"], x)


# ---------------------------------------------------------------- optimizer

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, params: Mapping[str, Tensor], grads: Mapping) -> Mapping[str, Tensor]:
    """One bias-corrected Adam update, in place on ``params``.

    ``grads`` may be keyed by parameter name or by the parameter tensor (as
    returned by :meth:`Tape.backward`); parameters without a gradient are
    updated with a zero gradient.
    """
    prepared = {}
    for name, p in params.items():
        g = grads.get(p) if p in grads else grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        prepared[name] = g
    state.t += 1
    t = state.t
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = prepared[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        step = (state.lr * (m / c1)) / (np.sqrt(v / c2) + state.eps)
        p.data -= step.astype(p.dtype, copy=False)
    return params


# ---------------------------------------------------------------- checkpoints

_MAGIC = b"CTLW"
_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def save_checkpoint(path, params: Mapping[str, Tensor | np.ndarray]) -> None:
    """Write named arrays in the ``CTLW`` little-endian record format."""
    parts = [_MAGIC, struct.pack("<H", _VERSION)]
    for name, value in params.items():
        arr = value.data if isinstance(value, Tensor) else np.asarray(value)
        code = _CODES.get(arr.dtype)
        if code is None:
            raise FormatError(f"unsupported dtype {arr.dtype} for {name}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != _MAGIC:
        raise FormatError(f"{path}: not a CTLW checkpoint")
    (version,) = struct.unpack_from("<H", buf, 4)
    if version != _VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    pos = 6
    out: dict[str, np.ndarray] = {}
    try:
        while pos < len(buf):
            (n,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + n].decode("utf-8")
            pos += n
            code, rank = struct.unpack_from("<BB", buf, pos)
            pos += 2
            dims = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            dt = _DTYPES[code]
            count = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(buf, dtype=dt, count=count, offset=pos).reshape(dims)
            pos += count * dt.itemsize
            out[name] = arr.astype(dt.newbyteorder("="))
    except (struct.error, KeyError, ValueError) as exc:
        raise FormatError(f"{path}: truncated or corrupt checkpoint") from exc
    return out
