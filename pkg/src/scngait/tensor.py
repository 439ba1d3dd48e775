"""Minimal reverse-mode autodiff over dense float arrays.

Only the operations the gait pipeline needs are provided; each op records a
backward rule on the active tape. Values are immutable once produced, so
replaying the tape in reverse execution order is a valid gradient schedule.

Deterministic subgradient conventions at kinks:
  - abs at exactly 0 -> 0
  - leaky_relu at exactly 0 -> the positive-side slope
  - max reductions / 2x2 pooling route ties to the first index (row-major)
  - even-count median splits the gradient equally over the two middle values
  - sqrt at exactly 0 -> 0
"""

from __future__ import annotations

import numpy as np


class DimensionError(ValueError):
    """Shape mismatch naming the offending axis."""


class EmptyReductionError(ValueError):
    """Reduction over an empty axis."""


class NumericError(FloatingPointError):
    """Non-finite value produced where finite values are required."""


REDUCE_MODES = ("mean", "max", "median")


# ---------------------------------------------------------------------------
# tape


class Tape:
    """Ordered record of op backward rules; one writer per tape."""

    def __init__(self):
        self._ops = []

    def record(self, backward_fn):
        self._ops.append(backward_fn)

    def __len__(self):
        return len(self._ops)

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False

    def backward(self, root: "Tensor", seed=None):
        """Accumulate gradients of ``root`` into every recorded input.

        ``seed`` defaults to ones of root's shape (the usual scalar-loss seed).
        Tensors that never receive an upstream gradient keep ``grad=None``,
        which downstream rules treat as an exact zero.
        """
        if seed is None:
            seed = np.ones_like(root.data)
        else:
            seed = np.asarray(seed, dtype=root.data.dtype)
            if seed.shape != root.data.shape:
                raise DimensionError(
                    f"seed shape {seed.shape} != root shape {root.data.shape}"
                )
        root._accumulate(seed)
        for fn in reversed(self._ops):
            fn()


_TAPE_STACK: list[Tape] = []


def active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


# ---------------------------------------------------------------------------
# tensor


class Tensor:
    """Dense n-d float array with an optional gradient accumulator.

    ``data`` is row-major float64 (or float32 when a reduced-precision run is
    configured). ``grad`` stays None until backward first touches it.
    """

    __slots__ = ("data", "grad", "requires_grad", "_grad_shared")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float64, np.float32):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._grad_shared = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None
        self._grad_shared = False

    def _accumulate(self, g, owned: bool = False):
        """Add an incoming gradient; copy-on-write when aliasing saves a pass.

        ``owned=True`` promises the caller hands over a freshly computed array
        of the right dtype that nobody else will touch, so it can be adopted
        without copying. Borrowed arrays (upstream grads, views) are aliased
        and only copied if a second contribution arrives.
        """
        if not self.requires_grad:
            return
        if self.grad is None:
            if owned and isinstance(g, np.ndarray) and g.dtype == self.data.dtype:
                self.grad = g
                self._grad_shared = False
            else:
                self.grad = np.asarray(g, dtype=self.data.dtype)
                self._grad_shared = True
        elif self._grad_shared:
            self.grad = self.grad + g
            self._grad_shared = False
        else:
            self.grad += g

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype.name})"


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data, inputs, backward_fn) -> Tensor:
    """Wrap op output; record backward only if some input wants gradients."""
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.record(lambda: backward_fn(out) if out.grad is not None else None)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward pass."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    try:
        data = a.data + b.data
    except ValueError:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} do not broadcast")

    def backward(out):
        a._accumulate(_unbroadcast(out.grad, a.data.shape))
        b._accumulate(_unbroadcast(out.grad, b.data.shape))

    return _result(data, (a, b), backward)


def sub(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    try:
        data = a.data - b.data
    except ValueError:
        raise DimensionError(f"sub: shapes {a.shape} and {b.shape} do not broadcast")

    def backward(out):
        a._accumulate(_unbroadcast(out.grad, a.data.shape))
        b._accumulate(-_unbroadcast(out.grad, b.data.shape), owned=True)

    return _result(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    try:
        data = a.data * b.data
    except ValueError:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} do not broadcast")

    def backward(out):
        a._accumulate(_unbroadcast(out.grad * b.data, a.data.shape), owned=True)
        b._accumulate(_unbroadcast(out.grad * a.data, b.data.shape), owned=True)

    return _result(data, (a, b), backward)


def scalar_mul(x: Tensor, w) -> Tensor:
    """x scaled by w; w may be a python float or a trainable 0-d tensor."""
    return mul(x, w)


def neg(x: Tensor) -> Tensor:
    def backward(out):
        x._accumulate(-out.grad, owned=True)

    return _result(-x.data, (x,), backward)


def absolute(x: Tensor) -> Tensor:
    sign = np.sign(x.data)

    def backward(out):
        x._accumulate(out.grad * sign, owned=True)

    return _result(np.abs(x.data), (x,), backward)


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    neg = x.data < 0
    data = x.data.copy()
    np.multiply(data, slope, where=neg, out=data)

    def backward(out):
        g = out.grad.copy()
        np.multiply(g, slope, where=neg, out=g)
        x._accumulate(g, owned=True)

    return _result(data, (x,), backward)


def hinge(x: Tensor) -> Tensor:
    """max(x, 0); derivative 0 on the negative side."""
    return leaky_relu(x, 0.0)


def sqrt(x: Tensor) -> Tensor:
    data = np.sqrt(x.data)

    def backward(out):
        with np.errstate(divide="ignore"):
            d = np.where(data > 0, 0.5 / np.where(data > 0, data, 1.0), 0.0)
        x._accumulate(out.grad * d, owned=True)

    return _result(data, (x,), backward)


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max; ties route the gradient to the first argument."""
    if a.shape != b.shape:
        raise DimensionError(f"maximum: shapes {a.shape} and {b.shape} differ")
    take_a = a.data >= b.data

    def backward(out):
        a._accumulate(out.grad * take_a, owned=True)
        b._accumulate(out.grad * ~take_a, owned=True)

    return _result(np.where(take_a, a.data, b.data), (a, b), backward)


# ---------------------------------------------------------------------------
# shape ops


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)

    def backward(out):
        x._accumulate(out.grad.reshape(x.data.shape))

    return _result(x.data.reshape(shape), (x,), backward)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    if not 0 <= axis < x.data.ndim:
        raise DimensionError(f"narrow: axis {axis} out of range for rank {x.data.ndim}")
    if start < 0 or start + length > x.data.shape[axis]:
        raise DimensionError(
            f"narrow: [{start}, {start + length}) exceeds axis {axis} of size {x.data.shape[axis]}"
        )
    idx = tuple(slice(None) if i != axis else slice(start, start + length) for i in range(x.data.ndim))

    def backward(out):
        if x.requires_grad:
            g = np.zeros_like(x.data)
            g[idx] = out.grad
            x._accumulate(g, owned=True)

    return _result(x.data[idx].copy(), (x,), backward)


def split_frames(x: Tensor, lengths) -> list:
    """Split along axis 0 into contiguous chunks; one fused backward pass.

    Equivalent to a narrow per chunk, but the gradient buffer for the source
    is assembled once from all children instead of once per child.
    """
    lengths = [int(n) for n in lengths]
    if sum(lengths) != x.data.shape[0]:
        raise DimensionError(
            f"split_frames: lengths {lengths} do not sum to axis 0 size {x.data.shape[0]}"
        )
    tape = active_tape()
    needs = tape is not None and x.requires_grad
    outs = []
    offset = 0
    for n in lengths:
        outs.append(Tensor(x.data[offset:offset + n].copy(), requires_grad=needs))
        offset += n

    if needs:
        def backward():
            if not any(o.grad is not None for o in outs):
                return
            g = np.zeros_like(x.data)
            off = 0
            for o, n in zip(outs, lengths):
                if o.grad is not None:
                    g[off:off + n] = o.grad
                off += n
            x._accumulate(g, owned=True)

        tape.record(backward)
    return outs


def concat(parts, axis: int = 0) -> Tensor:
    parts = list(parts)
    if not parts:
        raise DimensionError("concat: empty input list")
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]

    def backward(out):
        offset = 0
        for p, sz in zip(parts, sizes):
            idx = tuple(
                slice(None) if i != axis else slice(offset, offset + sz)
                for i in range(out.grad.ndim)
            )
            p._accumulate(out.grad[idx])
            offset += sz

    return _result(data, tuple(parts), backward)


# ---------------------------------------------------------------------------
# reductions


def sum_all(x: Tensor) -> Tensor:
    def backward(out):
        x._accumulate(np.full_like(x.data, out.grad.reshape(())), owned=True)

    return _result(np.asarray(x.data.sum(), dtype=x.data.dtype), (x,), backward)


def sum_axis(x: Tensor, axis: int) -> Tensor:
    def backward(out):
        x._accumulate(
            np.repeat(np.expand_dims(out.grad, axis), x.data.shape[axis], axis=axis),
            owned=True,
        )

    return _result(x.data.sum(axis=axis), (x,), backward)


def reduce(x: Tensor, axis: int, mode: str) -> Tensor:
    """Remove one axis by mean, max, or median.

    Median follows the middle order statistic; for an even count it averages
    the two middle values (and splits their gradient equally).
    """
    if mode not in REDUCE_MODES:
        raise ValueError(f"reduce: unknown mode {mode!r}")
    if not 0 <= axis < x.data.ndim:
        raise DimensionError(f"reduce: axis {axis} out of range for rank {x.data.ndim}")
    n = x.data.shape[axis]
    if n == 0:
        raise EmptyReductionError(f"reduce: axis {axis} is empty")

    if mode == "mean":
        data = x.data.mean(axis=axis)

        def backward(out):
            g = np.expand_dims(out.grad, axis) / n
            x._accumulate(np.broadcast_to(g, x.data.shape))

    elif mode == "max":
        data = x.data.max(axis=axis)
        arg = np.argmax(x.data, axis=axis)

        def backward(out):
            g = np.zeros_like(x.data)
            np.put_along_axis(g, np.expand_dims(arg, axis), np.expand_dims(out.grad, axis), axis)
            x._accumulate(g, owned=True)

    else:  # median
        order = np.argsort(x.data, axis=axis, kind="stable")
        i_lo = (n - 1) // 2
        i_hi = n // 2
        lo_idx = np.take(order, [i_lo], axis=axis)
        hi_idx = np.take(order, [i_hi], axis=axis)
        lo_val = np.take_along_axis(x.data, lo_idx, axis=axis)
        hi_val = np.take_along_axis(x.data, hi_idx, axis=axis)
        data = ((lo_val + hi_val) / 2.0).squeeze(axis=axis)

        def backward(out):
            g = np.zeros_like(x.data)
            up = np.expand_dims(out.grad, axis)
            if i_lo == i_hi:
                np.put_along_axis(g, lo_idx, up, axis)
            else:
                np.put_along_axis(g, lo_idx, up / 2.0, axis)
                np.put_along_axis(g, hi_idx, up / 2.0, axis)
            x._accumulate(g, owned=True)

    return _result(data, (x,), backward)


def transpose2d(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise DimensionError("transpose2d: expects a rank-2 tensor")

    def backward(out):
        x._accumulate(out.grad.T)

    return _result(np.ascontiguousarray(x.data.T), (x,), backward)


# ---------------------------------------------------------------------------
# matmul


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError("matmul: expects rank-2 operands")
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(
            f"matmul: inner axes differ ({a.data.shape[1]} vs {b.data.shape[0]})"
        )

    def backward(out):
        if a.requires_grad:
            a._accumulate(out.grad @ b.data.T, owned=True)
        if b.requires_grad:
            b._accumulate(a.data.T @ out.grad, owned=True)

    return _result(a.data @ b.data, (a, b), backward)


# ---------------------------------------------------------------------------
# convolution

_WORKSPACES: dict = {}


def _acquire(shape, dtype) -> np.ndarray:
    """Reusable scratch buffer; avoids page-fault cost on hot conv shapes."""
    key = (shape, np.dtype(dtype).name)
    stack = _WORKSPACES.setdefault(key, [])
    return stack.pop() if stack else np.empty(shape, dtype=dtype)


def _release(arr: np.ndarray):
    _WORKSPACES.setdefault((arr.shape, arr.dtype.name), []).append(arr)


def conv2d_reference(x: np.ndarray, k: np.ndarray, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Scalar-loop 2d correlation, kept as the in-repo oracle for conv2d."""
    C_in, H, W = x.shape
    C_out, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    out = np.zeros((C_out, Ho, Wo), dtype=x.dtype)
    for o in range(C_out):
        for i in range(Ho):
            for j in range(Wo):
                acc = 0.0
                for c in range(C_in):
                    for di in range(kh):
                        for dj in range(kw):
                            acc += xp[c, i * stride + di, j * stride + dj] * k[o, c, di, dj]
                out[o, i, j] = acc
    return out


def _conv_check(xs, ks, stride, padding):
    N, C, H, W = xs
    O, Ck, kh, kw = ks
    if Ck != C:
        raise DimensionError(f"conv2d: input channels {C} != kernel channels {Ck} (axis 1)")
    if stride < 1:
        raise DimensionError(f"conv2d: stride must be >= 1, got {stride}")
    if kh > H + 2 * padding or kw > W + 2 * padding:
        raise DimensionError(
            f"conv2d: kernel {kh}x{kw} exceeds padded input {H + 2 * padding}x{W + 2 * padding}"
        )


def conv2d(x: Tensor, k: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2d correlation over [C,H,W] or a frame stack [n,C,H,W].

    Output spatial size is floor((dim + 2*padding - kdim)/stride) + 1. Linear
    in both arguments. Implemented by patch extraction into a matrix-multiply
    layout; ``conv2d_reference`` is the scalar oracle it is tested against.
    """
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or k.data.ndim != 4:
        raise DimensionError("conv2d: expects [n,C,H,W] or [C,H,W] input and [O,C,kh,kw] kernel")
    _conv_check(xd.shape, k.data.shape, stride, padding)
    N, C, H, W = xd.shape
    O, _, kh, kw = k.data.shape

    tape = active_tape()
    needs_grad = tape is not None and (x.requires_grad or k.requires_grad)
    if kh == 1 and kw == 1 and stride == 1 and padding == 0:
        out, ctx = _conv_1x1_fwd(xd, k.data)
        bwd = _conv_1x1_bwd
    elif stride == 1 and kh == kw and kh == 2 * padding + 1:
        out, ctx = _conv_same_fwd(xd, k.data)
        bwd = _conv_same_bwd
        if not needs_grad:
            _release(ctx[0])  # patch workspace is only needed for backward
    else:
        out, ctx = _conv_im2col_fwd(xd, k.data, stride, padding)
        bwd = _conv_im2col_bwd
    if squeeze:
        out = out[0]

    def backward(o):
        g = o.grad[None] if squeeze else o.grad
        gx, gk = bwd(g, ctx, need_x=x.requires_grad, need_k=k.requires_grad)
        if gx is not None:
            x._accumulate(gx[0] if squeeze else gx, owned=not squeeze)
        if gk is not None:
            k._accumulate(gk, owned=True)

    return _result(out, (x, k), backward)


def _same_cols(xd, kh, pad):
    """Patch matrix [C, kh*kw, N*P] for a stride-1 'same' conv.

    Input is copied once into a channel-major zero-padded grid; each tap is
    then a contiguous shifted slice of the flattened grid. The zero border
    absorbs every shifted read that crosses a row or frame boundary, so patch
    extraction is pure memcpy.
    """
    N, C, H, W = xd.shape
    Hp, Wp = H + 2 * pad, W + 2 * pad
    P = Hp * Wp
    xc = _acquire((C, N, Hp, Wp), xd.dtype)
    xc.fill(0.0)
    xc[:, :, pad:pad + H, pad:pad + W] = xd.transpose(1, 0, 2, 3)
    xf = xc.reshape(C, N * P)
    T = kh * kh
    cols = _acquire((C, T, N * P), xd.dtype)
    t = 0
    for dy in range(kh):
        for dx in range(kh):
            off = (dy - pad) * Wp + (dx - pad)
            s, e = max(0, -off), N * P - max(0, off)
            dst = cols[:, t]
            if s > 0:
                dst[:, :s] = 0.0
            if e < N * P:
                dst[:, e:] = 0.0
            dst[:, s:e] = xf[:, s + off:e + off]
            t += 1
    _release(xc)
    return cols


def _same_gemm_crop(cols, k2, N, O, H, W, pad):
    """(cols^T @ k2^T) reshaped and cropped back to [N, O, H, W].

    The tall-times-skinny orientation is markedly faster here than the
    [O x CT] @ [CT x NP] form.
    """
    Hp, Wp = H + 2 * pad, W + 2 * pad
    CT = cols.shape[0] * cols.shape[1]
    out_t = cols.reshape(CT, -1).T @ k2.T  # [N*P, O]
    out = out_t.reshape(N, Hp, Wp, O)[:, pad:pad + H, pad:pad + W, :]
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _conv_same_fwd(xd, kd):
    N, C, H, W = xd.shape
    O, _, kh, kw = kd.shape
    pad = kh // 2
    cols = _same_cols(xd, kh, pad)
    out = _same_gemm_crop(cols, kd.reshape(O, C * kh * kw), N, O, H, W, pad)
    return out, (cols, kd, (N, C, H, W, pad))


def _conv_same_bwd(g, ctx, need_x, need_k):
    cols, kd, (N, C, H, W, pad) = ctx
    O, _, kh, kw = kd.shape
    Hp, Wp = H + 2 * pad, W + 2 * pad
    P = Hp * Wp
    gk = gx = None
    gp = _acquire((O, N, Hp, Wp), g.dtype)
    gp.fill(0.0)
    gp[:, :, pad:pad + H, pad:pad + W] = g.transpose(1, 0, 2, 3)
    g2 = gp.reshape(O, N * P)
    if need_k:
        gk = (cols.reshape(C * kh * kw, N * P) @ g2.T).T.reshape(O, C, kh, kw)
        gk = np.ascontiguousarray(gk)
    _release(cols)
    if need_x:
        # grad wrt input of a stride-1 'same' conv is itself a 'same' conv of
        # the upstream gradient with the spatially flipped, channel-swapped
        # kernel; this reuses the fast patch-GEMM path
        kflip = np.ascontiguousarray(kd.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
        gcols = _acquire((O, kh * kw, N * P), g.dtype)
        t = 0
        for dy in range(kh):
            for dx in range(kh):
                off = (dy - pad) * Wp + (dx - pad)
                s, e = max(0, -off), N * P - max(0, off)
                dst = gcols[:, t]
                if s > 0:
                    dst[:, :s] = 0.0
                if e < N * P:
                    dst[:, e:] = 0.0
                dst[:, s:e] = g2[:, s + off:e + off]
                t += 1
        gx = _same_gemm_crop(gcols, kflip.reshape(C, O * kh * kw), N, C, H, W, pad)
        _release(gcols)
    _release(gp)
    return gx, gk


def _conv_1x1_fwd(xd, kd):
    N, C, H, W = xd.shape
    O = kd.shape[0]
    xf = xd.reshape(N, C, H * W)
    out = np.matmul(kd.reshape(O, C), xf).reshape(N, O, H, W)
    return out, (xd, kd)


def _conv_1x1_bwd(g, ctx, need_x, need_k):
    xd, kd = ctx
    N, C, H, W = xd.shape
    O = kd.shape[0]
    g2 = g.reshape(N, O, H * W)
    xf = xd.reshape(N, C, H * W)
    gx = gk = None
    if need_k:
        gk = np.einsum("nop,ncp->oc", g2, xf, optimize=True).reshape(O, C, 1, 1)
    if need_x:
        gx = np.matmul(kd.reshape(O, C).T, g2).reshape(N, C, H, W)
    return gx, gk


def _conv_im2col_fwd(xd, kd, stride, padding):
    """General strided/padded path via gathered patches (cold shapes only)."""
    N, C, H, W = xd.shape
    O, _, kh, kw = kd.shape
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    sw = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    sw = sw[:, :, ::stride, ::stride]
    Ho, Wo = sw.shape[2], sw.shape[3]
    cols = np.ascontiguousarray(sw.transpose(0, 2, 3, 1, 4, 5)).reshape(N * Ho * Wo, C * kh * kw)
    out = (cols @ kd.reshape(O, -1).T).reshape(N, Ho, Wo, O).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), (cols, kd, (N, C, H, W, stride, padding, Ho, Wo))


def _conv_im2col_bwd(g, ctx, need_x, need_k):
    cols, kd, (N, C, H, W, stride, padding, Ho, Wo) = ctx
    O, _, kh, kw = kd.shape
    g2 = g.transpose(0, 2, 3, 1).reshape(-1, O)
    gx = gk = None
    if need_k:
        gk = (cols.T @ g2).T.reshape(O, C, kh, kw)
    if need_x:
        gcols = (g2 @ kd.reshape(O, -1)).reshape(N, Ho, Wo, C, kh, kw)
        gxp = np.zeros((N, C, H + 2 * padding, W + 2 * padding), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += (
                    gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                )
        gx = gxp[:, :, padding:padding + H, padding:padding + W]
    return gx, gk


def conv3d_t3(x: Tensor, k: Tensor) -> Tensor:
    """Temporal 3x1x1 conv over a frame stack [n,C,H,W], zero-padded 1.

    Output shape equals input shape; position t mixes frames t-1, t, t+1 with
    zeros beyond the ends. Kernel is [C,C,3,1,1]: tap 0 weights the earlier
    frame, tap 1 the current one, tap 2 the later one.
    """
    if x.data.ndim != 4:
        raise DimensionError("conv3d_t3: expects [n,C,H,W] input")
    if k.data.ndim != 5 or k.data.shape[2:] != (3, 1, 1):
        raise DimensionError("conv3d_t3: kernel must be [C,C,3,1,1]")
    n, C, H, W = x.data.shape
    if k.data.shape[0] != C or k.data.shape[1] != C:
        raise DimensionError(
            f"conv3d_t3: channel mismatch, input C={C} vs kernel {k.data.shape[:2]} (axis 1)"
        )
    kt = k.data.reshape(C, C, 3)
    xf = x.data.reshape(n, C, H * W)
    out = np.matmul(kt[:, :, 1], xf)
    if n > 1:
        out[1:] += np.matmul(kt[:, :, 0], xf[:-1])
        out[:-1] += np.matmul(kt[:, :, 2], xf[1:])

    def backward(o):
        g = o.grad.reshape(n, C, H * W)
        if x.requires_grad:
            gx = np.matmul(kt[:, :, 1].T, g)
            if n > 1:
                gx[:-1] += np.matmul(kt[:, :, 0].T, g[1:])
                gx[1:] += np.matmul(kt[:, :, 2].T, g[:-1])
            x._accumulate(gx.reshape(n, C, H, W), owned=True)
        if k.requires_grad:
            gk = np.zeros((C, C, 3), dtype=x.data.dtype)
            gk[:, :, 1] = np.einsum("nop,ncp->oc", g, xf, optimize=True)
            if n > 1:
                gk[:, :, 0] = np.einsum("nop,ncp->oc", g[1:], xf[:-1], optimize=True)
                gk[:, :, 2] = np.einsum("nop,ncp->oc", g[:-1], xf[1:], optimize=True)
            k._accumulate(gk.reshape(C, C, 3, 1, 1), owned=True)

    return _result(out.reshape(n, C, H, W), (x, k), backward)


def max_pool2x2(x: Tensor) -> Tensor:
    """2x2 max pooling; gradient routes to the first (row-major) argmax.

    Works on strided quarter-views of the input, so no block gather is built.
    """
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    N, C, H, W = xd.shape
    if H % 2 or W % 2:
        raise DimensionError(f"max_pool2x2: spatial dims must be even, got {H}x{W}")
    quarters = (
        xd[:, :, 0::2, 0::2], xd[:, :, 0::2, 1::2],
        xd[:, :, 1::2, 0::2], xd[:, :, 1::2, 1::2],
    )
    out = np.maximum(np.maximum(quarters[0], quarters[1]),
                     np.maximum(quarters[2], quarters[3]))

    def backward(o):
        g = o.grad[None] if squeeze else o.grad
        gx = np.zeros_like(xd)
        taken = np.zeros(out.shape, dtype=bool)
        targets = (
            gx[:, :, 0::2, 0::2], gx[:, :, 0::2, 1::2],
            gx[:, :, 1::2, 0::2], gx[:, :, 1::2, 1::2],
        )
        for q, t in zip(quarters, targets):  # row-major order fixes tie winners
            win = (q == out) & ~taken
            np.copyto(t, g, where=win)
            taken |= win
        x._accumulate(gx[0] if squeeze else gx, owned=not squeeze)

    return _result(out[0] if squeeze else out, (x,), backward)


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(fn, x: Tensor, h: float = 1e-5, coords=None, rng=None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` maps a tensor to a scalar tensor. Inputs should be sampled away
    from kinks (abs/leaky_relu at 0, pooling and median ties). When ``coords``
    is an int, that many coordinates are sampled (seeded by ``rng``) instead
    of sweeping all of them; an explicit index list is also accepted.

    Raises NumericError (with the coordinate index) if any probe produces a
    non-finite value.
    """
    x64 = Tensor(x.data.astype(np.float64, copy=True), requires_grad=True)
    with Tape() as tape:
        out = fn(x64)
        if out.data.size != 1:
            raise DimensionError("grad_check: fn must return a scalar")
        tape.backward(out)
    analytic = x64.grad if x64.grad is not None else np.zeros_like(x64.data)
    if not np.isfinite(out.data).all():
        raise NumericError("grad_check: non-finite output at base point")

    flat = x64.data.reshape(-1)
    if coords is None:
        idxs = range(flat.size)
    elif isinstance(coords, int):
        r = rng if rng is not None else np.random.default_rng(0)
        idxs = r.choice(flat.size, size=min(coords, flat.size), replace=False)
    else:
        idxs = coords

    def eval_at(vec):
        t = Tensor(vec.reshape(x64.data.shape))
        val = float(fn(t).data.reshape(()))
        return val

    a_flat = analytic.reshape(-1)
    max_rel = 0.0
    for i in idxs:
        base = flat[i]
        probe = flat.copy()
        probe[i] = base + h
        f_plus = eval_at(probe)
        probe[i] = base - h
        f_minus = eval_at(probe)
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NumericError(f"grad_check: non-finite probe at coordinate {i}")
        numeric = (f_plus - f_minus) / (2.0 * h)
        denom = max(abs(a_flat[i]), abs(numeric), 1e-8)
        max_rel = max(max_rel, abs(a_flat[i] - numeric) / denom)
    return max_rel


# ---------------------------------------------------------------------------
# snapshot format (golden files, checkpoints)


def save_snapshot(fh, array: np.ndarray):
    """Write one tensor: a 'shape: d0 d1 ...' header line then <f8 payload."""
    dims = " ".join(str(int(d)) for d in array.shape)
    fh.write(f"shape: {dims}\n".encode("ascii"))
    fh.write(np.ascontiguousarray(array, dtype="<f8").tobytes())


def load_snapshot(fh) -> np.ndarray:
    header = bytearray()
    while True:
        ch = fh.read(1)
        if not ch:
            raise ValueError("snapshot: truncated header")
        if ch == b"\n":
            break
        header.extend(ch)
    text = header.decode("ascii")
    if not text.startswith("shape:"):
        raise ValueError(f"snapshot: bad header {text!r}")
    shape = tuple(int(t) for t in text[len("shape:"):].split())
    count = int(np.prod(shape)) if shape else 1
    payload = fh.read(count * 8)
    if len(payload) != count * 8:
        raise ValueError("snapshot: truncated payload")
    return np.frombuffer(payload, dtype="<f8").reshape(shape).copy()
