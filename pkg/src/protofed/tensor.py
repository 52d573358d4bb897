"""Dense arrays with reverse-mode differentiation.

Every value flowing through a model is a :class:`Tensor`: a numpy array plus
an optional gradient buffer and a backward closure linking it to the tensors
it was computed from.  Calling ``backward()`` on a scalar walks the graph in
reverse insertion order, which makes gradient accumulation bitwise
reproducible run to run.

Batched image data uses the batch x channels x height x width layout.
Double precision is the default; single precision is opt-in and not
supported by the finite-difference checker.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, NumericError

# Above this many multiply-accumulates conv2d/linear switch from the
# sequential accumulation path (bitwise identical to a naive loop) to a
# GEMM path.  The switch is a pure function of the input shapes, so outputs
# stay deterministic.
_SEQ_MAC_LIMIT = 1 << 20

# thread-local so a no_grad evaluation in one worker cannot disable graph
# construction in another worker's training step
_state = threading.local()


def _grad_on() -> bool:
    return getattr(_state, "grad_enabled", True)


class no_grad:
    """Context manager that skips graph construction (evaluation mode)."""

    def __enter__(self):
        self._prev = _grad_on()
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


class Tensor:
    """A numpy array paired with an accumulated gradient of the same shape.

    Leaf tensors created with ``trainable=True`` receive gradients and are
    the only tensors an optimizer may update.  Non-leaf tensors carry the
    backward closure of the operation that produced them.
    """

    __slots__ = ("data", "grad", "parents", "_backward", "trainable", "name")

    def __init__(self, data, parents=(), backward=None, trainable=False, name=None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data, dtype=np.float64)
        self.grad = None
        self.parents = tuple(parents)
        self._backward = backward
        self.trainable = trainable
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def requires_grad(self) -> bool:
        return self.trainable or bool(self.parents)

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self, seed=None):
        """Reverse-mode pass from this tensor, in fixed topological order."""
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            # push parents reversed so they expand in insertion order
            for p in reversed(node.parents):
                if id(p) not in visited:
                    stack.append((p, False))
        if seed is None:
            seed = np.ones_like(self.data)
        self.accumulate(seed)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, trainable={self.trainable})"


def _make(data, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap an op result, dropping the graph when no input needs gradients."""
    if _grad_on() and any(p.requires_grad for p in parents):
        return Tensor(data, parents=parents, backward=backward)
    return Tensor(data)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype if dtype is not None else np.float64)
    return Tensor(arr)


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------


def _window_view(x: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """Strided (B, OH, OW, C, kh, kw) view over a padded BCHW array."""
    b, c, _, _ = x.shape
    sb, sc, sh, sw = x.strides
    return np.lib.stride_tricks.as_strided(
        x, (b, oh, ow, c, kh, kw), (sb, sh * stride, sw * stride, sc, sh, sw)
    )


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    view = _window_view(x, kh, kw, stride, oh, ow)
    b = x.shape[0]
    return np.ascontiguousarray(view).reshape(b, oh, ow, -1)


def _col2im(dcols: np.ndarray, shape, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """Scatter-add (B, OH, OW, C, kh, kw) gradients back onto the padded input."""
    dx = np.zeros(shape, dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += (
                dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    return dx


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation over BCHW input with an (out, in, kh, kw) kernel."""
    if stride < 1 or padding < 0:
        raise ConfigurationError(f"conv2d: stride={stride}, padding={padding} out of range")
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ConfigurationError(
            f"conv2d: expected 4-d input and kernel, got {x.data.shape} and {kernel.data.shape}"
        )
    b, cin, h, w = x.data.shape
    cout, kcin, kh, kw = kernel.data.shape
    if kcin != cin:
        raise ConfigurationError(
            f"conv2d: kernel expects {kcin} input channels, input has {cin}"
        )
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ConfigurationError(
            f"conv2d: kernel {kh}x{kw} does not fit input {h}x{w} with padding {padding}"
        )
    if bias is not None and bias.data.shape != (cout,):
        raise ConfigurationError(
            f"conv2d: bias shape {bias.data.shape} does not match {cout} output channels"
        )

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    macs = b * cout * oh * ow * cin * kh * kw
    if macs <= _SEQ_MAC_LIMIT:
        # Sequential accumulation in (cin, kh, kw) order: bitwise identical
        # to a naive nested-loop evaluation.
        out = np.zeros((b, cout, oh, ow), dtype=x.data.dtype)
        if bias is not None:
            out += bias.data[None, :, None, None]
        for ci in range(cin):
            for i in range(kh):
                for j in range(kw):
                    patch = xp[:, ci, i : i + stride * oh : stride, j : j + stride * ow : stride]
                    out += patch[:, None, :, :] * kernel.data[None, :, ci, i, j, None, None]
    else:
        cols = _im2col(xp, kh, kw, stride, oh, ow)
        kmat = kernel.data.reshape(cout, -1)
        out = np.ascontiguousarray(
            (cols.reshape(-1, kmat.shape[1]) @ kmat.T).reshape(b, oh, ow, cout).transpose(0, 3, 1, 2)
        )
        if bias is not None:
            out += bias.data[None, :, None, None]

    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def backward(g: np.ndarray):
        kmat = kernel.data.reshape(cout, -1)
        if x.requires_grad:
            gmat = g.transpose(0, 2, 3, 1).reshape(-1, cout)
            dcols = (gmat @ kmat).reshape(b, oh, ow, cin, kh, kw)
            dxp = _col2im(dcols, xp.shape, kh, kw, stride, oh, ow)
            if padding:
                dxp = dxp[:, :, padding : padding + h, padding : padding + w]
            x.accumulate(dxp)
        if kernel.requires_grad:
            cols = _im2col(xp, kh, kw, stride, oh, ow)
            gmat = g.transpose(0, 2, 3, 1).reshape(-1, cout)
            dk = (gmat.T @ cols.reshape(-1, kmat.shape[1])).reshape(kernel.data.shape)
            kernel.accumulate(dk)
        if bias is not None and bias.requires_grad:
            bias.accumulate(g.sum(axis=(0, 2, 3)))

    return _make(out, parents, backward)


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x); subgradient at 0 is 0."""
    out = np.maximum(x.data, 0.0)

    def backward(g: np.ndarray):
        if x.requires_grad:
            x.accumulate(g * (x.data > 0))

    return _make(out, (x,), backward)


def maxpool2d(x: Tensor, window: int, stride: int) -> Tensor:
    """Per-window spatial maximum; ties route to the first element in scan order."""
    if window < 1 or stride < 1:
        raise ConfigurationError(f"maxpool2d: window={window}, stride={stride} out of range")
    b, c, h, w = x.data.shape
    if h < window or w < window:
        raise ConfigurationError(
            f"maxpool2d: window {window} exceeds spatial extents {h}x{w}"
        )
    oh = (h - window) // stride + 1
    ow = (w - window) // stride + 1
    wins = np.ascontiguousarray(
        _window_view(x.data, window, window, stride, oh, ow)
    ).reshape(b, oh, ow, c, window * window)
    idx = np.argmax(wins, axis=-1)  # first maximum in row-major window order
    out = np.take_along_axis(wins, idx[..., None], axis=-1)[..., 0].transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)

    def backward(g: np.ndarray):
        if not x.requires_grad:
            return
        gw = g.transpose(0, 2, 3, 1)  # (B, OH, OW, C)
        if stride == window and h == oh * window and w == ow * window:
            flat = np.zeros((b, oh, ow, c, window * window), dtype=g.dtype)
            np.put_along_axis(flat, idx[..., None], gw[..., None], axis=-1)
            dx = (
                flat.reshape(b, oh, ow, c, window, window)
                .transpose(0, 3, 1, 4, 2, 5)
                .reshape(b, c, h, w)
            )
        else:
            dx = np.zeros_like(x.data)
            bi, oi, oj, ci = np.indices(idx.shape, sparse=False)
            ih = oi * stride + idx // window
            iw = oj * stride + idx % window
            np.add.at(dx, (bi, ci, ih, iw), gw)
        x.accumulate(dx)

    return _make(out, (x,), backward)


def linear(x: Tensor, weights: Tensor) -> Tensor:
    """Matrix product of a (batch, m) input with an (m, c) weight matrix."""
    if x.data.ndim != 2 or weights.data.ndim != 2:
        raise ConfigurationError(
            f"linear: expected 2-d operands, got {x.data.shape} and {weights.data.shape}"
        )
    b, m = x.data.shape
    mw, c = weights.data.shape
    if m != mw:
        raise ConfigurationError(f"linear: inner extents differ, {m} vs {mw}")
    if b * m * c <= _SEQ_MAC_LIMIT:
        out = np.zeros((b, c), dtype=x.data.dtype)
        for k in range(m):
            out += x.data[:, k : k + 1] * weights.data[k]
    else:
        out = x.data @ weights.data

    def backward(g: np.ndarray):
        if x.requires_grad:
            x.accumulate(g @ weights.data.T)
        if weights.requires_grad:
            weights.accumulate(x.data.T @ g)

    return _make(out, (x, weights), backward)


def _sliding_windows(feature: np.ndarray, th: int, tw: int):
    """im2col windows plus output extents for a stride-1 sliding comparison."""
    b, d, h, w = feature.shape
    if th > h or tw > w:
        raise ConfigurationError(
            f"sliding distance: template {th}x{tw} exceeds feature {h}x{w}"
        )
    oh = h - th + 1
    ow = w - tw + 1
    return _im2col(feature, th, tw, 1, oh, ow), oh, ow  # (B, OH, OW, D*th*tw)


def sq_l2_maps(feature: Tensor, templates: Tensor) -> Tensor:
    """Squared-distance maps of (m, D, h, w) templates slid over a BCHW feature.

    Returns (batch, m, H-h+1, W-w+1); each entry sums squared differences
    over one window, hence is >= 0 and exactly 0 where window == template.
    """
    b, d, h, w = feature.data.shape
    m, td, th, tw = templates.data.shape
    if td != d:
        raise ConfigurationError(f"sliding distance: template depth {td} != feature depth {d}")
    cols, oh, ow = _sliding_windows(feature.data, th, tw)
    tmat = templates.data.reshape(m, -1)
    diff = cols[:, None, :, :, :] - tmat[None, :, None, None, :]  # (B, m, OH, OW, K)
    out = np.einsum("bmijk,bmijk->bmij", diff, diff)

    def backward(g: np.ndarray):
        dd = 2.0 * diff * g[..., None]
        if feature.requires_grad:
            dcols = dd.sum(axis=1).reshape(b, oh, ow, d, th, tw)
            feature.accumulate(_col2im(dcols, feature.data.shape, th, tw, 1, oh, ow))
        if templates.requires_grad:
            templates.accumulate(-dd.sum(axis=(0, 2, 3)).reshape(templates.data.shape))

    return _make(out, (feature, templates), backward)


def sliding_sq_l2(feature: Tensor, template: Tensor) -> Tensor:
    """Squared L2 distance of one (D, h, w) template against every window."""
    if template.data.ndim != 3:
        raise ConfigurationError(
            f"sliding_sq_l2: expected (depth, h, w) template, got {template.data.shape}"
        )
    b, d, h, w = feature.data.shape
    td, th, tw = template.data.shape
    if td != d:
        raise ConfigurationError(f"sliding_sq_l2: template depth {td} != feature depth {d}")
    cols, oh, ow = _sliding_windows(feature.data, th, tw)
    diff = cols - template.data.reshape(-1)[None, None, None, :]  # (B, OH, OW, K)
    out = np.einsum("bijk,bijk->bij", diff, diff)

    def backward(g: np.ndarray):
        dd = 2.0 * diff * g[..., None]
        if feature.requires_grad:
            dcols = dd.reshape(b, oh, ow, d, th, tw)
            feature.accumulate(_col2im(dcols, feature.data.shape, th, tw, 1, oh, ow))
        if template.requires_grad:
            template.accumulate(-dd.sum(axis=(0, 1, 2)).reshape(template.data.shape))

    return _make(out, (feature, template), backward)


def spatial_min(x: Tensor) -> Tensor:
    """Minimum over the two trailing axes; gradient routes to the first argmin."""
    lead = x.data.shape[:-2]
    hw = x.data.shape[-2] * x.data.shape[-1]
    flat = x.data.reshape(*lead, hw)
    idx = np.argmin(flat, axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def backward(g: np.ndarray):
        if x.requires_grad:
            dflat = np.zeros_like(flat)
            np.put_along_axis(dflat, idx[..., None], g[..., None], axis=-1)
            x.accumulate(dflat.reshape(x.data.shape))

    return _make(out, (x,), backward)


def negate(x: Tensor) -> Tensor:
    def backward(g: np.ndarray):
        if x.requires_grad:
            x.accumulate(-g)

    return _make(-x.data, (x,), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of two same-shape tensors."""
    if a.data.shape != b.data.shape:
        raise ConfigurationError(f"add: shapes differ, {a.data.shape} vs {b.data.shape}")

    def backward(g: np.ndarray):
        if a.requires_grad:
            a.accumulate(g)
        if b.requires_grad:
            b.accumulate(g)

    return _make(a.data + b.data, (a, b), backward)


def scale(x: Tensor, c: float) -> Tensor:
    def backward(g: np.ndarray):
        if x.requires_grad:
            x.accumulate(c * g)

    return _make(c * x.data, (x,), backward)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def backward(g: np.ndarray):
        if x.requires_grad:
            x.accumulate(g.reshape(x.data.shape))

    return _make(x.data.reshape(shape), (x,), backward)


def sum_all(x: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""

    def backward(g: np.ndarray):
        if x.requires_grad:
            x.accumulate(np.full_like(x.data, float(g)))

    return _make(np.asarray(x.data.sum()), (x,), backward)


def stack_maps(maps: Iterable[Tensor]) -> Tensor:
    """Stack per-template maps of shape (B, OH, OW) into (B, m, OH, OW)."""
    maps = list(maps)
    data = np.stack([t.data for t in maps], axis=1)

    def backward(g: np.ndarray):
        for j, t in enumerate(maps):
            if t.requires_grad:
                t.accumulate(g[:, j])

    return _make(data, tuple(maps), backward)


# ---------------------------------------------------------------------------
# finite-difference gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradParamReport:
    """Worst-case comparison of analytic and numeric gradients for one tensor."""

    name: str
    max_rel_err: float
    worst_index: tuple
    analytic: float
    numeric: float
    passed: bool


@dataclass
class GradCheckReport:
    step: float
    tolerance: float
    params: list[GradParamReport] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(p.passed for p in self.params)

    @property
    def max_rel_err(self) -> float:
        return max((p.max_rel_err for p in self.params), default=0.0)

    def summary(self) -> str:
        lines = []
        for p in self.params:
            status = "ok" if p.passed else "FAIL"
            lines.append(
                f"{status:4s} {p.name:24s} max_rel_err={p.max_rel_err:.3e} "
                f"at {p.worst_index} (analytic={p.analytic:.6e}, numeric={p.numeric:.6e})"
            )
        return "\n".join(lines)


def rel_error(a: float, n: float) -> float:
    return abs(a - n) / max(1e-8, abs(a) + abs(n))


def grad_check(fn, point: dict[str, Tensor], step: float = 1e-6, tolerance: float = 1e-5) -> GradCheckReport:
    """Compare the reverse-mode gradient of ``fn`` with central differences.

    ``fn`` maps the named tensors in ``point`` to a scalar Tensor.  Every
    tensor in ``point`` is treated as trainable.  Raises
    :class:`NumericError` if any evaluation is non-finite.
    """
    if step <= 0:
        raise ConfigurationError(f"grad_check: step must be positive, got {step}")
    for t in point.values():
        t.trainable = True
        t.zero_grad()
    out = fn(point)
    val = out.item()
    if not math.isfinite(val):
        raise NumericError(f"grad_check: function value is non-finite ({val})")
    out.backward()
    analytic = {
        name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
        for name, t in point.items()
    }

    report = GradCheckReport(step=step, tolerance=tolerance)
    with no_grad():
        for name, t in point.items():
            flat = t.data.reshape(-1)
            aflat = analytic[name].reshape(-1)
            worst = (0.0, 0, 0.0, 0.0)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                f_plus = fn(point).item()
                flat[i] = orig - step
                f_minus = fn(point).item()
                flat[i] = orig
                if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                    raise NumericError(
                        f"grad_check: non-finite evaluation while perturbing '{name}'[{i}]"
                    )
                numeric = (f_plus - f_minus) / (2.0 * step)
                err = rel_error(aflat[i], numeric)
                if err >= worst[0]:
                    worst = (err, i, float(aflat[i]), numeric)
            idx = np.unravel_index(worst[1], t.data.shape) if t.data.size else ()
            report.params.append(
                GradParamReport(
                    name=name,
                    max_rel_err=worst[0],
                    worst_index=tuple(int(k) for k in idx),
                    analytic=worst[2],
                    numeric=worst[3],
                    passed=worst[0] <= tolerance,
                )
            )
    return report
