"""Rank-4 tensors with reverse-mode automatic differentiation.

Everything in this library is expressed over dense (batch, channels, height,
width) arrays.  A :class:`Tensor` wraps one such array together with an
optional gradient buffer; a :class:`Graph` is a recording tape.  While a graph
is active (``with Graph() as g: ...``), every differentiable operation appends
a backward closure to it.  ``g.backward(loss)`` seeds ``loss.grad`` with ones
and replays the closures in exact reverse insertion order, accumulating
gradients into every tensor on the path that has ``requires_grad`` set.

Outside of an active graph the same operations run forward-only, which is what
inference and finite-difference probing use.

Conventions fixed here and relied on everywhere else:

* convolution means cross-correlation (no kernel flip), stride 1;
* ``conv_transpose2d`` is the exact adjoint of ``conv2d`` with the same kernel
  geometry (verified by an inner-product identity in the test suite);
* the ReLU subgradient at exactly 0 is 0;
* every operation validates that its output is finite and raises
  :class:`NumericError` otherwise, never returning NaN/Inf silently;
* reductions use NumPy's deterministic ordered accumulation, so results are
  bit-reproducible for a fixed BLAS thread count.

Tensors are treated as immutable once created (ops never write into their
inputs); the optimizer replaces parameter ``data`` buffers between graph
sessions, and :func:`gradcheck` temporarily perturbs entries of the parameter
set it owns.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ShapeError",
    "NumericError",
    "Tensor",
    "Graph",
    "active_graph",
    "zeros",
    "zeros_like",
    "ones_like",
    "add",
    "sub",
    "scale",
    "mul_elementwise",
    "concat_channels",
    "split_channels",
    "relu",
    "sigmoid",
    "conv2d",
    "conv_transpose2d",
    "absolute",
    "sum_all",
    "GradcheckReport",
    "gradcheck",
]

DEFAULT_DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when tensor shapes do not satisfy an operation's contract."""


class NumericError(ArithmeticError):
    """Raised when an operation produces (or is fed) non-finite values."""


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

_graph_stack: list["Graph"] = []


def active_graph() -> "Graph | None":
    """The innermost recording graph, or None when running forward-only."""
    return _graph_stack[-1] if _graph_stack else None


class Graph:
    """Recording tape for one forward/backward session.

    Nodes are backward closures appended in execution order; insertion order
    is therefore a topological order of the computation, and the backward pass
    visits nodes in exact reverse insertion order.  A graph instance is owned
    by a single session at a time.
    """

    def __init__(self) -> None:
        self._nodes: list = []

    def __enter__(self) -> "Graph":
        _graph_stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _graph_stack.pop()
        assert popped is self, "graphs must be exited in LIFO order"

    def __len__(self) -> int:
        return len(self._nodes)

    def record(self, backward) -> None:
        """Append a backward closure; exposed so layers can define custom ops."""
        self._nodes.append(backward)

    def backward(self, loss: "Tensor") -> None:
        """Seed ``loss.grad`` with ones and replay the tape in reverse."""
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self._nodes):
            node()


# ---------------------------------------------------------------------------
# Tensor
# ---------------------------------------------------------------------------


class Tensor:
    """A rank-4 (N, C, H, W) array with an optional same-shape gradient.

    ``data`` is validated to be finite on construction; operations construct
    their outputs through this path, so a non-finite intermediate fails fast.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None) -> None:
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        if arr.ndim != 4:
            raise ShapeError(
                f"tensors are rank-4 (batch, channels, height, width); got shape {arr.shape}"
            )
        if not np.isfinite(arr).all():
            raise NumericError("tensor data contains NaN/Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def accumulate_grad(self, g: np.ndarray) -> None:
        """Add ``g`` into this tensor's gradient buffer (creating it if absent)."""
        if g.shape != self.data.shape:
            raise ShapeError(
                f"gradient shape {g.shape} does not match tensor shape {self.data.shape}"
            )
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def detach(self) -> "Tensor":
        """A non-differentiable copy sharing nothing with the tape."""
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return (
            f"Tensor(shape={self.data.shape}, dtype={self.data.dtype},"
            f" requires_grad={self.requires_grad})"
        )


def zeros(shape, dtype=DEFAULT_DTYPE, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def zeros_like(t: Tensor) -> Tensor:
    return Tensor(np.zeros_like(t.data))


def ones_like(t: Tensor) -> Tensor:
    return Tensor(np.ones_like(t.data))


def _result(data: np.ndarray, requires_grad: bool, op: str) -> Tensor:
    """Wrap an op output, enforcing the finite-values invariant."""
    if not np.isfinite(data).all():
        raise NumericError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = requires_grad
    out.grad = None
    return out


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


# ---------------------------------------------------------------------------
# Elementwise / structural ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; the upstream gradient passes through to both inputs."""
    _check_same_shape(a, b, "add")
    req = a.requires_grad or b.requires_grad
    out = _result(a.data + b.data, req, "add")
    g = active_graph()
    if g is not None and req:

        def backward():
            up = out.grad
            if up is None:
                return
            if a.requires_grad:
                a.accumulate_grad(up)
            if b.requires_grad:
                b.accumulate_grad(up)

        g.record(backward)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise difference a - b."""
    _check_same_shape(a, b, "sub")
    req = a.requires_grad or b.requires_grad
    out = _result(a.data - b.data, req, "sub")
    g = active_graph()
    if g is not None and req:

        def backward():
            up = out.grad
            if up is None:
                return
            if a.requires_grad:
                a.accumulate_grad(up)
            if b.requires_grad:
                b.accumulate_grad(-up)

        g.record(backward)
    return out


def scale(x: Tensor, s: float) -> Tensor:
    """Multiplication by a python scalar constant."""
    s = float(s)
    out = _result(x.data * s, x.requires_grad, "scale")
    g = active_graph()
    if g is not None and x.requires_grad:

        def backward():
            if out.grad is not None:
                x.accumulate_grad(out.grad * s)

        g.record(backward)
    return out


def mul_elementwise(a: Tensor, b: Tensor) -> Tensor:
    """Hadamard product; grad_a = upstream * b, grad_b = upstream * a."""
    _check_same_shape(a, b, "mul_elementwise")
    req = a.requires_grad or b.requires_grad
    out = _result(a.data * b.data, req, "mul_elementwise")
    g = active_graph()
    if g is not None and req:
        ad, bd = a.data, b.data

        def backward():
            up = out.grad
            if up is None:
                return
            if a.requires_grad:
                a.accumulate_grad(up * bd)
            if b.requires_grad:
                b.accumulate_grad(up * ad)

        g.record(backward)
    return out


def concat_channels(parts: list[Tensor]) -> Tensor:
    """Concatenate along the channel axis.

    Part ``i`` occupies the channel slab ``[sum(C_j for j<i), sum(C_j for
    j<=i))``; the backward pass slices the upstream gradient back to each part
    at exactly those offsets.
    """
    if not parts:
        raise ShapeError("concat_channels: empty part list")
    n, _, h, w = parts[0].data.shape
    for p in parts[1:]:
        pn, _, ph, pw = p.data.shape
        if (pn, ph, pw) != (n, h, w):
            raise ShapeError(
                f"concat_channels: batch/spatial mismatch {parts[0].data.shape} vs {p.data.shape}"
            )
    req = any(p.requires_grad for p in parts)
    out = _result(np.concatenate([p.data for p in parts], axis=1), req, "concat_channels")
    g = active_graph()
    if g is not None and req:
        sizes = [p.data.shape[1] for p in parts]
        offsets = np.cumsum([0] + sizes)

        def backward():
            up = out.grad
            if up is None:
                return
            for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
                if p.requires_grad:
                    p.accumulate_grad(up[:, lo:hi])

        g.record(backward)
    return out


def split_channels(x: Tensor, sizes: list[int]) -> list[Tensor]:
    """Slice the channel axis into consecutive slabs (plain data utility)."""
    if sum(sizes) != x.data.shape[1]:
        raise ShapeError(
            f"split_channels: sizes {sizes} do not sum to channel count {x.data.shape[1]}"
        )
    out, lo = [], 0
    for s in sizes:
        out.append(Tensor(x.data[:, lo : lo + s].copy()))
        lo += s
    return out


def relu(x: Tensor) -> Tensor:
    """max(0, x); the subgradient at exactly 0 is 0."""
    out = _result(np.maximum(x.data, 0.0), x.requires_grad, "relu")
    g = active_graph()
    if g is not None and x.requires_grad:
        mask = x.data > 0

        def backward():
            if out.grad is not None:
                x.accumulate_grad(out.grad * mask)

        g.record(backward)
    return out


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function, branch-on-sign stable, output strictly inside (0, 1).

    Saturated outputs are nudged to the nearest representable value inside the
    open interval so that downstream gating can rely on strict bounds.
    """
    d = x.data
    out_data = np.empty_like(d)
    pos = d >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out_data[~pos] = e / (1.0 + e)
    one = d.dtype.type(1.0)
    np.clip(out_data, np.finfo(d.dtype).tiny, np.nextafter(one, 0.0), out=out_data)
    out = _result(out_data, x.requires_grad, "sigmoid")
    g = active_graph()
    if g is not None and x.requires_grad:

        def backward():
            if out.grad is not None:
                y = out.data
                x.accumulate_grad(out.grad * y * (1.0 - y))

        g.record(backward)
    return out


def absolute(x: Tensor) -> Tensor:
    """|x|, with subgradient 0 at exactly 0 (sign convention matches relu)."""
    out = _result(np.abs(x.data), x.requires_grad, "absolute")
    g = active_graph()
    if g is not None and x.requires_grad:
        sgn = np.sign(x.data)

        def backward():
            if out.grad is not None:
                x.accumulate_grad(out.grad * sgn)

        g.record(backward)
    return out


def sum_all(x: Tensor) -> Tensor:
    """Sum of all entries as a (1, 1, 1, 1) tensor."""
    total = np.array(x.data.sum(), dtype=x.data.dtype).reshape(1, 1, 1, 1)
    out = _result(total, x.requires_grad, "sum_all")
    g = active_graph()
    if g is not None and x.requires_grad:
        shape = x.data.shape

        def backward():
            if out.grad is not None:
                x.accumulate_grad(np.full(shape, float(out.grad.reshape(())), dtype=x.data.dtype))

        g.record(backward)
    return out


# ---------------------------------------------------------------------------
# Convolution (stride 1, cross-correlation) and its adjoint
# ---------------------------------------------------------------------------


def _im2col(xp: np.ndarray, k: int):
    """Patch-matrix lowering: (N, C, Hp, Wp) -> (N, C*k*k, Ho*Wo)."""
    n, c, hp, wp = xp.shape
    ho, wo = hp - k + 1, wp - k + 1
    s0, s1, s2, s3 = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp, (n, c, k, k, ho, wo), (s0, s1, s2, s3, s2, s3), writeable=False
    )
    return view.reshape(n, c * k * k, ho * wo), ho, wo


def _conv2d_data(x: np.ndarray, w: np.ndarray, b: np.ndarray | None, padding: int):
    """Forward cross-correlation; returns (out, cols, padded_shape)."""
    co, ci, k, _ = w.shape
    if padding:
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x
    cols, ho, wo = _im2col(xp, k)
    out = np.matmul(w.reshape(co, -1), cols).reshape(x.shape[0], co, ho, wo)
    if b is not None:
        out += b.reshape(1, co, 1, 1)
    return out, cols, xp.shape


def _col2im(gcols: np.ndarray, n: int, c: int, k: int, hp: int, wp: int, ho: int, wo: int):
    """Scatter-add patch gradients back onto the padded input grid."""
    gxp = np.zeros((n, c, hp, wp), dtype=gcols.dtype)
    g6 = gcols.reshape(n, c, k, k, ho, wo)
    for u in range(k):
        for v in range(k):
            gxp[:, :, u : u + ho, v : v + wo] += g6[:, :, u, v]
    return gxp


def _conv2d_grads(
    up: np.ndarray,
    x_shape,
    w: np.ndarray,
    cols: np.ndarray,
    padded_shape,
    padding: int,
    need_x: bool,
    need_w: bool,
    need_b: bool,
):
    n, co, ho, wo = up.shape
    ckk = cols.shape[1]
    upf = up.reshape(n, co, ho * wo)
    gb = up.sum(axis=(0, 2, 3)) if need_b else None
    gw = None
    if need_w:
        lhs = upf.transpose(1, 0, 2).reshape(co, -1)
        rhs = cols.transpose(0, 2, 1).reshape(-1, ckk)
        gw = (lhs @ rhs).reshape(w.shape)
    gx = None
    if need_x:
        gcols = np.matmul(w.reshape(co, -1).T, upf)
        _, c, hp, wp = padded_shape
        k = w.shape[2]
        gxp = _col2im(gcols, n, c, k, hp, wp, ho, wo)
        if padding:
            gx = gxp[:, :, padding:-padding, padding:-padding]
        else:
            gx = gxp
        if gx.shape != x_shape:  # safety net, should be unreachable
            raise ShapeError(f"internal: input grad shape {gx.shape} != {x_shape}")
    return gx, gw, gb


def _validate_bias(bias: Tensor | None, c_out: int, op: str) -> np.ndarray | None:
    if bias is None:
        return None
    if bias.data.shape != (1, c_out, 1, 1):
        raise ShapeError(
            f"{op}: bias shape {bias.data.shape} must be (1, {c_out}, 1, 1)"
        )
    return bias.data.reshape(c_out)


def conv2d(x: Tensor, weights: Tensor, bias: Tensor | None = None, padding: int = 0) -> Tensor:
    """2-d cross-correlation, stride 1.

    ``weights`` has shape (C_out, C_in, k, k); ``bias`` is a (1, C_out, 1, 1)
    tensor.  Output spatial size is H + 2*padding - k + 1 (and likewise for W),
    which must be positive.
    """
    co, ci, k, k2 = weights.data.shape
    if k != k2:
        raise ShapeError(f"conv2d: non-square kernel {weights.data.shape}")
    n, c, h, w_ = x.data.shape
    if c != ci:
        raise ShapeError(
            f"conv2d: input channels {c} (shape {x.data.shape}) do not match "
            f"kernel input channels {ci} (shape {weights.data.shape})"
        )
    if padding < 0:
        raise ShapeError(f"conv2d: negative padding {padding}")
    ho, wo = h + 2 * padding - k + 1, w_ + 2 * padding - k + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(
            f"conv2d: output size {ho}x{wo} <= 0 for input {h}x{w_}, kernel {k}, padding {padding}"
        )
    bvec = _validate_bias(bias, co, "conv2d")
    out_data, cols, padded_shape = _conv2d_data(x.data, weights.data, bvec, padding)
    req = x.requires_grad or weights.requires_grad or (bias is not None and bias.requires_grad)
    out = _result(out_data, req, "conv2d")
    g = active_graph()
    if g is not None and req:
        xd, wd = x.data, weights.data

        def backward():
            up = out.grad
            if up is None:
                return
            need_b = bias is not None and bias.requires_grad
            gx, gw, gb = _conv2d_grads(
                up, xd.shape, wd, cols, padded_shape, padding,
                x.requires_grad, weights.requires_grad, need_b,
            )
            if gx is not None:
                x.accumulate_grad(np.ascontiguousarray(gx))
            if gw is not None:
                weights.accumulate_grad(gw)
            if gb is not None:
                bias.accumulate_grad(gb.reshape(bias.data.shape))

        g.record(backward)
    return out


def conv_transpose2d(x: Tensor, weights: Tensor, bias: Tensor | None = None) -> Tensor:
    """Adjoint of :func:`conv2d` with the same kernel geometry (stride 1, padding 0).

    ``weights`` has shape (C_in, C_out, k, k); output spatial size is
    H + k - 1.  Implemented as a cross-correlation of the (k-1)-padded input
    with the spatially flipped, axis-swapped kernel, which is algebraically
    identical to the adjoint map.
    """
    ci, co, k, k2 = weights.data.shape
    if k != k2:
        raise ShapeError(f"conv_transpose2d: non-square kernel {weights.data.shape}")
    n, c, h, w_ = x.data.shape
    if c != ci:
        raise ShapeError(
            f"conv_transpose2d: input channels {c} (shape {x.data.shape}) do not match "
            f"kernel input channels {ci} (shape {weights.data.shape})"
        )
    bvec = _validate_bias(bias, co, "conv_transpose2d")
    w_eq = np.ascontiguousarray(weights.data.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
    out_data, cols, padded_shape = _conv2d_data(x.data, w_eq, bvec, k - 1)
    req = x.requires_grad or weights.requires_grad or (bias is not None and bias.requires_grad)
    out = _result(out_data, req, "conv_transpose2d")
    g = active_graph()
    if g is not None and req:
        xd = x.data

        def backward():
            up = out.grad
            if up is None:
                return
            need_b = bias is not None and bias.requires_grad
            gx, gw_eq, gb = _conv2d_grads(
                up, xd.shape, w_eq, cols, padded_shape, k - 1,
                x.requires_grad, weights.requires_grad, need_b,
            )
            if gx is not None:
                x.accumulate_grad(np.ascontiguousarray(gx))
            if gw_eq is not None:
                gw = gw_eq.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1]
                weights.accumulate_grad(np.ascontiguousarray(gw))
            if gb is not None:
                bias.accumulate_grad(gb.reshape(bias.data.shape))

        g.record(backward)
    return out


# ---------------------------------------------------------------------------
# Finite-difference gradient checking
# ---------------------------------------------------------------------------

# Relative error uses max(|analytic|, |numeric|, _REL_FLOOR) as denominator so
# that central-difference round-off on near-zero gradients cannot dominate.
_REL_FLOOR = 1e-2


@dataclass
class GradcheckReport:
    """Per-parameter worst relative error between analytic and numeric gradients."""

    tolerance: float
    per_param: dict[str, float] = field(default_factory=dict)
    entries_checked: int = 0

    @property
    def max_rel_err(self) -> float:
        return max(self.per_param.values()) if self.per_param else 0.0

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance

    def lines(self) -> list[str]:
        out = [
            f"param={name} rel_err={err:.3e}" for name, err in sorted(self.per_param.items())
        ]
        status = "pass" if self.passed else "FAIL"
        out.append(
            f"gradcheck {status} max_rel_err={self.max_rel_err:.3e} "
            f"tolerance={self.tolerance:.1e} entries={self.entries_checked}"
        )
        return out


def gradcheck(
    f,
    params,
    step: float = 1e-5,
    tolerance: float = 1e-4,
    max_entries_per_param: int | None = None,
    seed: int = 0,
) -> GradcheckReport:
    """Compare analytic gradients of ``f`` against central finite differences.

    ``f`` maps the parameter set to a scalar-valued (1, 1, 1, 1) tensor and
    must be deterministic (any random inputs fixed inside the closure).  The
    analytic pass runs once under a fresh graph; the numeric pass perturbs one
    parameter entry at a time and re-evaluates ``f`` forward-only.  When
    ``max_entries_per_param`` is set, a seeded sample of coordinates per
    parameter tensor is probed instead of every entry, which is how the
    end-to-end network check stays inside its runtime budget.
    """
    params.zero_grad()
    with Graph() as g:
        out = f(params)
        if out.data.size != 1:
            raise ShapeError(f"gradcheck: f must return a scalar tensor, got {out.data.shape}")
        g.backward(out)
    analytic = {name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
                for name, p in params.items()}

    rng = np.random.default_rng(seed)
    report = GradcheckReport(tolerance=tolerance)
    for name, p in params.items():
        flat = p.data.reshape(-1)
        size = flat.size
        if max_entries_per_param is not None and size > max_entries_per_param:
            idxs = np.sort(rng.choice(size, size=max_entries_per_param, replace=False))
        else:
            idxs = np.arange(size)
        ana_flat = analytic[name].reshape(-1)
        worst = 0.0
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + step
            f_plus = float(f(params).data.reshape(()))
            flat[i] = orig - step
            f_minus = float(f(params).data.reshape(()))
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NumericError(f"gradcheck: non-finite evaluation while probing {name}")
            numeric = (f_plus - f_minus) / (2.0 * step)
            ana = float(ana_flat[i])
            rel = abs(ana - numeric) / max(abs(ana), abs(numeric), _REL_FLOOR)
            worst = max(worst, rel)
        report.per_param[name] = worst
        report.entries_checked += len(idxs)
    return report
