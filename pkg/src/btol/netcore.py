"""Small reverse-mode differentiation core over float32 numpy arrays.

Only the handful of layers the adapter / segmentation networks need are
provided: conv2d, relu, residual add, channel concat, 2x average pooling,
2x nearest upsampling and the two losses.  Every op checks its output for
NaN/Inf and raises :class:`NonFiniteError` instead of propagating it.
"""
from __future__ import annotations

import contextlib
import threading
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float32

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


def _check_finite(arr: np.ndarray, where: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced by {where}")
    return arr


class Tensor:
    """A float32 array that optionally records how it was computed."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (),
                 _backward: Callable | None = None, op: str = "leaf"):
        arr = np.asarray(data, dtype=DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad=None) -> None:
        """Propagate ``grad`` (dOut/dSelf) to every tracked leaf.

        With ``grad=None`` the tensor must be a scalar and the seed is 1.
        A non-scalar seed gives a vector-Jacobian product.  Leaf gradients
        accumulate across calls until cleared.
        """
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=DTYPE)
        if grad.shape != self.shape:
            raise ValueError(f"seed gradient shape {grad.shape} != tensor shape {self.shape}")
        if not self.requires_grad:
            return

        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"


def backward(loss: Tensor) -> None:
    """Accumulate dLoss/dLeaf into every tracked leaf; ``loss`` must be scalar."""
    if loss.data.size != 1:
        raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
    loss.backward()


_grad_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block (thread-local)."""
    prev = grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = prev


def _result(data: np.ndarray, parents: Sequence[Tensor], bwd: Callable, op: str) -> Tensor:
    data = _check_finite(np.asarray(data, dtype=DTYPE), op)
    track = grad_enabled() and any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=track, _parents=tuple(parents) if track else (),
                  _backward=bwd if track else None, op=op)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# --------------------------------------------------------------------------
# elementwise / structural ops

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    return _result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def scale(a: Tensor, alpha: float) -> Tensor:
    alpha = DTYPE(alpha)
    return _result(a.data * alpha, (a,), lambda g: (g * alpha,), "scale")


def tsum(a: Tensor) -> Tensor:
    return _result(a.data.sum(dtype=DTYPE), (a,),
                   lambda g: (np.broadcast_to(g, a.shape).astype(DTYPE),), "sum")


@contextlib.contextmanager
def record_relu_patterns():
    """Collect the activation mask of every relu evaluated inside the block."""
    prev = getattr(_grad_state, "patterns", None)
    _grad_state.patterns = patterns = []
    try:
        yield patterns
    finally:
        _grad_state.patterns = prev


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    patterns = getattr(_grad_state, "patterns", None)
    if patterns is not None:
        patterns.append(mask)
    # sub-gradient at exactly 0 is 0
    return _result(np.maximum(x.data, DTYPE(0)), (x,), lambda g: (g * mask,), "relu")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    ca = a.shape[1]
    return _result(np.concatenate([a.data, b.data], axis=1), (a, b),
                   lambda g: (g[:, :ca], g[:, ca:]), "concat")


def avg_pool2(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"avg_pool2 needs even spatial dims, got {h}x{w}")
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5), dtype=DTYPE)

    def bwd(g):
        gx = np.repeat(np.repeat(g * DTYPE(0.25), 2, axis=2), 2, axis=3)
        return (gx,)
    return _result(out, (x,), bwd, "avg_pool2")


def upsample2(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def bwd(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5), dtype=DTYPE),)
    return _result(out, (x,), bwd, "upsample2")


# --------------------------------------------------------------------------
# convolution

def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    span = size + 2 * pad - k
    if span < 0 or span % stride:
        raise ValueError(f"non-integral conv output size: ({size} + 2*{pad} - {k}) / {stride}")
    return span // stride + 1


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """(N, C, Hp, Wp) -> (N, C*k*k, ho*wo), channel-major columns."""
    n, c = xp.shape[:2]
    cols = np.empty((n, c, k, k, ho, wo), dtype=DTYPE)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(n, c * k * k, ho * wo)


def _conv_forward(x: np.ndarray, wmat: np.ndarray, k: int, stride: int, pad: int):
    n, _, h, w = x.shape
    ho = conv_output_size(h, k, stride, pad)
    wo = conv_output_size(w, k, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = _im2col(xp, k, stride, ho, wo)
    out = np.matmul(wmat, cols).reshape(n, wmat.shape[0], ho, wo)
    return out, cols, xp.shape, ho, wo


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Direct 2D cross-correlation via im2col.

    x: (N, Cin, H, W); weight: (Cout, Cin, k, k); bias: (Cout,).
    """
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ValueError("conv2d expects 4-D input and weight")
    n, cin, h, w = x.shape
    cout, wcin, k, k2 = weight.shape
    if wcin != cin:
        raise ValueError(f"conv2d: input has {cin} channels, weight expects {wcin}")
    if k != k2 or k % 2 == 0:
        raise ValueError(f"conv2d: kernel must be square and odd, got {k}x{k2}")
    if stride < 1 or pad < 0:
        raise ValueError("conv2d: stride >= 1 and pad >= 0 required")
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"conv2d: bias shape {bias.shape} != ({cout},)")

    wmat = weight.data.reshape(cout, cin * k * k)
    out, cols, xp_shape, ho, wo = _conv_forward(x.data, wmat, k, stride, pad)
    if bias is not None:
        out += bias.data[:, None, None]

    def bwd(g):
        g3 = np.ascontiguousarray(g).reshape(n, cout, ho * wo)
        gw = np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape) \
            if weight.requires_grad else None
        gb = g.sum(axis=(0, 2, 3), dtype=DTYPE) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            if stride == 1 and pad <= k - 1:
                # input gradient = full correlation of g with the flipped, transposed kernel
                wflip = np.ascontiguousarray(weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
                gx, *_ = _conv_forward(g3.reshape(n, cout, ho, wo), wflip.reshape(cin, cout * k * k),
                                       k, 1, k - 1 - pad)
            else:
                dcols = np.matmul(wmat.T, g3).reshape(n, cin, k, k, ho, wo)
                gxp = np.zeros(xp_shape, dtype=DTYPE)
                for i in range(k):
                    for j in range(k):
                        gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, i, j]
                gx = gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, bwd, "conv2d")


# --------------------------------------------------------------------------
# losses

def log_softmax_channels(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_channels(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over N*H*W pixels of -log softmax(logits)[label]."""
    labels = np.asarray(labels)
    if logits.data.ndim != 4:
        raise ValueError("softmax_cross_entropy expects (N, K, H, W) logits")
    n, k, h, w = logits.shape
    if labels.shape != (n, h, w):
        raise ValueError(f"labels shape {labels.shape} != {(n, h, w)}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    lab = labels.astype(np.int64)[:, None]
    logp = log_softmax_channels(logits.data)
    count = n * h * w
    loss = -np.take_along_axis(logp, lab, axis=1).sum(dtype=DTYPE) / DTYPE(count)

    def bwd(g):
        d = np.exp(logp)
        np.put_along_axis(d, lab, np.take_along_axis(d, lab, axis=1) - 1, axis=1)
        return (d * (g / DTYPE(count)),)
    return _result(loss, (logits,), bwd, "softmax_ce")


def kl_divergence(logits: Tensor, target_probs) -> Tensor:
    """Pixel-mean KL(p || softmax(logits)) with ``p`` a constant target."""
    p = np.asarray(target_probs, dtype=DTYPE)
    if p.shape != logits.shape:
        raise ValueError(f"target shape {p.shape} != logits shape {logits.shape}")
    n, _, h, w = logits.shape
    count = n * h * w
    logq = log_softmax_channels(logits.data)
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(p > 0, p * np.log(np.where(p > 0, p, 1)), 0).astype(DTYPE)
    loss = (plogp - p * logq).sum(dtype=DTYPE) / DTYPE(count)

    def bwd(g):
        return ((np.exp(logq) - p) * (g / DTYPE(count)),)
    return _result(loss, (logits,), bwd, "kl")


# --------------------------------------------------------------------------
# parameters and the optimiser

class Param(Tensor):
    """A trainable leaf carrying its own Adam state and freeze flag."""

    __slots__ = ("name", "frozen", "adam_m", "adam_v", "adam_t")

    def __init__(self, name: str, data):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.frozen = False
        self.adam_m = np.zeros_like(self.data)
        self.adam_v = np.zeros_like(self.data)
        self.adam_t = 0

    def set_frozen(self, frozen: bool) -> None:
        self.frozen = frozen
        self.requires_grad = not frozen
        if frozen:
            self.grad = None

    def reset_optimizer(self) -> None:
        self.adam_m = np.zeros_like(self.data)
        self.adam_v = np.zeros_like(self.data)
        self.adam_t = 0


class ParamSet(OrderedDict):
    """Ordered name -> :class:`Param` mapping."""

    def add(self, name: str, data) -> Param:
        if name in self:
            raise KeyError(f"duplicate parameter {name!r}")
        p = Param(name, data)
        self[name] = p
        return p

    def zero_grad(self) -> None:
        for p in self.values():
            p.grad = None

    def freeze(self, frozen: bool = True) -> None:
        for p in self.values():
            p.set_frozen(frozen)

    def count(self) -> int:
        return sum(p.data.size for p in self.values())

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.items()}


def adam_step(params: Iterable[Param] | ParamSet, lr: float,
              beta1: float = ADAM_BETA1, beta2: float = ADAM_BETA2, eps: float = ADAM_EPS) -> None:
    """One bias-corrected Adam update of every unfrozen parameter; grads are cleared."""
    plist = list(params.values()) if isinstance(params, ParamSet) else list(params)
    for p in plist:
        if not p.frozen and p.grad is None:
            raise ValueError(f"parameter {p.name!r} has no gradient")
    b1, b2 = DTYPE(beta1), DTYPE(beta2)
    for p in plist:
        if p.frozen:
            continue
        g = p.grad
        p.adam_t += 1
        p.adam_m = b1 * p.adam_m + (1 - b1) * g
        p.adam_v = b2 * p.adam_v + (1 - b2) * g * g
        mhat = p.adam_m / DTYPE(1 - beta1 ** p.adam_t)
        vhat = p.adam_v / DTYPE(1 - beta2 ** p.adam_t)
        p.data = _check_finite((p.data - DTYPE(lr) * mhat / (np.sqrt(vhat) + DTYPE(eps))).astype(DTYPE),
                               f"adam_step({p.name})")
        p.grad = None


# --------------------------------------------------------------------------
# gradient checking

@dataclass
class GradCheckReport:
    param_errors: dict[str, float] = field(default_factory=dict)
    input_error: float = 0.0
    tol: float = 1e-2
    shrunk_probes: int = 0
    skipped_probes: int = 0
    total_probes: int = 0

    @property
    def max_error(self) -> float:
        return max([self.input_error, *self.param_errors.values()])

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tol


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """||a - n|| / max(||a||, ||n||); 0 when both vanish."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    b = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)


def finite_diff_check(net, x, eps: float = 1e-2, tol: float = 1e-2, seed: int = 0,
                      max_shrink: int = 4) -> GradCheckReport:
    """Compare analytic gradients of ``sum(net(x) * r)`` with central differences.

    ``r`` is a fixed random projection so every output element matters.
    Covers every parameter of ``net`` and the input itself.

    A central difference is only meaningful when both probes stay on the
    same linear piece of every relu.  A probe whose activation pattern
    differs from the unperturbed one is retried with eps/4 up to
    ``max_shrink`` times; if it still straddles a kink that coordinate is
    left out of the error and counted in ``skipped_probes``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x_arr = np.array(x.data if isinstance(x, Tensor) else x, dtype=DTYPE)
    params = list(net.params.values())
    saved_frozen = [p.frozen for p in params]
    for p in params:
        p.set_frozen(False)
        p.grad = None

    try:
        xt = Tensor(x_arr.copy(), requires_grad=True)
        out = net(xt)
        proj = np.random.default_rng(seed).standard_normal(out.shape).astype(DTYPE)
        backward(tsum(mul(out, Tensor(proj))))

        def evaluate():
            with no_grad(), record_relu_patterns() as pats:
                y = net(Tensor(x_arr)).data
            pattern = np.concatenate([m.ravel() for m in pats]) if pats else np.zeros(0, bool)
            return float(np.sum(y.astype(np.float64) * proj)), pattern

        _, base_pattern = evaluate()
        report = GradCheckReport(tol=tol)

        def numeric_grad(arr: np.ndarray, analytic: np.ndarray) -> float:
            num = np.zeros(arr.size, dtype=np.float64)
            keep = np.ones(arr.size, dtype=bool)
            flat = arr.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                step = eps
                for attempt in range(max_shrink + 1):
                    flat[i] = orig + DTYPE(step)
                    fp, pp = evaluate()
                    flat[i] = orig - DTYPE(step)
                    fm, pm = evaluate()
                    flat[i] = orig
                    smooth = np.array_equal(pp, base_pattern) and np.array_equal(pm, base_pattern)
                    if smooth:
                        break
                    step /= 4
                report.total_probes += 1
                if attempt:
                    report.shrunk_probes += 1
                if not smooth:
                    report.skipped_probes += 1
                    keep[i] = False
                    continue
                # use the step actually applied in float32
                applied = (np.float64(DTYPE(orig + DTYPE(step))) - np.float64(DTYPE(orig - DTYPE(step))))
                num[i] = (fp - fm) / applied
            return relative_error(np.asarray(analytic, np.float64).ravel()[keep], num[keep])

        with no_grad():
            for p in params:
                analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
                report.param_errors[p.name] = numeric_grad(p.data, analytic)
            report.input_error = numeric_grad(x_arr, xt.grad)
    finally:
        for p, fr in zip(params, saved_frozen):
            p.set_frozen(fr)
            p.grad = None
    return report
