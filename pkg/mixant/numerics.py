"""
Dense tensor arithmetic with a small reverse-mode autodiff engine.

A `Tensor` wraps a numpy array. Every primitive records its parents together with a
closure that maps the upstream gradient to one gradient per parent; `backward` walks
the recorded graph in reverse topological order. Only the primitives the MixANT layers
need are provided.
"""
import contextlib
import logging
import zlib
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from mixant.errors import ConfigError, GraphError, NonDeterminismError, NonFiniteError, ShapeError

logger = logging.getLogger(__name__)

DTYPES = {"f32": np.float32, "f64": np.float64}

_grad_state = {"enabled": True}


@contextlib.contextmanager
def no_grad():
    """Run the enclosed block without recording a graph."""
    previous = _grad_state["enabled"]
    _grad_state["enabled"] = False
    try:
        yield
    finally:
        _grad_state["enabled"] = previous


def is_grad_enabled() -> bool:
    return _grad_state["enabled"]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "op", "_parents", "_backward")
    # Make ndarray <op> Tensor dispatch to the Tensor's reflected operators.
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        array = np.asarray(data)
        if not np.issubdtype(array.dtype, np.floating):
            array = array.astype(np.float64)
        self.data = array
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self.op = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = self.name or self.op or "tensor"
        return f"Tensor({label}, shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


class Parameter(Tensor):
    """A trainable leaf. `decay` marks whether AdamW applies weight decay to it."""

    __slots__ = ("decay",)

    def __init__(self, data, name: Optional[str] = None, decay: bool = True):
        super().__init__(np.array(data, copy=True, order="C"), requires_grad=True, name=name)
        self.decay = decay


ArrayLike = Union[Tensor, np.ndarray, float, int]


def as_tensor(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def record_op(op: str, data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """
    Wrap the result of a primitive and attach it to the graph.

    `backward` receives the upstream gradient and returns one gradient (or None) per
    parent, in the order given.
    """
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor(data)
    out.op = op
    if _grad_state["enabled"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# Elementwise arithmetic

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return record_op(
        "add",
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return record_op(
        "sub",
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return record_op(
        "mul",
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return record_op(
        "div",
        a.data / b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def neg(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return record_op("neg", -a.data, (a,), lambda g: (-g,))


def square(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return record_op("square", a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def exp(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return record_op("exp", out, (a,), lambda g: (g * out,))


def log(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return record_op("log", out, (a,), lambda g: (g / a.data,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -x))


def sigmoid(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.data)
    return record_op("sigmoid", s, (a,), lambda g: (g * s * (1.0 - s),))


def softplus(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return record_op("softplus", np.logaddexp(0.0, a.data), (a,), lambda g: (g * _sigmoid(a.data),))


def silu(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.data)
    return record_op("silu", a.data * s, (a,), lambda g: (g * (s + a.data * s * (1.0 - s)),))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: ArrayLike) -> Tensor:
    """Tanh approximation of GELU."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    th = np.tanh(inner)

    def backward(g):
        d_inner = _GELU_C * (1.0 + 3.0 * 0.044715 * x ** 2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * d_inner),)

    return record_op("gelu", 0.5 * x * (1.0 + th), (a,), backward)


def xlogx(a: ArrayLike) -> Tensor:
    """Elementwise p*log(p) with 0*log(0) taken as 0."""
    a = as_tensor(a)
    positive = a.data > 0
    safe = np.where(positive, a.data, 1.0)
    out = np.where(positive, a.data * np.log(safe), 0.0)
    return record_op("xlogx", out, (a,), lambda g: (g * np.where(positive, np.log(safe) + 1.0, 0.0),))


def detach(a: ArrayLike) -> Tensor:
    return Tensor(as_tensor(a).data)


# Reductions and shape plumbing

def tsum(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return record_op("sum", np.sum(a.data, axis=axis, keepdims=keepdims), (a,), backward)


def mean(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return record_op("mean", np.mean(a.data, axis=axis, keepdims=keepdims), (a,), backward)


def reshape(a: ArrayLike, shape) -> Tensor:
    a = as_tensor(a)
    return record_op("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def index(a: ArrayLike, key) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        grad = np.zeros_like(a.data)
        np.add.at(grad, key, g)
        return (grad,)

    return record_op("index", np.array(a.data[key], copy=True), (a,), backward)


def flip(a: ArrayLike, axis: int = 0) -> Tensor:
    """Reverse along `axis` (the time axis for sequence tensors)."""
    a = as_tensor(a)
    return record_op(
        "flip",
        np.ascontiguousarray(np.flip(a.data, axis=axis)),
        (a,),
        lambda g: (np.ascontiguousarray(np.flip(g, axis=axis)),),
    )


def concat(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return record_op(
        "concat",
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.split(g, cuts, axis=axis)),
    )


def stack(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    return record_op(
        "stack",
        np.stack([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(tensors))),
    )


# Linear algebra and neural primitives

def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return record_op("matmul", a.data @ b.data, (a, b), backward)


def linear(x: ArrayLike, W: ArrayLike, b: Optional[ArrayLike] = None) -> Tensor:
    """Affine map over the last axis: x @ W + b."""
    x, W = as_tensor(x), as_tensor(W)
    if W.ndim != 2 or x.ndim < 1 or x.shape[-1] != W.shape[0]:
        raise ShapeError(f"linear expects [..., {W.shape[0] if W.ndim == 2 else '?'}] input, got {x.shape} with W {W.shape}")
    d_in, d_out = W.shape
    parents = [x, W]
    out = x.data @ W.data
    if b is not None:
        b = as_tensor(b)
        if b.shape != (d_out,):
            raise ShapeError(f"linear bias must have shape ({d_out},), got {b.shape}")
        out = out + b.data
        parents.append(b)

    def backward(g):
        g2 = g.reshape(-1, d_out)
        grads = [g @ W.data.T, x.data.reshape(-1, d_in).T @ g2]
        if b is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    return record_op("linear", out, parents, backward)


def softmax(x: ArrayLike, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[axis] < 1:
        raise ShapeError("softmax needs a non-empty axis")
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - np.sum(g * s, axis=axis, keepdims=True)),)

    return record_op("softmax", s, (x,), backward)


def layer_norm(x: ArrayLike, gain: ArrayLike, bias: ArrayLike, eps: float = 1e-5) -> Tensor:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if d < 1 or gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm over {x.shape} needs gain/bias of shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv

    def backward(g):
        gx_hat = g * gain.data
        gx = inv / d * (
            d * gx_hat
            - gx_hat.sum(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True)
        )
        lead = tuple(range(x.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return record_op("layer_norm", xhat * gain.data + bias.data, (x, gain, bias), backward)


def conv1d_causal(x: ArrayLike, kernel: ArrayLike) -> Tensor:
    """
    Depthwise causal convolution: y[t, d] = sum_k kernel[k, d] * x[t - k, d], with
    x taken as zero before the first frame.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 2 or kernel.ndim != 2 or kernel.shape[1] != x.shape[1] or kernel.shape[0] < 1:
        raise ShapeError(f"conv1d_causal expects x [T,D] and kernel [W,D], got {x.shape} and {kernel.shape}")
    steps = x.shape[0]
    taps = min(kernel.shape[0], steps)
    out = np.zeros_like(x.data)
    for k in range(taps):
        out[k:] += kernel.data[k] * x.data[: steps - k]

    def backward(g):
        gx = np.zeros_like(x.data)
        gk = np.zeros_like(kernel.data)
        for k in range(taps):
            gx[: steps - k] += kernel.data[k] * g[k:]
            gk[k] = (g[k:] * x.data[: steps - k]).sum(axis=0)
        return gx, gk

    return record_op("conv1d_causal", out, (x, kernel), backward)


# Reverse pass

_ACTIVE, _DONE = 1, 2


def _topological_order(root: Tensor) -> List[Tensor]:
    order = []
    state = {}
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        key = id(node)
        if expanded:
            state[key] = _DONE
            order.append(node)
            continue
        seen = state.get(key)
        if seen == _DONE:
            continue
        if seen == _ACTIVE:
            raise GraphError("cycle detected in computation graph")
        state[key] = _ACTIVE
        stack.append((node, True))
        for parent in node._parents:
            parent_state = state.get(id(parent))
            if parent_state == _ACTIVE:
                raise GraphError("cycle detected in computation graph")
            if parent_state is None:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, parameters: Optional[Sequence[Tensor]] = None) -> Optional[List[np.ndarray]]:
    """
    Accumulate d(loss)/d(leaf) into `.grad` of every leaf that requires a gradient.

    When `parameters` is given, returns their gradients in order; a parameter the loss
    does not reach gets an exact zero array.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = _topological_order(loss)
    pending = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if not node._parents:
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, parent_grad in zip(node._parents, node._backward(g)):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = parent_grad if key not in pending else pending[key] + parent_grad
    if parameters is None:
        return None
    return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in parameters]


def zero_grad(parameters: Sequence[Tensor]) -> None:
    for p in parameters:
        p.grad = None


def finite_difference_check(
    f: Callable[[], Tensor],
    parameters: Sequence[Parameter],
    step: float = 1e-5,
    max_entries: Optional[int] = None,
    seed: int = 0,
) -> float:
    """
    Compare reverse-mode gradients of the scalar `f()` with central differences.

    `f` closes over `parameters`; entries are perturbed in place and restored.
    Returns max |analytic - numeric| / max(1, |numeric|). With `max_entries`, each
    parameter contributes at most that many entries, picked by a seeded draw.
    """
    first, second = f(), f()
    if not np.array_equal(first.data, second.data):
        raise NonDeterminismError("two evaluations of the checked function disagree")

    zero_grad(parameters)
    analytic = backward(f(), parameters)
    picker = Rng(seed, ("finite-difference",))
    worst = 0.0
    with no_grad():
        for param, grad in zip(parameters, analytic):
            flat = param.data.reshape(-1)
            if not np.shares_memory(flat, param.data):
                raise GraphError(f"parameter {param.name} is not contiguous")
            flat_grad = grad.reshape(-1)
            if max_entries is None or flat.size <= max_entries:
                entries = range(flat.size)
            else:
                entries = picker.choice(flat.size, size=max_entries, replace=False)
            for i in entries:
                original = flat[i]
                flat[i] = original + step
                plus = f().item()
                flat[i] = original - step
                minus = f().item()
                flat[i] = original
                numeric = (plus - minus) / (2.0 * step)
                error = abs(flat_grad[i] - numeric) / max(1.0, abs(numeric))
                if error > worst:
                    worst = error
    zero_grad(parameters)
    logger.debug(f"finite-difference check over {len(parameters)} parameters: max error {worst:.3e}")
    return worst


# Randomness

def _stream_key(part: Union[int, str]) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    if part < 0:
        raise ConfigError(f"stream keys must be non-negative, got {part}")
    return int(part)


class Rng:
    """
    Seeded PCG64 stream addressed by (seed, path).

    The path is a tuple of ints and strings (strings are keyed by CRC-32); the pair is
    fed to numpy's SeedSequence as entropy and spawn key, so a given (seed, path)
    yields the same draws on every platform.
    """

    def __init__(self, seed: int, path: Sequence[Union[int, str]] = ()):
        if seed < 0:
            raise ConfigError(f"seed must be non-negative, got {seed}")
        self.seed = int(seed)
        self.path = tuple(path)
        sequence = np.random.SeedSequence(self.seed, spawn_key=tuple(_stream_key(p) for p in self.path))
        self._generator = np.random.Generator(np.random.PCG64(sequence))

    def child(self, *path: Union[int, str]) -> "Rng":
        return Rng(self.seed, self.path + tuple(path))

    def normal(self, shape, scale: float = 1.0) -> np.ndarray:
        return self._generator.normal(0.0, scale, size=shape)

    def uniform(self, low: float, high: float, shape=None):
        return self._generator.uniform(low, high, size=shape)

    def integers(self, low: int, high: int, size=None):
        return self._generator.integers(low, high, size=size)

    def choice(self, options, size=None, replace: bool = True, p=None):
        return self._generator.choice(options, size=size, replace=replace, p=p)

    def random(self) -> float:
        return float(self._generator.random())
