"""Dense float64 math with reverse-mode gradients.

Everything trainable in this package is expressed over :class:`Tensor`, a thin
wrapper around a float64 ``numpy`` array that records the operations applied to
it. Calling :meth:`Tensor.backward` on a scalar result replays the tape and
accumulates gradients into every reachable parameter. Analytic gradients are
never trusted blindly: :func:`finite_diff_check` compares them against central
differences and is wired into the test suite for every operation and for the
full composed loss.

Also here: the seeded RNG wrapper used for reproducibility and the plain-numpy
``softmax`` / ``stable_log`` helpers shared by non-trainable code paths.
"""

from __future__ import annotations

import ctypes
import ctypes.util
import math
import sys
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

LOG_EPS = 1e-12  # floor for log arguments; keeps NLL terms finite when a hazard saturates


def _tune_allocator() -> None:
    # Training allocates and frees multi-MB gradient arrays every step; glibc's
    # default trim/mmap behavior returns them to the OS each time, and the
    # resulting page faults dominate the step cost. Keep the heap resident.
    if not sys.platform.startswith("linux"):
        return
    try:
        libc = ctypes.CDLL(ctypes.util.find_library("c") or "libc.so.6")
        M_TRIM_THRESHOLD, M_MMAP_THRESHOLD = -1, -3
        libc.mallopt(M_TRIM_THRESHOLD, 1 << 30)
        libc.mallopt(M_MMAP_THRESHOLD, 1 << 30)
    except OSError:  # non-glibc platforms: harmless to skip
        pass


def _pin_blas_threads() -> None:
    # Every BLAS call here is small or bandwidth-bound; OpenBLAS threading only
    # adds synchronization cost (measured 3-5x slowdown on 2 cores), and a
    # fixed thread count keeps reduction order identical across machines.
    try:
        from threadpoolctl import threadpool_limits

        threadpool_limits(limits=1, user_api="blas")
    except Exception:
        pass


_tune_allocator()
_pin_blas_threads()

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable tape recording inside the block (pure-value evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A float64 array plus the tape edge that produced it.

    Leaf tensors created with ``requires_grad=True`` own a same-shape ``grad``
    buffer. Intermediate results hold references to their parents and a closure
    computing parent gradients from the output gradient.
    """

    __slots__ = ("value", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self.grad = np.zeros_like(self.value) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def _needs(self) -> bool:
        return self.requires_grad or bool(self._parents)

    def detach(self) -> "Tensor":
        """A constant copy cut off from the tape."""
        return Tensor(self.value.copy())

    def item(self) -> float:
        if self.value.size != 1:
            raise ValueError("item() requires a single-element tensor")
        return float(self.value.reshape(-1)[0])

    def __float__(self) -> float:
        return self.item()

    def backward(self) -> list["Tensor"]:
        """Accumulate d(self)/d(param) into every reachable parameter.

        Returns the list of parameter tensors touched by this graph so the
        optimizer can skip untouched parameters.
        """
        if self.value.size != 1:
            raise ValueError("backward requires a scalar output")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p._needs() and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.value)}
        touched: list[Tensor] = []
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad += g
                touched.append(node)
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent._needs():
                    continue
                k = id(parent)
                if k in grads:
                    grads[k] = grads[k] + pg
                else:
                    grads[k] = pg
        return touched

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.value.shape}{tag})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(value: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    if not _grad_enabled or not any(p._needs() for p in parents):
        return Tensor(value)
    t = Tensor(value)
    t._parents = parents
    t._backward = backward
    return t


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.value + b.value
    return _node(out, (a, b), lambda g: (_unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.value - b.value
    return _node(out, (a, b), lambda g: (_unbroadcast(g, a.value.shape), _unbroadcast(-g, b.value.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.value * b.value
    return _node(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.value, a.value.shape), _unbroadcast(g * a.value, b.value.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.value / b.value
    return _node(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.value, a.value.shape),
            _unbroadcast(-g * a.value / (b.value * b.value), b.value.shape),
        ),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.value, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.value @ b.value

    def back(g):
        av, bv = a.value, b.value
        # rank-1 products (row @ matrix weight grads) hit a slow BLAS path;
        # broadcast-multiply is the same outer product at memory speed
        ga = g * bv.T if bv.shape[1] == 1 else g @ bv.T
        gb = av.T * g if av.shape[0] == 1 else av.T @ g
        return ga, gb

    return _node(out, (a, b), back)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _node(a.value.T, (a,), lambda g: (g.T,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.value)
    return _node(y, (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    # stable both directions
    y = np.where(a.value >= 0, 1.0 / (1.0 + np.exp(-a.value)), np.exp(a.value) / (1.0 + np.exp(a.value)))
    return _node(y, (a,), lambda g: (g * y * (1.0 - y),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    y = np.maximum(a.value, 0.0)
    return _node(y, (a,), lambda g: (g * (a.value > 0.0),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.value)
    return _node(y, (a,), lambda g: (g * y,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    y = np.sqrt(a.value)
    return _node(y, (a,), lambda g: (g * 0.5 / y,))


def log(a) -> Tensor:
    """Clamped natural log: ln(max(x, LOG_EPS)).

    The gradient is 1/x above the clamp and exactly 0 below it, matching the
    flat forward value so finite differences agree.
    """
    a = as_tensor(a)
    y = np.log(np.maximum(a.value, LOG_EPS))
    mask = a.value > LOG_EPS
    return _node(y, (a,), lambda g: (g * np.where(mask, 1.0 / np.where(mask, a.value, 1.0), 0.0),))


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    y = a.value.sum(axis=axis, keepdims=keepdims)

    def back(g):
        gg = np.asarray(g)
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        return (np.broadcast_to(gg, a.value.shape).copy(),)

    return _node(np.asarray(y), (a,), back)


def tmean(a) -> Tensor:
    a = as_tensor(a)
    n = a.value.size
    y = np.asarray(a.value.mean())
    return _node(y, (a,), lambda g: (np.broadcast_to(np.asarray(g) / n, a.value.shape).copy(),))


def softmax_t(a, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis`` (tape op)."""
    a = as_tensor(a)
    shifted = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return ((g - dot) * y,)

    return _node(y, (a,), back)


def logsumexp_t(a) -> Tensor:
    """log(sum(exp(a))) over all entries, stable; returns a 1x1 tensor."""
    a = as_tensor(a)
    m = a.value.max()
    y = np.asarray(m + np.log(np.exp(a.value - m).sum())).reshape(1, 1)
    sm = np.exp(a.value - m)
    sm = sm / sm.sum()
    return _node(y, (a,), lambda g: (g.reshape(-1)[0] * sm,))


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out = np.concatenate([p.value for p in parts], axis=axis)
    sizes = [p.value.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        return tuple(np.take(g, range(offsets[i], offsets[i + 1]), axis=axis) for i in range(len(parts)))

    return _node(out, tuple(parts), back)


def pick(a, index: int) -> Tensor:
    """Select one entry of a row vector / flat tensor as a 1x1 tensor."""
    a = as_tensor(a)
    flat = a.value.reshape(-1)
    if not 0 <= index < flat.size:
        raise IndexError(f"pick index {index} out of range for size {flat.size}")
    y = np.asarray(flat[index]).reshape(1, 1)

    def back(g):
        gg = np.zeros_like(a.value)
        gg.reshape(-1)[index] = np.asarray(g).reshape(-1)[0]
        return (gg,)

    return _node(y, (a,), back)


# ---------------------------------------------------------------------------
# plain-numpy helpers shared by non-trainable paths
# ---------------------------------------------------------------------------


def softmax(v) -> np.ndarray:
    """Stable softmax of a nonempty 1-D vector; output sums to 1."""
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise ValueError("empty vector")
    if not np.all(np.isfinite(v)):
        raise ValueError("non-finite input to softmax")
    e = np.exp(v - v.max())
    return e / e.sum()


def stable_log(x: float) -> float:
    """ln(max(x, 1e-12)); rejects negative probabilities."""
    if x < 0:
        raise ValueError("negative probability")
    return math.log(max(float(x), LOG_EPS))


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


class ParamStore:
    """Named parameter tensors with parallel same-shape gradient slots."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._params.items())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad[...] = 0.0

    def grads(self) -> dict[str, np.ndarray]:
        return {name: t.grad for name, t in self._params.items()}

    def n_entries(self) -> int:
        return sum(t.value.size for t in self._params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.value.copy() for name, t in self._params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self._params):
            missing = set(self._params) ^ set(state)
            raise ValueError(f"parameter name mismatch: {sorted(missing)}")
        for name, arr in state.items():
            t = self._params[name]
            if t.value.shape != arr.shape:
                raise ValueError(f"shape mismatch for {name!r}")
            t.value[...] = arr


# ---------------------------------------------------------------------------
# seeded RNG
# ---------------------------------------------------------------------------


class Rng:
    """Deterministic PCG64 stream; equal seeds give bit-identical streams.

    ``substream(*key)`` derives an independent generator from (seed, key...),
    which makes per-patient generation order-independent.
    """

    def __init__(self, seed: int, _key: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.key = tuple(int(k) for k in _key)
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.seed, *self.key])))

    def substream(self, *key: int) -> "Rng":
        return Rng(self.seed, self.key + tuple(key))

    def __getattr__(self, attr):
        # proxy standard_normal / uniform / permutation / exponential / weibull / ...
        return getattr(self._gen, attr)

    def get_state(self) -> dict:
        return self._gen.bit_generator.state

    def set_state(self, state: dict) -> None:
        self._gen.bit_generator.state = state


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckFailure:
    param: str
    index: int
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class GradCheckReport:
    """Per-parameter worst relative error of analytic vs central-difference gradients."""

    step: float
    tol: float
    max_rel_error: dict[str, float] = field(default_factory=dict)
    failures: list[GradCheckFailure] = field(default_factory=list)
    entries_checked: int = 0

    @property
    def passed(self) -> bool:
        return not self.failures

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    def summary(self) -> str:
        lines = [
            f"gradient check: {'PASS' if self.passed else 'FAIL'} "
            f"({self.entries_checked} entries, step={self.step:g}, tol={self.tol:g}, worst={self.worst:.3e})"
        ]
        for name in sorted(self.max_rel_error):
            lines.append(f"  {name}: max rel err {self.max_rel_error[name]:.3e}")
        for f in self.failures[:20]:
            lines.append(
                f"  FAIL {f.param}[{f.index}] analytic={f.analytic:.6e} numeric={f.numeric:.6e} rel={f.rel_error:.3e}"
            )
        return "\n".join(lines)


def finite_diff_check(
    f: Callable[[ParamStore], Tensor],
    params: ParamStore,
    step: float = 1e-5,
    tol: float = 1e-4,
    entries_per_param: int | None = None,
    rng: Rng | None = None,
) -> GradCheckReport:
    """Compare analytic gradients of ``f`` against central differences.

    ``f`` must be pure and deterministic: it is re-evaluated at perturbed
    parameter values. Relative error per entry is |a-n| / max(1e-8, |a|+|n|).
    ``entries_per_param`` caps how many entries of each parameter are probed
    (seeded subsample); by default every entry is checked.
    """
    if not (1e-6 <= step <= 1e-3):
        raise ValueError(f"step {step:g} outside [1e-6, 1e-3]")
    params.zero_grad()
    out = f(params)
    if not np.isfinite(out.value).all():
        raise ValueError("objective not finite")
    base = out.item()
    out.backward()
    analytic = {name: t.grad.copy() for name, t in params.items()}

    report = GradCheckReport(step=step, tol=tol)
    pick_rng = rng if rng is not None else Rng(0)
    for name, t in params.items():
        flat = t.value.reshape(-1)
        n = flat.size
        if entries_per_param is not None and n > entries_per_param:
            idxs = pick_rng.choice(n, size=entries_per_param, replace=False)
        else:
            idxs = range(n)
        worst = 0.0
        for i in idxs:
            i = int(i)
            orig = flat[i]
            with no_grad():
                flat[i] = orig + step
                fp = f(params).item()
                flat[i] = orig - step
                fm = f(params).item()
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise ValueError("objective not finite")
            numeric = (fp - fm) / (2.0 * step)
            a = float(analytic[name].reshape(-1)[i])
            rel = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            worst = max(worst, rel)
            report.entries_checked += 1
            if rel > tol:
                report.failures.append(GradCheckFailure(name, i, a, numeric, rel))
        report.max_rel_error[name] = worst
    # keep the evaluation honest: f at the original point must still match
    with no_grad():
        if f(params).item() != base:
            raise ValueError("objective is not pure: value changed at the base point")
    return report
