"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a contiguous numpy array. Every differentiable kernel
records a node holding its parents and a closure mapping the output gradient
to parent gradients; :func:`backward` walks the recorded nodes in reverse
topological order and then releases the graph.

Thread-local state controls gradient recording, the default floating dtype
(32-bit unless inside :func:`precision`), finite-value checks and FLOP
accounting.
"""

from __future__ import annotations

import contextlib
import threading
from collections import defaultdict

import numpy as np

from .errors import NumericalError, UsageError

_local = threading.local()


def _state():
    if not hasattr(_local, "grad_enabled"):
        _local.grad_enabled = True
        _local.dtype = np.float32
        _local.check_finite = True
        _local.flop_counter = None
        _local.switches = None
    return _local


def get_default_dtype():
    return _state().dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype new tensors are created with."""
    st = _state()
    old = st.dtype
    st.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        st.dtype = old


@contextlib.contextmanager
def no_grad():
    st = _state()
    old = st.grad_enabled
    st.grad_enabled = False
    try:
        yield
    finally:
        st.grad_enabled = old


def is_grad_enabled():
    return _state().grad_enabled


@contextlib.contextmanager
def finite_checks(enabled):
    st = _state()
    old = st.check_finite
    st.check_finite = enabled
    try:
        yield
    finally:
        st.check_finite = old


class SwitchTape:
    """Records the active branch of piecewise kernels so later passes can replay it.

    Replaying evaluates the smooth continuation of the branch taken at the
    recording point, which is what a finite-difference probe of the
    derivative at that point needs.
    """

    def __init__(self):
        self.entries = []
        self.cursor = 0
        self.replaying = False

    def switch(self, op, compute):
        if not self.replaying:
            value = compute()
            self.entries.append((op, value))
            return value
        if self.cursor >= len(self.entries):
            raise UsageError("switch replay ran past the recorded forward pass")
        op_rec, value = self.entries[self.cursor]
        if op_rec != op:
            raise UsageError(f"switch replay expected {op_rec}, got {op}")
        self.cursor += 1
        return value


@contextlib.contextmanager
def record_switches():
    st = _state()
    old = st.switches
    tape = SwitchTape()
    st.switches = tape
    try:
        yield tape
    finally:
        st.switches = old


@contextlib.contextmanager
def replay_switches(tape):
    st = _state()
    old = st.switches
    tape.replaying, tape.cursor = True, 0
    st.switches = tape
    try:
        yield tape
    finally:
        st.switches = old
        tape.replaying = False


def branch(op, compute):
    """Return ``compute()`` or its recorded value when replaying a switch tape."""
    tape = _state().switches
    if tape is None:
        return compute()
    return tape.switch(op, compute)


class FlopCounter:
    """Accumulates analytic FLOP counts reported by kernels."""

    def __init__(self):
        self.by_op = defaultdict(int)

    @property
    def total(self):
        return sum(self.by_op.values())

    def add(self, op, n):
        self.by_op[op] += int(n)


@contextlib.contextmanager
def count_flops_scope():
    st = _state()
    old = st.flop_counter
    counter = FlopCounter()
    st.flop_counter = counter
    try:
        yield counter
    finally:
        st.flop_counter = old


def add_flops(op, n):
    counter = _state().flop_counter
    if counter is not None:
        counter.add(op, n)


class Tensor:
    """N-dimensional float array that can take part in autodiff.

    ``data`` is always a numpy array of the default dtype at creation time.
    Leaves with ``requires_grad`` accumulate into ``grad`` during backward.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None):
        dtype = dtype or get_default_dtype()
        self.data = np.ascontiguousarray(np.asarray(data, dtype=dtype))
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._op = None
        self._consumed = False

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self):
        return self._backward is None

    def numpy(self):
        return self.data.copy()

    def item(self):
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return self.shape[0]

    # -- operators (implemented in functional) -------------------------
    def __add__(self, other):
        from . import functional as F
        return F.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import functional as F
        return F.sub(self, other)

    def __rsub__(self, other):
        from . import functional as F
        return F.sub(other, self)

    def __mul__(self, other):
        from . import functional as F
        return F.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import functional as F
        return F.mul(self, -1.0)

    def __truediv__(self, other):
        from . import functional as F
        if isinstance(other, Tensor):
            raise UsageError("division by a tensor is not supported")
        return F.mul(self, 1.0 / other)

    def __matmul__(self, other):
        from . import functional as F
        return F.matmul(self, other)

    def reshape(self, *shape):
        from . import functional as F
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return F.reshape(self, shape)

    def transpose(self, *axes):
        from . import functional as F
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return F.transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        from . import functional as F
        return F.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import functional as F
        return F.mean(self, axis=axis, keepdims=keepdims)

    def backward(self):
        backward(self)


class Parameter(Tensor):
    """Trainable leaf tensor.

    ``name`` is filled in by the owning module tree; ``state`` is the
    optimizer's per-parameter slot (momentum buffer for SGD).
    """

    def __init__(self, data, name=None):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.state = None

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def make_node(data, parents, backward_fn, op):
    """Wrap a kernel result, recording a graph node when any parent needs grad."""
    st = _state()
    if st.check_finite and data.dtype.kind == "f" and not np.isfinite(data).all():
        raise NumericalError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    out._consumed = False
    needs = st.grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _topo_order(root):
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        if node._consumed:
            raise UsageError("graph already consumed by a previous backward()")
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss, parameters=None):
    """Back-propagate from a scalar ``loss``.

    Leaf tensors reachable from ``loss`` accumulate into ``.grad``. If
    ``parameters`` (an iterable of ``(name, Parameter)`` pairs) is given, the
    returned dict maps each name to its gradient, zeros for unreachable ones.
    The recorded graph is released afterwards; calling again raises
    :class:`UsageError`.
    """
    if loss.size != 1:
        raise UsageError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise UsageError("graph already consumed by a previous backward()")
    if loss.requires_grad:
        recorded = loss._backward is not None
        order = _topo_order(loss)
        grads = {id(loss): np.ones_like(loss.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for node in order:
            if node._backward is not None:
                node._backward = None
                node._parents = ()
                node._consumed = True
        if recorded:
            loss._consumed = True
    if parameters is None:
        return None
    out = {}
    for name, p in parameters:
        out[name] = np.zeros_like(p.data) if p.grad is None else p.grad
    return out
