"""Finite-difference gradient checking in 64-bit shadow precision."""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np

from .nn import Module
from .tensor import Tensor, backward, no_grad, precision, record_switches, replay_switches


@contextlib.contextmanager
def shadow64(*objects):
    """Run with every parameter, buffer and tensor of ``objects`` promoted to float64.

    Original arrays (including batch-norm running statistics) are restored on
    exit, so a check never mutates the model it inspects.
    """
    saved_tensors, saved_buffers = [], []
    seen = set()
    for obj in objects:
        if isinstance(obj, Module):
            tensors = obj.parameters()
            for m in obj.modules():
                for key, arr in m._buffers.items():
                    saved_buffers.append((m, key, arr))
                    m._buffers[key] = arr.astype(np.float64)
        else:
            tensors = [obj]
        for t in tensors:
            if id(t) in seen:
                continue
            seen.add(id(t))
            saved_tensors.append((t, t.data, t.grad))
            t.data = t.data.astype(np.float64)
            t.grad = None
    try:
        with precision(np.float64):
            yield
    finally:
        for t, data, grad in saved_tensors:
            t.data, t.grad = data, grad
        for m, key, arr in saved_buffers:
            m._buffers[key] = arr


def relative_error(analytic, numeric, floor=1e-8):
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


@dataclass
class GradCheckReport:
    probes: list = field(default_factory=list)  # (label, index, analytic, numeric, rel_err)

    @property
    def max_rel_error(self):
        return max((p[4] for p in self.probes), default=0.0)

    def passed(self, tol=1e-3):
        return self.max_rel_error < tol

    def worst(self):
        return max(self.probes, key=lambda p: p[4]) if self.probes else None


def gradcheck(loss_fn, targets, modules=(), n_probes=20, h=1e-3, seed=0, freeze_switches=True):
    """Compare analytic gradients of ``loss_fn()`` with central differences.

    ``targets`` is a list of ``(label, Tensor)`` whose entries may be probed;
    each probe picks a target uniformly, then an element uniformly. The whole
    evaluation (analytic and numeric) runs in float64.
    """
    rng = np.random.default_rng(seed)
    tensors = [t for _, t in targets]
    report = GradCheckReport()
    with shadow64(*modules, *tensors):
        flags = [t.requires_grad for t in tensors]
        for t in tensors:
            t.requires_grad = True
            t.grad = None
        if freeze_switches:
            with record_switches() as tape:
                loss = loss_fn()
        else:
            tape = None
            loss = loss_fn()
        backward(loss)
        analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]
        for _ in range(n_probes):
            k = int(rng.integers(len(targets)))
            t = tensors[k]
            idx = int(rng.integers(t.size))
            flat = t.data.reshape(-1)
            orig = flat[idx]
            flat[idx] = orig + h
            plus = _value(loss_fn, tape)
            flat[idx] = orig - h
            minus = _value(loss_fn, tape)
            flat[idx] = orig
            numeric = (plus - minus) / (2 * h)
            a = float(analytic[k].reshape(-1)[idx])
            report.probes.append((targets[k][0], idx, a, numeric, relative_error(a, numeric)))
        for t, flag in zip(tensors, flags):
            t.requires_grad = flag
    return report


def _value(loss_fn, tape):
    with no_grad():
        if tape is None:
            return float(loss_fn().data)
        with replay_switches(tape):
            return float(loss_fn().data)


def weighted_sum_loss(fn, out_shape, seed=1):
    """Wrap ``fn`` so its output is reduced against fixed random weights."""
    weights = np.random.default_rng(seed).standard_normal(out_shape)

    def loss():
        out = fn()
        return (out * Tensor(weights)).sum()

    return loss


def randomize(module, seed=0, scale=0.5):
    """Overwrite every parameter with random values (zero-initialized ones included)."""
    rng = np.random.default_rng(seed)
    for _, p in module.named_parameters():
        fan = p.data[0].size if p.ndim > 1 else 1
        p.data[...] = rng.uniform(-scale, scale, size=p.shape) / np.sqrt(fan)
    return module
