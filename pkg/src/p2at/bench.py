"""Wall-clock inference benchmark."""

from __future__ import annotations

import contextlib
import time
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError
from .model import count_flops, count_params
from .tensor import Tensor, no_grad


@dataclass
class BenchReport:
    input_shape: tuple
    iters: int
    mean_ms: float
    p50_ms: float
    p95_ms: float
    min_ms: float
    max_ms: float
    fps: float
    params: int
    flops: int

    def as_dict(self):
        return asdict(self)

    def lines(self):
        n, c, h, w = self.input_shape
        return [
            f"input      {n}x{c}x{h}x{w}",
            f"params     {self.params}",
            f"flops      {self.flops}",
            f"iters      {self.iters}",
            f"mean_ms    {self.mean_ms:.3f}",
            f"p50_ms     {self.p50_ms:.3f}",
            f"p95_ms     {self.p95_ms:.3f}",
            f"min_ms     {self.min_ms:.3f}",
            f"max_ms     {self.max_ms:.3f}",
            f"fps        {self.fps:.2f}",
        ]


@contextlib.contextmanager
def thread_limit(threads):
    """Cap BLAS threads while timing; ``None`` leaves the pool alone."""
    if threads is None:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=threads):
        yield


def bench(model, input_shape, warmup=2, iters=10, seed=0, threads=1):
    """Time single forward passes in eval mode; FPS is ``1000 / mean_ms`` (per batch)."""
    if iters < 1 or warmup < 0:
        raise ConfigError("bench needs iters >= 1 and warmup >= 0")
    input_shape = tuple(int(v) for v in input_shape)
    x = Tensor(np.random.default_rng(seed).random(input_shape, dtype=np.float32))
    was_training = model.training
    model.eval()
    times = []
    try:
        with thread_limit(threads), no_grad():
            for _ in range(warmup):
                model(x)
            for _ in range(iters):
                t0 = time.perf_counter()
                model(x)
                times.append((time.perf_counter() - t0) * 1e3)
    finally:
        model.train(was_training)
    t = np.array(times)
    mean = float(t.mean())
    return BenchReport(
        input_shape=input_shape,
        iters=iters,
        mean_ms=mean,
        p50_ms=float(np.percentile(t, 50)),
        p95_ms=float(np.percentile(t, 95)),
        min_ms=float(t.min()),
        max_ms=float(t.max()),
        fps=1000.0 / mean,
        params=count_params(model),
        flops=count_flops(model, input_shape),
    )
