import time

import numpy as np

from mf3net import (
    DataStream,
    IIDEmbedding,
    Law,
    NetworkParams,
    ParticleSystem,
    default_model,
    euler_evolve,
    make_grid_task,
    sample_embedding,
    train,
)


def run_bench(n: int = 200, m: int = 800, T: float = 1.0, eps: float = 1e-3, h: float = 1e-2):
    spec = make_grid_task(8, "sin")
    model = default_model()
    e = IIDEmbedding(Law.parse("normal:1"), Law.parse("uniform:1"), Law.parse("uniform:1"), 0, spec.dim_d)

    W0 = NetworkParams(*sample_embedding(e, n, n))
    t0 = time.perf_counter()
    result = train(W0, DataStream(spec, 0), T, eps, model)
    dt = time.perf_counter() - t0
    print(f"SGD n={n}: {result.samples_used} steps in {dt:.3f}s => {result.samples_used / dt:.0f} steps/s")

    P0 = ParticleSystem(*sample_embedding(e, m, m))
    t0 = time.perf_counter()
    euler = euler_evolve(P0, spec, model, T, h)
    dt = time.perf_counter() - t0
    cells = euler.steps * m * m
    print(f"Euler m={m}: {euler.steps} steps in {dt:.3f}s => {cells / dt:.3g} w2 cells/s")
    print(f"sup|w2|={np.max(np.abs(euler.particles.w2)):.4f} (bound {euler.certificate.bound_w2:.4f})")


if __name__ == "__main__":
    run_bench()
