#!/usr/bin/env python3
"""
Benchmark slotpolicy throughput: expert data collection and rollout
evaluation with one worker vs a process pool, and encoder training steps
at f32 vs f64.
"""

import os
import sys
import tempfile
import time

from slotpolicy import tensor as T
from slotpolicy.config import Config
from slotpolicy.dataset import generate_dataset
from slotpolicy.evaluation import ExpertController, evaluate
from slotpolicy.parallel import default_workers
from slotpolicy.sim import SimConfig
from slotpolicy.trainer import Trainer


def benchmark(name, func, iterations=3):
    """Time a callable; returns avg/min/max seconds."""
    times = []
    for _ in range(iterations):
        start = time.time()
        func()
        times.append(time.time() - start)
    return {
        'name': name,
        'avg_time': sum(times) / len(times),
        'min_time': min(times),
        'max_time': max(times),
    }


def report_speedup(serial, parallel, unit_count, unit):
    print(f"  {serial['name']}: {serial['avg_time']:.3f}s ({unit_count / serial['avg_time']:,.1f} {unit}/sec)")
    print(f"  {parallel['name']}: {parallel['avg_time']:.3f}s ({unit_count / parallel['avg_time']:,.1f} {unit}/sec)")
    if parallel['avg_time'] > 0:
        print(f"  Speedup: {serial['avg_time'] / parallel['avg_time']:.2f}x")


def bench_collection(workers, episodes=16):
    sim = SimConfig(image_size=32)
    print(f"\nExpert collection ({episodes} push episodes, 32x32):")
    print("-" * 70)
    with tempfile.TemporaryDirectory() as tmpdir:
        def run(w):
            return lambda: generate_dataset(os.path.join(tmpdir, str(w)), ["push"], episodes=episodes,
                                            seed=0, shard_episodes=episodes, sim_config=sim, workers=w)
        serial = benchmark("1 worker", run(1), iterations=1)
        parallel = benchmark(f"{workers} workers", run(workers), iterations=1)
    report_speedup(serial, parallel, episodes, "episodes")


def bench_evaluation(workers, n=24):
    sim = SimConfig(image_size=32)
    controller = ExpertController("pick", sim)
    print(f"\nExpert evaluation ({n} pick rollouts):")
    print("-" * 70)
    serial = benchmark("1 worker", lambda: evaluate(controller, "pick", "none", n=n, repeats=1,
                                                    sim_config=sim, workers=1), iterations=1)
    parallel = benchmark(f"{workers} workers", lambda: evaluate(controller, "pick", "none", n=n, repeats=1,
                                                               sim_config=sim, workers=workers), iterations=1)
    report_speedup(serial, parallel, n, "rollouts")


def bench_training(steps=3):
    print(f"\nEncoder pretraining ({steps} steps, batch 4, 32x32, K=4):")
    print("-" * 70)
    with tempfile.TemporaryDirectory() as tmpdir:
        sim = SimConfig(image_size=32)
        generate_dataset(tmpdir, ["push"], episodes=4, seed=0, sim_config=sim, workers=1)
        for precision in ("f64", "f32"):
            T.set_precision(precision)
            config = Config()
            config.run.out = os.path.join(tmpdir, precision)
            config.data.dataset = tmpdir
            config.sim = sim
            config.encoder.image_size = 32
            config.encoder.slots = 4
            config.encoder.slot_dim = 32
            config.encoder.cnn_channels = (16, 16, 16)
            config.encoder.cnn_strides = (2, 1, 1)
            config.encoder.decoder_channels = 16
            config.train.steps = steps
            config.train.batch_size = 4
            result = benchmark(precision, lambda: Trainer(config).fit(), iterations=1)
            print(f"  {precision}: {result['avg_time'] / steps:.3f}s per step")
        T.set_precision("f64")


def main():
    workers = int(sys.argv[1]) if len(sys.argv) > 1 else min(default_workers(), 8)
    print("=" * 70)
    print(f"slotpolicy throughput benchmark (pool size {workers})")
    print("=" * 70)

    bench_collection(workers)
    bench_evaluation(workers)
    bench_training()

    print("\n" + "=" * 70)
    print("Benchmark Complete")
    print("=" * 70)
    print("\nNote: process pools pay a start-up cost per call; speedups grow with")
    print("the number of episodes and rollouts.")


if __name__ == '__main__':
    main()
