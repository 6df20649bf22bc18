#!/usr/bin/env python3
"""
Benchmark of the Monte Carlo derivative moment across grid sizes and thread counts.
Tests n in (256, 1024) with 1, 2 and 4 worker threads on Brownian drivers.
"""
import sys
import time
from datetime import datetime
from pathlib import Path

# Add app to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from app.models import TimeGrid
from app.schemas import BrownianSpec
from app.services.montecarlo_service import montecarlo_service
from app.services.verify_service import constants_for_kappa


def format_rate(paths, seconds):
    """Paths per second with a speed marker"""
    rate = paths / seconds if seconds > 0 else float("inf")
    if rate >= 200:
        return f"🟢 {rate:.0f}/s"
    elif rate >= 50:
        return f"🟡 {rate:.0f}/s"
    return f"🔴 {rate:.0f}/s"


def benchmark_moment(n: int, paths: int, kappa: float = 1.0):
    """Benchmark mc_moment on one grid size"""
    grid = TimeGrid(T=1.0, n=n)
    spec = BrownianSpec(kappa=kappa)
    constants = constants_for_kappa(kappa)

    print(f"\n{'=' * 72}")
    print(f"📐 Grid n={n}, {paths} paths, kappa={kappa}")
    print(f"{'=' * 72}\n")
    print(f"{'Threads':<10} {'Time':<12} {'Rate':<14} {'E|f|^b (y=1)':<16} {'CI':<12}")
    print(f"{'-' * 10} {'-' * 12} {'-' * 14} {'-' * 16} {'-' * 12}")

    for threads in (1, 2, 4):
        start = time.time()
        try:
            report = montecarlo_service.mc_moment(spec, constants, [1.0, 0.1], [1.0], range(paths), grid,
                                                  threads=threads)
        except Exception as e:
            print(f"{threads:<10} {'ERROR':<12} {'-':<14} {str(e)[:30]}")
            continue
        elapsed = time.time() - start
        entry = report.entries[0]
        print(f"{threads:<10} {elapsed:<12.2f} {format_rate(paths, elapsed):<14} "
              f"{entry.mean:<16.6f} {entry.ci:<12.2e}")


def main():
    """Main benchmark function"""
    print("\n🔬 loewner-lab - Monte Carlo benchmark")
    print(f"⏰ {datetime.now().strftime('%Y-%m-%d %H:%M:%S')}\n")

    paths = int(sys.argv[1]) if len(sys.argv) > 1 else 2000
    for n in (256, 1024):
        benchmark_moment(n, paths)

    print("\n" + "=" * 72)
    print("✅ Benchmark done")
    print("=" * 72 + "\n")


if __name__ == "__main__":
    main()
