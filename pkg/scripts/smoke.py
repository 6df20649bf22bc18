#!/usr/bin/env python3
"""
Smoke test script for loewner-lab
Checks the closed-form anchors of the zero driver and one CLI run end to end
"""
import cmath
import json
import math
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

# Add app to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from app.cli import EXIT_PASS, main as cli_main
from app.models import TimeGrid
from app.schemas import FlowConfig
from app.services.driver_service import driver_service
from app.services.flow_service import flow_service
from app.services.trace_service import trace_service
from app.services.verify_service import constants_for_kappa

GRID = TimeGrid(T=1.0, n=256)
SLIT = FlowConfig(scheme="slit", substeps=1)


def print_test(name, success, duration_ms, details=""):
    """Print test result"""
    status = "✅ PASS" if success else "❌ FAIL"
    print(f"{status} {name} ({duration_ms:.2f}ms) {details}")


def timed(name, check):
    """Run one check, print it and return whether it passed"""
    start = time.time()
    try:
        success, details = check()
    except Exception as e:
        success, details = False, str(e)
    print_test(name, success, (time.time() - start) * 1000, details)
    return success


def zero_driver():
    return driver_service.make_finite_energy(np.zeros(GRID.n), GRID)


def check_forward():
    g = flow_service.forward_point(zero_driver(), 3j, 1.0, SLIT).g
    err = abs(g - 1j * math.sqrt(5.0))
    return err < 1e-9, f"g_1(3i)={g:.6f} err={err:.1e}"


def check_inverse():
    f = flow_service.eval_f(zero_driver(), 1j * math.sqrt(5.0), 1.0, SLIT)
    err = abs(f - 3j)
    return err < 1e-9, f"f_1(i√5)={f:.6f} err={err:.1e}"


def check_derivative():
    fp = flow_service.fprime_variational(zero_driver(), 1j, 1.0, SLIT)
    expected = 1.0 / cmath.sqrt(5.0)
    err = abs(abs(fp) - expected.real)
    return err < 1e-5, f"|f'(i)|={abs(fp):.6f}"


def check_trace():
    trace = trace_service.extract_trace(zero_driver())
    err = trace_service.zero_trace_error(trace)
    norm = trace_service.holder_half_norm(trace)
    return err <= 1e-3 and abs(norm - 2.0) < 2e-2, f"sup err={err:.1e} holder={norm:.4f}"


def check_constants():
    c = constants_for_kappa(1.0)
    ok = math.isclose(c.b, 2.25) and math.isclose(c.q, 10.0) and math.isclose(c.alpha, 22.5)
    return ok, f"b={c.b} q={c.q:.4f} alpha={c.alpha:.4f}"


def check_cli():
    source = Path(__file__).parent.parent / "configs" / "trace.json"
    data = json.loads(source.read_text(encoding="utf-8"))
    data["grid"] = {"T": 1.0, "n": 64}
    data["plots"] = False
    with tempfile.TemporaryDirectory() as out:
        config = Path(out) / "trace.json"
        config.write_text(json.dumps(data), encoding="utf-8")
        code = cli_main(["run", str(config), "--out", str(Path(out) / "artifacts")])
        files = sorted(p.name for p in (Path(out) / "artifacts").iterdir())
    return code == EXIT_PASS, f"exit={code} files={len(files)}"


def main():
    """Run all smoke tests"""
    print("🧪 loewner-lab Smoke Tests\n")

    results = [
        ("Forward map", timed("Forward map", check_forward)),
        ("Inverse map", timed("Inverse map", check_inverse)),
        ("Derivative", timed("Derivative", check_derivative)),
        ("Zero trace", timed("Zero trace", check_trace)),
        ("Constants", timed("Constants", check_constants)),
        ("CLI trace run", timed("CLI trace run", check_cli)),
    ]

    # Summary
    print("\n" + "=" * 50)
    passed = sum(1 for _, success in results if success)
    total = len(results)
    print(f"Summary: {passed}/{total} tests passed")

    if passed == total:
        print("✅ All tests passed!")
        return 0
    print("❌ Some tests failed")
    return 1


if __name__ == "__main__":
    sys.exit(main())
