"""Smoke test for the fppopf extension module.

Build and install first, e.g. `maturin develop -m crates/python/Cargo.toml`.
"""

import json
import math
import pathlib
import sys

import fppopf

CASES = pathlib.Path(__file__).resolve().parent.parent / "crates" / "core" / "cases"


def check(cond, msg):
    if not cond:
        print(f"FAIL: {msg}")
        sys.exit(1)
    print(f"ok: {msg}")


def main():
    wb5 = fppopf.Case(str(CASES / "wb5.m"))
    check(wb5.dim == 5 and wb5.num_constraints == 30, f"loaded {wb5!r}")

    report = fppopf.solve(wb5)
    check(report.status == "feasible" and report.exit_code == 0, f"solved {report!r}")
    check(report.max_violation <= 1e-7, f"violation {report.max_violation:.2e}")
    mags = [m for _, _, m, _ in report.voltages]
    check(all(0.95 - 1e-9 <= m <= 1.05 + 1e-9 for m in mags), "voltages within limits")
    check(report.slacks is None, "no slacks outside diagnosis")

    again = fppopf.Report.from_json(report.to_json())
    ok, violation, cost = fppopf.validate(wb5, again)
    check(ok and math.isclose(cost, report.cost, rel_tol=1e-6), "report round trip validates")
    check(json.loads(wb5.to_json())["base_mva"] == 100.0, "case exports JSON")

    warm = fppopf.solve(wb5, warm_start=report)
    check(warm.iterations <= report.iterations, "warm start does not need more iterations")

    q70 = fppopf.Case(str(CASES / "wb5_q70.m"))
    diag = fppopf.diagnose(q70)
    check(diag.exit_code == 2 and diag.slacks[0][1] > 1e-8, f"diagnosis ranks {diag.slacks[0][0]}")

    plus, minus, eig = fppopf.eigen_split([[1.0, 2j], [-2j, -1.0]])
    check(abs(plus[0][0] + minus[0][0] - 1.0) < 1e-12 and len(eig) == 2, "eigen split recomposes")

    try:
        fppopf.solve(wb5, eps2=-1.0)
    except ValueError:
        check(True, "bad options raise ValueError")
    else:
        check(False, "bad options raise ValueError")

    print("smoke test passed")


if __name__ == "__main__":
    main()
