"""Smoke test for the matw_py extension.

Build and install first:  pip install -e crates/matw-py --no-build-isolation
Then run:                 python3 python/smoke_test.py
"""

import math

import matw_py as m


def close(a, b, tol):
    assert abs(a - b) <= tol, f"{a} vs {b}"


def main():
    eye = m.Weight.identity(2, 2)
    c = m.characteristic(eye, 3.0, base="[-1,1)^2", depth=3)
    close(c["value"], 1.0, 1e-12)

    w = m.Weight.power_radial([[1.0, 0.5], [0.5, 1.0]], [[0.5, 0.0], [0.0, -0.5]], 2)
    assert w.n == 2 and w.d == 2
    close(w([0.5, 0.0])[0][0], math.sqrt(0.5), 1e-12)
    assert m.power_weight_is_a2([[1.0, 0.5], [0.5, 1.0]], [[0.5, 0.0], [0.0, -0.5]], 2)
    a2 = m.characteristic(w, 2.0, base="[-1,1)^2", depth=4)["value"]
    assert a2 >= 1.0

    f = m.Field.sample("[-1,1)^2", 4, 2, lambda x: [x[0] + x[1], math.sin(3 * x[0])])
    assert len(f) == 256 and f.n == 2

    fam = m.sparse_family(w, f, 2.0)
    assert fam["report"]["core_violations"] == 0 and fam["report"]["level_disjoint"]

    r = m.operator_ratio("max", w, f, alpha=0.5, characteristic=a2)
    assert r["q"] == 4.0 and math.isfinite(r["ratio"])
    out = m.apply_operator("riesz", w, f, alpha=0.5)
    assert len(out.values) == len(f.values)

    line = m.Field.sample("[0,1)^1", 10, 1, lambda x: [x[0]])
    close(m.poincare_ratio(m.Weight.identity(1, 1), line)["ratio"], 1 / math.sqrt(12), 1e-4)

    sol = m.solve(
        'base = "[0,1)^2"\ndepth = 3\nboundary = ["x + 2*y"]\n'
        'weight = { kind = "constant", n = 1, d = 2, matrix = [3.0] }\n'
    )
    close(sol([0.3, 0.6])[0], 1.5, 1e-10)

    ok, summary = m.run_criterion(1)
    assert ok, summary
    print(summary)
    print("matw_py smoke test passed")


if __name__ == "__main__":
    main()
