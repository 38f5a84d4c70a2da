import json
import math

import numpy as np
import pytest

from pathflow.reports import Report, check_row, fit_order


def test_fit_order_recovers_slope():
    steps = [64, 128, 256, 512]
    fit = fit_order(steps, [3.0 / n**1.5 for n in steps])
    assert abs(fit.slope - 1.5) < 1e-12 and fit.r2 > 0.999999
    assert fit.label == "1.500"


def test_fit_order_exact_and_short_series():
    fit = fit_order([8, 16, 32], [0.0, 1e-14, 3e-12])
    assert fit.exact and math.isinf(fit.slope) and fit.label == "exact"
    with pytest.raises(ValueError):
        fit_order([8, 16], [1.0, 0.5])


def test_check_row_and_report_pass():
    ok = check_row("a", 1.0, 1.05, 0.01, 0.1)
    bad = check_row("b", 1.0, 1.5, 0.01, 0.1)
    assert ok["pass"] and not bad["pass"]
    assert Report("x", ["name", "pass"], [ok]).passed
    assert not Report("x", ["name", "pass"], [ok, bad]).passed
    assert not Report("x", ["name", "pass"], [ok], complete=False).passed


def test_csv_is_deterministic_and_sidecar_is_valid(tmp_path):
    rows = [check_row("a", np.float64(0.1), 0.2, 0.0, 1.0, extra=np.bool_(True))]
    rep = Report("x", ["name", "lhs", "rhs", "pass", "extra"], rows, config={"seed": 1},
                 diagnostics={"arr": np.arange(2), "nan": float("nan")})
    text = rep.csv_text()
    assert text == "name,lhs,rhs,pass,extra\na,0.1,0.2,true,true\n"
    out = rep.write(tmp_path / "r.csv")
    assert out.read_text() == text
    meta = json.loads((tmp_path / "r.json").read_text())
    assert meta["schema_version"] == 1 and meta["passed"] is True
    assert meta["diagnostics"] == {"arr": [0, 1], "nan": "nan"}
    assert {"version", "config", "wall_time", "complete"} <= set(meta)
