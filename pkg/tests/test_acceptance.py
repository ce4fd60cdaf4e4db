"""Exit criteria.  Each test prints one PASS/FAIL line and the session ends
with a summary of all of them (see conftest.py)."""

import hashlib
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from hwsupply.calibrate import calibrate_extended, chi2_from_totals, grid_search
from hwsupply.cli import main
from hwsupply.data_model import EXTENDED_FIELDS, ExitRates, ModelState, Params, Sex, AgeGroup
from hwsupply.demography import EntrantDistribution, interpolate_age_groups
from hwsupply.engine import InflowPlan, run_from_state, step
from hwsupply.forecast import combine_sd, density_gap
from hwsupply.scenario import new_faculty_inflow
from oracle import brute_run, brute_step
from synth import make_instance

pytestmark = pytest.mark.acceptance

RESULTS = {}

# Table 1 signs for the gaps the text singles out as significant.
PAPER_SIGNS = {
    ("AT", "GP"): -1, ("BE", "GP"): -1, ("LV", "GP"): +1, ("SI", "GP"): +1,
    ("HR", "SP"): +1, ("MT", "SP"): +1, ("PL", "SP"): +1, ("RO", "SP"): +1, ("SI", "SP"): +1,
    ("HR", "ALL"): +1, ("MT", "ALL"): +1, ("PL", "ALL"): +1, ("RO", "ALL"): +1, ("SI", "ALL"): +1,
}


def record(n, name, ok, detail):
    line = f"criterion {n:>2} {'PASS' if ok else 'FAIL'}  {name}: {detail}"
    RESULTS[n] = line
    print(line)
    assert ok, line


def _random_instance(rng, nf, na):
    ages = np.arange(30, 30 + na)
    fields = EXTENDED_FIELDS[:nf]
    n = rng.uniform(0, 100, (nf, 2, na))
    gamma = rng.uniform(0, 1, (2, na))
    choice = rng.dirichlet(np.ones(nf))
    params = Params(float(rng.uniform()), dict(zip(fields, choice / choice.sum())))
    return ages, fields, n, gamma, params


def test_1_stock_flow_consistency():
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(200):
        nf, na = int(rng.integers(1, 4)), int(rng.integers(2, 21))
        ages, fields, n, gamma, params = _random_instance(rng, nf, na)
        years = list(range(2000, 2041))
        entry = EntrantDistribution({Sex.MALE: 0.5, Sex.FEMALE: 0.5}, (int(ages[0]), int(ages[-1])))
        plan = InflowPlan({y: float(rng.uniform(0, 500)) for y in years}, entry, {}, 2040)
        traj = run_from_state(ModelState(2000, fields, ages, n), params, ExitRates(ages, gamma), plan, 2040)
        tot = traj.totals()
        resid = np.abs(np.diff(tot, axis=0) - (traj.entered[1:] - traj.exited[1:]))
        worst = max(worst, float(np.max(resid / np.maximum(np.abs(tot[:-1]), 1.0))))
    record(1, "stock-flow consistency", worst < 1e-9, f"max relative residual {worst:.2e} over 200 runs x 40 steps")


def test_2_oracle_equivalence():
    rng = np.random.default_rng(2)
    worst = 0.0
    start = time.perf_counter()
    for k in range(100):
        nf, na = int(rng.integers(1, 4)), int(rng.integers(2, 21))
        ages, fields, n, gamma, params = _random_instance(rng, nf, na)
        coef = [params.p_enter * params.field_choice[f] for f in fields]
        inflows = rng.uniform(0, 50, (5, 2, na))
        if k % 2 == 0:
            out = step(ModelState(2000, fields, ages, n), params, ExitRates(ages, gamma), inflows[0]).stocks
            ref = np.array(brute_step(n.tolist(), gamma.tolist(), coef, inflows[0].tolist()))
        else:
            entry = EntrantDistribution({Sex.MALE: 0.5, Sex.FEMALE: 0.5}, (int(ages[0]), int(ages[-1])))
            totals = {2000 + t: float(rng.uniform(0, 500)) for t in range(6)}
            plan = InflowPlan(totals, entry, {}, 2005)
            traj = run_from_state(ModelState(2000, fields, ages, n), params, ExitRates(ages, gamma), plan, 2005)
            out = traj.stocks
            ys = [plan.array(2000 + t, ages).tolist() for t in range(1, 6)]
            ref = np.array(brute_run(n.tolist(), gamma.tolist(), coef, ys))
        worst = max(worst, float(np.max(np.abs(out - ref))))
    elapsed = time.perf_counter() - start
    ok = worst < 1e-12 and elapsed < 1.0
    record(2, "oracle equivalence", ok, f"max abs difference {worst:.1e}, 100 instances in {elapsed:.2f} s")


def test_3_minimal_recovery():
    truth = Params.minimal(0.75, 0.32)
    stocks, rates, plan, _ = make_instance(truth, t0=2000, last=2016, ages=np.arange(20, 80))
    start = time.perf_counter()
    surface = grid_search(stocks, rates, plan, 2000, step=0.01)
    elapsed = time.perf_counter() - start
    ok = surface.argmin == truth and surface.chi2_min == 0.0 and surface.chi2.shape == (101, 101) and elapsed < 10
    detail = (f"argmin ({surface.argmin.p_enter}, {surface.argmin.p_gp}), chi2 {surface.chi2_min}, "
              f"101x101 grid in {elapsed:.2f} s")
    record(3, "minimal recovery", ok, detail)


def test_4_extended_recovery():
    errs = []
    for seed in range(10):
        rng = np.random.default_rng(100 + seed)
        truth = Params(float(rng.uniform(0.3, 1.0)), dict(zip(EXTENDED_FIELDS, rng.dirichlet(np.ones(6)).tolist())))
        stocks, rates, plan, _ = make_instance(truth, seed=100 + seed)
        init = Params(0.5, {f: 1 / 6 for f in EXTENDED_FIELDS})
        fit = calibrate_extended(stocks, rates, plan, 2000, init)
        errs.append(max([abs(fit.p_enter - truth.p_enter)]
                        + [abs(fit.field_choice[f] - truth.field_choice[f]) for f in EXTENDED_FIELDS]))
    record(4, "extended recovery", max(errs) <= 0.02, f"worst l-inf error {max(errs):.2e} over 10 instances")


def test_5_hand_oracles():
    chi2 = float(chi2_from_totals(np.array([[90.0, 310.0]]), np.array([[100.0, 300.0]])))
    dg = density_gap(1000.0, 1100.0, 24, 500.0)
    ramp = {y: new_faculty_inflow(y) for y in (2019, 2024, 2029)}
    ok = abs(chi2 - 0.0033333333333333335) <= 1e-6 and abs(dg - (-100 / 12000)) <= 1e-9
    ok = ok and ramp == {2019: 0.0, 2024: 150.0, 2029: 300.0}
    record(5, "hand-computed oracles", ok, f"chi2 {chi2:.9f}, DG {dg:.9f}, ramp {ramp}")


def test_6_interpolation_conservation():
    rng = np.random.default_rng(6)
    worst, negative = 0.0, 0
    for _ in range(1000):
        cuts = np.sort(rng.choice(np.arange(21, 80), size=int(rng.integers(0, 10)), replace=False))
        edges = [20] + cuts.tolist() + [80]
        counts = rng.uniform(0, 5000, len(edges) - 1) * (rng.uniform(size=len(edges) - 1) > 0.1)
        grouped = {AgeGroup(a, b): float(c) for a, b, c in zip(edges, edges[1:], counts)}
        out = interpolate_age_groups(grouped)
        negative += sum(v < 0 for v in out.values())
        for g, c in grouped.items():
            s = math.fsum(out[a] for a in g.ages)
            worst = max(worst, abs(s - c) / c if c else abs(s))
    record(6, "interpolation conservation", worst <= 1e-9 and negative == 0,
           f"max relative group error {worst:.1e}, {negative} negative values")


def test_7_quadrature():
    sd = combine_sd([3.0, 12.0])
    ok = round(sd, 2) == 12.37 and round(sd) == 12
    record(7, "quadrature vs Table 1", ok, f"sqrt(3^2 + 12^2) = {sd:.4f} -> {round(sd)} (paper: 12)")


def test_8_eurostat_reproduction(tmp_path):
    src = os.environ.get("HWSUPPLY_EUROSTAT_DIR")
    if not src:
        RESULTS[8] = "criterion  8 SKIP  EUROSTAT reproduction: set HWSUPPLY_EUROSTAT_DIR to canonical 2000-2016 extracts"
        print(RESULTS[8])
        pytest.skip("HWSUPPLY_EUROSTAT_DIR not set")
    from hwsupply.ingest import data_files, read_bundles
    from hwsupply.pipeline import calibrate, prepare, run_forecast

    bundles = read_bundles(data_files(src))
    setup = prepare(bundles["AT"], "minimal", 2040, (), bundles.values())
    fit = calibrate(setup)
    ok = abs(fit.params.p_enter - 0.75) <= 0.05 and abs(fit.params.p_gp - 0.32) <= 0.05
    detail = [f"AT p_enter {fit.params.p_enter:.2f}, p_GP {fit.params.p_gp:.2f}"]
    mismatched = []
    for c in sorted({c for c, _ in PAPER_SIGNS} & set(bundles)):
        s = prepare(bundles[c], "minimal", 2040, (), bundles.values())
        rep = run_forecast(s, calibrate(s).params).report
        gaps = {g.label: g.dg for g in rep.fields}
        gaps["ALL"] = rep.aggregate.dg
        for (cc, label), sign in PAPER_SIGNS.items():
            if cc == c and np.sign(gaps[label]) != sign:
                mismatched.append(f"{c}/{label}")
    ok = ok and not mismatched
    detail.append(f"sign mismatches: {', '.join(mismatched) or 'none'}")
    record(8, "EUROSTAT reproduction", ok, "; ".join(detail))


def test_9_isodensity_properties(bundles):
    from hwsupply.pipeline import prepare, run_forecast

    checked, failures = 0, []
    for c, b in bundles.items():
        setup = prepare(b, "minimal", 2040, (), bundles.values())
        params = Params.minimal(0.9, 0.3)
        for scen in b.populations:
            fc = run_forecast(setup, params, scen)
            for f, line in fc.lines.items():
                checked += 1
                if line.values[2016] != b.stocks.field_total(f, 2016):
                    failures.append(f"{c}/{scen}/{f.code} C(2016)")
                for y, v in line.values.items():
                    lo, hi = line.envelope[y]
                    if not lo <= v <= hi:
                        failures.append(f"{c}/{scen}/{f.code}/{y} outside envelope")
    record(9, "isodensity and envelope", not failures,
           f"{checked} lines checked, {len(failures)} failures {failures[:3]}")


def _digest_tree(root):
    return {p.relative_to(root).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(Path(root).rglob("*")) if p.is_file()}


def test_10_determinism(data_dir, tmp_path):
    def full_run(out):
        codes = [
            main(["--data-dir", str(data_dir), "--out-dir", str(out), "ingest"]),
            main(["--data-dir", str(data_dir), "--out-dir", str(out), "calibrate", "--country", "AT"]),
            main(["--data-dir", str(data_dir), "--out-dir", str(out), "forecast", "--country", "AT",
                  "--intervention", str(data_dir / "new_faculty.json")]),
            main(["--data-dir", str(data_dir), "--out-dir", str(out / "ext"), "--model", "extended",
                  "calibrate", "--country", "AT"]),
            main(["--data-dir", str(data_dir), "--out-dir", str(out / "ext"), "--model", "extended",
                  "forecast", "--country", "AT"]),
        ]
        return codes, _digest_tree(out)

    codes_a, a = full_run(tmp_path / "a")
    codes_b, b = full_run(tmp_path / "b")
    ok = codes_a == codes_b == [0] * 5 and a == b and len(a) > 10
    differing = sorted(k for k in a.keys() | b.keys() if a.get(k) != b.get(k))
    record(10, "determinism", ok, f"{len(a)} files compared, differing: {differing or 'none'}")
