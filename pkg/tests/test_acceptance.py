"""End-to-end acceptance checks, one test per criterion.

Each test appends a ``[PASS]``/``[FAIL]`` line that is printed in the
pytest terminal summary (and immediately on stdout with ``-s``).
"""

import itertools
import os
import time

import numpy as np
import pytest

from ratpad import cmarmax, datasets, game, metrics, pipeline
from ratpad.density import DensityConfig, fit_density
from ratpad.fusion import fuse_prob

from conftest import ACCEPTANCE_LINES
from test_cmarmax import fd_relative_error
from test_metrics import brute_eer, brute_rates

pytestmark = pytest.mark.slow

SEEDS = (0, 1, 2)
HARD = {"name": "hard", "kind": "noise", "region": [0, 6, 2, 14], "strength": 0.5}


def record(n, title, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {title} -- {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


# shared runs -------------------------------------------------------------------

@pytest.fixture(scope="module")
def default_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("default_run")
    t0 = time.perf_counter()
    reports = pipeline.run_pipeline({}, str(out))
    return out, reports, time.perf_counter() - t0


@pytest.fixture(scope="module")
def hard_runs():
    species = [dict(name=s.name, kind=s.kind, region=s.region, strength=s.strength)
               for s in datasets.default_species()] + [HARD]
    runs = {}
    for seed in SEEDS:
        cfg = pipeline.resolve_config({"seed": seed, "synth": {"species": species, "n_bf": 80}})
        bank = pipeline.build_bank(pipeline.load_or_synth(cfg), cfg)
        tcfg = cmarmax.TrainConfig.from_dict(cfg["classifier"])
        runs[seed] = {
            "cmarmax": pipeline.run_protocol(bank, "known", seed, tcfg, "cmarmax"),
            "baseline_ce": pipeline.run_protocol(bank, "known", seed, tcfg, "baseline_ce"),
            "loo": pipeline.run_protocol(bank, "loo", seed, tcfg, species=["hard"]),
            "fewshot5": pipeline.run_protocol(bank, "fewshot5", seed, tcfg, species=["hard"]),
        }
    return runs


# criteria --------------------------------------------------------------------------

def test_c01_density_normalisation_and_causality():
    t0 = time.perf_counter()
    cfg = datasets.SynthConfig()
    pairs = datasets.generate_arrays(cfg)
    train = [v for r, v in pairs if r["species"] == datasets.BF and r["split"] == "train"]
    model = fit_density(train, DensityConfig(seed=0))
    frame = train[0][0]
    probs = model.value_probabilities(frame)
    norm_err = float(np.abs(probs.sum(-1) - 1.0).max())
    base = model.predict(frame)
    causal = True
    h, w = frame.shape[:2]
    for i, j in itertools.product(range(h), range(w)):
        g = frame.copy()
        g[i, j] = 255 - g[i, j]
        for a, b in zip(model.predict(g), base):
            k = i * w + j + 1
            causal &= np.array_equal(a[0].reshape(h * w, -1)[:k], b[0].reshape(h * w, -1)[:k])
    dt = time.perf_counter() - t0
    record(1, "density normalisation", norm_err <= 1e-6 and causal and dt < 30,
           f"max |sum p - 1| = {norm_err:.2e}, causality exact = {causal}, {dt:.1f}s")


def test_c02_gradient_correctness():
    t0 = time.perf_counter()
    errs = [fd_relative_error(100 + s) for s in range(5)]
    dt = time.perf_counter() - t0
    record(2, "C-marmax gradients vs finite differences", max(errs) < 1e-4 and dt < 60,
           f"max relative error {max(errs):.2e} over 5 networks, {dt:.1f}s")


def test_c03_eer_oracle():
    rng = np.random.default_rng(3)
    mismatches = 0
    for _ in range(200):
        res = int(rng.integers(3, 40))
        bf = list(rng.integers(0, res, int(rng.integers(1, 51))) / res)
        att = list(rng.integers(0, res, int(rng.integers(1, 51))) / res)
        mismatches += metrics.eer(bf, att) != brute_eer(bf, att)
        mismatches += any((a, b) != brute_rates(bf, att, t)
                          for t, a, b in metrics.det_curve(bf, att).rows())
    record(3, "EER oracle equivalence", mismatches == 0, f"{mismatches} mismatches in 200 sets")


def test_c04_fusion_algebra():
    rng = np.random.default_rng(4)
    a, b = rng.random(1000), rng.random(1000)
    a[:50], b[50:100] = 0.0, 1.0
    f = fuse_prob(a, b)
    checks = {
        "range": np.all((f >= 0) & (f <= 1)),
        "upper": np.all(f >= np.maximum(a, b) - 1e-12),
        "commutative": np.all(np.abs(f - fuse_prob(b, a)) <= 1e-12),
        "identity": np.all(np.abs(fuse_prob(a, np.zeros_like(a)) - a) <= 1e-12),
        "absorbing": np.all(np.abs(fuse_prob(a, np.ones_like(a)) - 1) <= 1e-12),
    }
    bad = [k for k, v in checks.items() if not v]
    record(4, "fusion algebra", not bad, "all properties hold" if not bad else f"broken: {bad}")


def test_c05_mpa_selection():
    rng = np.random.default_rng(5)
    failures = 0
    for _ in range(500):
        n = int(rng.integers(1, 7))
        det = rng.integers(0, 101, n) / 100
        costs = rng.integers(0, 50, n) / 100
        r, c_f = float(rng.uniform(0.1, 5)), float(rng.uniform(0.1, 5))
        p = game.PayoffParams(list(det), r=r, c_f=c_f, costs=list(costs))
        u = [r * (1 - d) - c_f * d - c for d, c in zip(det, costs)]
        brute = min(i for i in range(n) if u[i] == max(u))
        failures += game.select_mpa(p)[0] != brute
        zero = game.PayoffParams(list(det), r=r, c_f=c_f)
        failures += game.select_mpa(zero)[0] != int(np.argmin(det))
        lam = float(rng.choice([0.5, 2.0, 4.0]))
        scaled = game.PayoffParams(list(det), r=lam * r, c_f=lam * c_f, costs=list(lam * costs))
        failures += game.select_mpa(scaled)[0] != game.select_mpa(p)[0]
    record(5, "MPA selection", failures == 0, f"{failures} failures over 500 menus")


def test_c06_metric_identity(default_run):
    rng = np.random.default_rng(6)
    worst, count = 0.0, 0
    sets = [(rng.random(int(rng.integers(1, 60))), rng.random(int(rng.integers(1, 60))))
            for _ in range(300)]
    for bf, att in sets:
        acer, bpcer = metrics.acer_at_apcer(bf, att, 0.05)
        worst = max(worst, abs(bpcer - (2 * acer - 0.05)))
        count += 1
    for rep in default_run[1].values():
        for det in rep["detectors"].values():
            for m in det["species"].values():
                worst = max(worst, abs(m["bpcer"] - (2 * m["acer"] - 0.05)))
                count += 1
    record(6, "BPCER = 2 ACER - 5%", worst <= 1e-12, f"max deviation {worst:.1e} over {count} sets")


def test_c07_end_to_end_separable(default_run):
    _, reports, dt = default_run
    known = reports["known"]["detectors"]["fused"]["mpa_eer"]
    loo = reports["loo"]["detectors"]["fused"]["mpa_eer"]
    record(7, "end-to-end separable run", known <= 0.05 and loo <= 0.20 and dt < 600,
           f"known MPA-EER {known:.3f}, LOO MPA-EER {loo:.3f}, {dt:.0f}s")


def test_c08_worst_case_emphasis(hard_runs):
    wins, detail = 0, []
    for seed, r in hard_runs.items():
        cm = r["cmarmax"]["detectors"]["classifier"]["mpa_eer"]
        ce = r["baseline_ce"]["detectors"]["classifier"]["mpa_eer"]
        wins += cm <= ce
        detail.append(f"seed {seed}: {cm:.3f} vs {ce:.3f}")
    record(8, "C-marmax max-species EER <= cross-entropy baseline",
           wins * 2 > len(hard_runs), "; ".join(detail))


def test_c09_few_shot_trend(hard_runs):
    wins, detail = 0, []
    for seed, r in hard_runs.items():
        zero = r["loo"]["detectors"]["classifier"]["species"]["hard"]["eer"]
        five = r["fewshot5"]["detectors"]["classifier"]["species"]["hard"]["eer"]
        wins += five <= zero
        detail.append(f"seed {seed}: 5-shot {five:.3f} vs 0-shot {zero:.3f}")
    record(9, "few-shot EER <= zero-shot EER on the hard species",
           wins * 2 > len(hard_runs), "; ".join(detail))


def test_c10_fusion_safety(default_run):
    d = default_run[1]["known"]["detectors"]
    fused, clf, oc = d["fused"]["mpa_eer"], d["classifier"]["mpa_eer"], d["one_class"]["mpa_eer"]
    record(10, "fusion safety", fused <= min(clf, oc) + 0.05,
           f"fused {fused:.3f}, classifier {clf:.3f}, one-class {oc:.3f}")


def test_c11_one_class_attack_agnostic():
    def oc_params(species):
        cfg = pipeline.resolve_config({"synth": {"species": species}})
        bank = pipeline.build_bank(pipeline.load_or_synth(cfg), cfg)
        return bank.one_class.as_dict(), bank.fingerprints["one_class"]

    with_att, fp_a = oc_params([dict(name=s.name, kind=s.kind, region=s.region,
                                      strength=s.strength) for s in datasets.default_species()])
    without, fp_b = oc_params([])
    same = with_att == without and fp_a == fp_b
    record(11, "one-class model ignores attacks", same,
           f"fingerprints {fp_a} / {fp_b}")


def test_c12_determinism(default_run, tmp_path):
    out_a = default_run[0]
    out_b = tmp_path / "rerun"
    pipeline.run_pipeline({}, str(out_b))
    diffs = []
    for root, _, files in os.walk(out_a):
        for f in files:
            p = os.path.join(root, f)
            q = os.path.join(out_b, os.path.relpath(p, out_a))
            if open(p, "rb").read() != open(q, "rb").read():
                diffs.append(os.path.relpath(p, out_a))
    record(12, "byte-identical reruns", not diffs,
           "all artifacts identical" if not diffs else f"differ: {diffs[:3]}")
