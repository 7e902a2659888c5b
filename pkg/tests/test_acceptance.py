"""Acceptance criteria, one test per criterion.

Each test records a ``PASS``/``FAIL criterion N: ...`` line that the terminal
summary prints after the run. Tolerances and run settings are pinned below.
"""

import time

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from layerpar import ParallelConfig, ParallelTrainer, SerialTrainer, SgdConfig
from layerpar.data import batches, gen_dataset
from layerpar.gradcheck import run_suite
from layerpar.harness import TIMING_FIELDS, RunConfig, compare_runs, read_metrics, run_experiment
from layerpar.parallel import AUGMENTED_LAGRANGIAN, PENALTY, AuxState, stationary_violation, update_lambda
from layerpar.tensor import SeededRng, rel_error

from conftest import make_model

GRAD_TOL = 1e-6
GRAD_BUDGET_S = 60.0
EQUIV_TOL = 1e-10
EQUIV_MIN_STEPS = 50
CLOSED_FORM_TOL = 1e-10
SEEDS = (0, 1, 2, 3, 4)
ACC_GAP_POINTS = 2.0
SPEEDUP_BAND = 0.25
VIOLATION_RATIO = 10.0
ACC_DROP_POINTS = 10.0

REPORT: list[str] = []

DESK = dict(dataset="spirals", n_samples=600, n_classes=3, noise=0.05, data_seed=1, blocks=6, width=16, hidden=32,
            residual_scale=0.5, batch_size=32, plot_fields=())
# persistent-lambda runs at large beta: trunk step small enough for the sum-form penalty stiffness
STIFF = dict(DESK, lr=1e-7, lr_schedule="constant", momentum=0.0, epochs=10, noise_sigma=0.0,
             lambda_contraction=0.2, K=3, workers=1)
SERIAL = dict(DESK, mode="serial", epochs=40)
TUNED = dict(DESK, mode="parallel_penalty_auxnet", K=3, epochs=40, beta=0.003, beta_gamma=3.0, beta_every=10,
             lambda_contraction=0.5, aux_hidden=16)
TOO_SMALL = dict(TUNED, beta=3e-6, lambda_contraction=None, lambda_lr=83.0)


def report(n, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    REPORT.append(line)
    print(line)
    return ok


def run(tmp_path, name, **kw):
    return run_experiment(RunConfig(output_dir=str(tmp_path / name), **kw))


def seed_mean(tmp_path, tag, settings, key):
    return float(np.mean([run(tmp_path, f"{tag}_{s}", seed=s, **settings)[key] for s in SEEDS]))


def test_criterion_1_gradient_oracle():
    t0 = time.perf_counter()
    results = run_suite(seed=0)
    elapsed = time.perf_counter() - t0
    worst = max(r.rel_err for r in results)
    ok = all(r.rel_err <= GRAD_TOL for r in results) and elapsed < GRAD_BUDGET_S
    assert report(1, ok, f"{len(results)} checks, worst rel err {worst:.2e} (tol {GRAD_TOL:g}), {elapsed:.1f}s")


def test_criterion_2_single_stage_equals_serial():
    ds = gen_dataset("spirals", 240, 3, 0.05, seed=1)
    sgd = SgdConfig(eta0=0.05, batch_size=16, momentum=0.9, schedule="constant")
    m_ser, m_par = make_model(seed=3, L=6), make_model(seed=3, L=6)
    ser = SerialTrainer(m_ser, sgd, seed=0)
    worst, steps = 0.0, 0
    with ParallelTrainer(m_par, ParallelConfig(K=1, noise_sigma=0.0), sgd, seed=0, n_train=len(ds)) as par:
        for epoch in range(4):
            for b in batches(ds, sgd.batch_size, epoch_seed=epoch):
                ser.train_step(b.features, b.labels, eta=0.05)
                par.step(b.features, b.labels, keys=list(b.keys), eta=0.05)
                steps += 1
                worst = max(worst, max(rel_error(a, c) for a, c in zip(m_ser.arrays(), m_par.arrays())))
    ok = steps >= EQUIV_MIN_STEPS and worst <= EQUIV_TOL
    assert report(2, ok, f"{steps} steps, worst parameter rel diff {worst:.2e} (tol {EQUIV_TOL:g})")


def test_criterion_3_stationarity_closed_forms():
    worst = 0.0
    for trial in range(20):
        rng = SeededRng(100 + trial)
        shape = (1 + trial % 4, 2 + trial % 5)
        beta = float(np.exp(rng.child(0).normal(()) * 2))
        x, p = rng.child(1).normal(shape), rng.child(2).normal(shape)
        for mode in (PENALTY, AUGMENTED_LAGRANGIAN):
            kappa = rng.child(3).normal(shape) if mode == AUGMENTED_LAGRANGIAN else np.zeros(shape)
            # stationarity of beta psi(lam, x) + <p, lam> - <kappa, lam> as a linear system in lam
            n = x.size
            lam = np.linalg.solve(2 * beta * np.eye(n), (2 * beta * x - p + kappa).reshape(n)).reshape(shape)
            closed = stationary_violation(p, beta, kappa if mode == AUGMENTED_LAGRANGIAN else None)
            worst = max(worst, float(np.max(np.abs((lam - x) - closed))))
            # the implemented lambda update leaves the exact solution fixed
            aux = AuxState([np.zeros(shape), lam], [np.zeros(shape), kappa], beta, mode=mode)
            worst = max(worst, float(np.max(np.abs(update_lambda(1, aux, p, x, 0.1 / beta) - lam))))
    assert report(3, worst <= CLOSED_FORM_TOL, f"40 random instances, worst abs error {worst:.2e}")


@pytest.fixture(scope="module")
def stiff_violations(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("stiff")
    return {
        "penalty_1e2": seed_mean(tmp, "p2", dict(STIFF, mode="parallel_penalty", beta=1e2), "final_violation_mean"),
        "penalty_1e4": seed_mean(tmp, "p4", dict(STIFF, mode="parallel_penalty", beta=1e4), "final_violation_mean"),
        "al_1e2": seed_mean(tmp, "a2", dict(STIFF, mode="parallel_al", beta=1e2, kappa_lr=2e4),
                            "final_violation_mean"),
    }


def test_criterion_4_beta_monotonicity(stiff_violations):
    v2, v4 = stiff_violations["penalty_1e2"], stiff_violations["penalty_1e4"]
    assert report(4, v4 < v2, f"mean terminal violation beta=1e4 {v4:.4g} < beta=1e2 {v2:.4g}")


def test_criterion_5_al_not_worse_than_penalty(stiff_violations):
    al, pen = stiff_violations["al_1e2"], stiff_violations["penalty_1e2"]
    assert report(5, al <= pen, f"beta=1e2 mean terminal violation AL {al:.4g} <= penalty {pen:.4g}")


@pytest.fixture(scope="module")
def desk_runs(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("desk")
    for s in SEEDS:
        run(tmp, f"serial_{s}", seed=s, **SERIAL)
        run(tmp, f"tuned_{s}", seed=s, **TUNED)
    return tmp


def test_criterion_6_accuracy_gap(desk_runs):
    gaps = []
    for s in SEEDS:
        rep = compare_runs([desk_runs / f"serial_{s}", desk_runs / f"tuned_{s}"])
        gaps.append(-rep[1]["delta_accuracy"])
    acc = [read_metrics(desk_runs / f"tuned_{s}" / "metrics.csv")[1][-1]["test_accuracy"] for s in SEEDS]
    gap = 100 * float(np.mean(gaps))
    ok = gap <= ACC_GAP_POINTS
    assert report(6, ok, f"K=3 penalty+AuxNet {100 * np.mean(acc):.2f}%, gap to serial {gap:.2f} points "
                         f"(limit {ACC_GAP_POINTS})")


def test_criterion_7_speedup_model(tmp_path):
    wide = dict(n_samples=400, data_seed=1, blocks=6, width=256, hidden=512, residual_scale=0.5, batch_size=50,
                epochs=3, lr=1e-4, lr_schedule="constant", plot_fields=())
    lines, ok = [], True
    with threadpool_limits(limits=1):
        run(tmp_path, "serial", mode="serial", **wide)
        for K in (2, 3):
            sp = run(tmp_path, f"k{K}", mode="parallel_penalty", K=K, beta=0.01, lambda_contraction=0.2,
                     noise_sigma=0.0, serial_reference=str(tmp_path / "serial"), **wide)["speedup"]
            within = abs(sp["measured"] - sp["predicted"]) <= SPEEDUP_BAND * sp["predicted"]
            below = sp["measured"] < sp["upper_bound"]
            ok = ok and within and below
            lines.append(f"K={K} measured {sp['measured']:.3f} predicted {sp['predicted']:.3f} "
                         f"bound {sp['upper_bound']:.3f}")
    assert report(7, ok, "; ".join(lines) + f" (band {SPEEDUP_BAND:.0%})")


def test_criterion_8_memory_contract(tmp_path):
    small = dict(data_seed=1, blocks=6, width=16, hidden=32, batch_size=32, K=3, plot_fields=(), lr=0.01,
                 augment="gaussian_jitter", augment_sigma=0.05)
    aux_bytes = {}
    for n in (200, 400):
        run(tmp_path, f"aux{n}", mode="parallel_penalty_auxnet", n_samples=n, epochs=4, beta=0.003,
            lambda_contraction=0.5, augment_ratio=None, **small)
        aux_bytes[n] = [r["aux_bytes"] for r in read_metrics(tmp_path / f"aux{n}" / "metrics.csv")[1]]
    flat = len({b for v in aux_bytes.values() for b in v}) == 1
    persistent, expected = [], []
    for n, r in ((200, 1), (200, 2), (400, 2)):
        run(tmp_path, f"lam{n}_{r}", mode="parallel_penalty", n_samples=n, epochs=r + 1, beta=0.01,
            lambda_contraction=0.2, augment_ratio=r, **small)
        persistent.append(read_metrics(tmp_path / f"lam{n}_{r}" / "metrics.csv")[1][-1]["aux_bytes"])
        expected.append(int(0.8 * n) * (1 + r) * 2 * 16 * 8)
    linear = persistent == expected
    ok = flat and linear
    assert report(8, ok, f"AuxNet bytes {aux_bytes[200][0]:.0f} in every epoch at N=200,400; persistent bytes "
                         f"{[int(b) for b in persistent]} vs N(1+r)(K-1)d*8 = {expected}")


def test_criterion_9_threading_determinism(tmp_path):
    same = []
    base = dict(DESK, epochs=3, K=3, beta=0.003, lambda_contraction=0.5)
    for mode in ("parallel_penalty", "parallel_al", "parallel_penalty_auxnet", "parallel_penalty_reauxnet"):
        outs = []
        for workers in (1, 3):
            run(tmp_path, f"{mode}_{workers}", mode=mode, workers=workers, **base)
            header, rows = read_metrics(tmp_path / f"{mode}_{workers}" / "metrics.csv")
            outs.append([[repr(r[h]) for h in header if h not in TIMING_FIELDS] for r in rows])
        same.append(outs[0] == outs[1])
    assert report(9, all(same), f"workers=1 vs workers=3 identical for {sum(same)}/{len(same)} modes")


def test_criterion_10_small_beta_failure(tmp_path, desk_runs):
    tuned_v, tuned_a, small_v, small_a = [], [], [], []
    for s in SEEDS:
        t = read_metrics(desk_runs / f"tuned_{s}" / "metrics.csv")[1][-1]
        tuned_v.append(t["violation_mean"])
        tuned_a.append(t["test_accuracy"])
        f = run(tmp_path, f"small_{s}", seed=s, **TOO_SMALL)["final"]
        small_v.append(f["violation_mean"])
        small_a.append(f["test_accuracy"])
    ratio = np.mean(small_v) / np.mean(tuned_v)
    drop = 100 * (np.mean(tuned_a) - np.mean(small_a))
    ok = ratio >= VIOLATION_RATIO and drop >= ACC_DROP_POINTS
    assert report(10, ok, f"violation ratio {ratio:.1f}x (need {VIOLATION_RATIO:g}x), accuracy drop {drop:.1f} "
                          f"points (need {ACC_DROP_POINTS:g})")
