"""Acceptance gate. Each test records one PASS/FAIL line, printed in the
``acceptance`` section of the terminal summary.

The desk-scale run (criteria 5-8) takes several minutes on one core.
"""
import itertools
import time

import numpy as np
import pytest

import desk
from deep_oversampling import numerics as nx
from deep_oversampling.data_io import Dataset
from deep_oversampling.dualhead_net import (MTLBatch, NetworkConfig, backprop_mtl, backprop_stl,
                                            embed, predict_proba, save_checkpoint)
from deep_oversampling.evaluation import auprc, class_metrics, confusion_matrix, knn_posteriors
from deep_oversampling.microcluster_loss import (loss_f, loss_f_grad, rho_weighted,
                                                 weighted_loss_f_grad)
from deep_oversampling.overloading import (build_store, distance_matrix, pairwise_sq_distances,
                                           select_neighbors)
from deep_oversampling.trainer import TrainPlan, class_plan, dos_round, stl_epoch, train_stl
from gradcheck import (activation_pattern, check_gradients, mtl_loss_fn, random_neighbors,
                       random_problem, stl_loss_fn)
from test_evaluation import enumerate_auprc, naive_knn
from test_overloading import naive_distances

SEEDS = range(5)


def verdict(record, number, name, ok, detail):
    line = f"criterion {number} {'PASS' if ok else 'FAIL'} {name}: {detail}"
    record("acceptance", line)
    print(line)
    assert ok, line


@pytest.fixture(scope="module")
def desk_runs():
    return [desk.run(seed) for seed in SEEDS]


class TestAlgebra:
    def test_1_gradient_correctness(self, record_property):
        start = time.perf_counter()
        worst, checked, nets = 0.0, 0, 0
        for seed in range(20):
            rng, cfg, p, xs, ys = random_problem(1000 + seed, batch=2)
            _, g = backprop_stl(cfg, p, xs, ys)
            w, c, _ = check_gradients(stl_loss_fn(cfg, p, xs, ys), p, g,
                                      lambda: activation_pattern(cfg, p, xs))
            nbs, ws = random_neighbors(rng, cfg, p, xs)
            rhos = [rho_weighted(f, nb, wt)
                    for f, nb, wt in zip(embed(cfg, p, xs), nbs, ws)]
            _, _, gm = backprop_mtl(cfg, p, MTLBatch(xs, ys, nbs, ws))
            wm, cm, _ = check_gradients(mtl_loss_fn(cfg, p, xs, ys, nbs, ws, rhos), p, gm,
                                        lambda: activation_pattern(cfg, p, xs))
            worst, checked, nets = max(worst, w, wm), checked + c + cm, nets + 1
        seconds = time.perf_counter() - start
        verdict(record_property, 1, "gradient correctness",
                worst < 1e-5 and seconds < 60 and checked > 0,
                f"{nets} nets, {checked} coordinates, worst rel. err {worst:.2e}, "
                f"{seconds:.1f}s")

    def test_2_minimizer_identities(self, record_property):
        rng = np.random.default_rng(2)
        worst_mean, worst_weighted = 0.0, 0.0
        for _ in range(100):
            n, d = int(rng.integers(1, 9)), int(rng.integers(1, 12))
            v = rng.standard_normal((n, d)) * rng.uniform(0.1, 10)
            w = nx.sample_simplex(n, rng)
            worst_mean = max(worst_mean, np.linalg.norm(loss_f_grad(v.mean(axis=0), v)))
            worst_weighted = max(worst_weighted,
                                 np.linalg.norm(weighted_loss_f_grad(w @ v, v, w)))
        verdict(record_property, 2, "loss-minimizer identities",
                worst_mean < 1e-9 and worst_weighted < 1e-9,
                f"100 sets, max grad norm {worst_mean:.1e} at mean, "
                f"{worst_weighted:.1e} at weighted mean")

    def test_3_oracle_equivalence(self, record_property):
        rng = np.random.default_rng(3)
        counts = dict(neighbors=0, distances=0, metrics=0, auprc=0, knn=0)
        for _ in range(100):
            # coarse values force distance ties
            n, d = int(rng.integers(2, 10)), int(rng.integers(1, 4))
            v = np.round(rng.standard_normal((n, d)), 1)
            ref = naive_distances(v)
            assert np.max(np.abs(pairwise_sq_distances(v) - ref)) < 1e-9
            counts["distances"] += 1

            store = build_store(v, [0] * n)
            dist = distance_matrix(store, 0)
            s, k = int(rng.integers(n)), int(rng.integers(0, n))
            inst = select_neighbors(store, dist, s, k)
            others = sorted((i for i in range(n) if i != s), key=lambda i: (ref[s, i], i))
            assert inst.neighbor_indices.tolist() == [s] + others[:k]
            if k:
                best = min(loss_f(v[s], v[list(c)])
                           for c in itertools.combinations(others, k))
                assert abs(loss_f(v[s], inst.neighbors[1:]) - best) < 1e-9
            counts["neighbors"] += 1

            n_cls = int(rng.integers(2, 5))
            pred, true = rng.integers(0, n_cls, 30), rng.integers(0, n_cls, 30)
            cm = confusion_matrix(pred, true, n_cls)
            p, r, f = class_metrics(cm)
            for c in range(n_cls):
                tp = sum(1 for a, b in zip(pred, true) if a == c and b == c)
                n_pred, n_true = sum(1 for a in pred if a == c), sum(1 for b in true if b == c)
                pc = tp / n_pred if n_pred else 0.0
                rc = tp / n_true if n_true else 0.0
                fc = 2 * pc * rc / (pc + rc) if pc + rc else 0.0
                assert abs(p[c] - pc) < 1e-9 and abs(r[c] - rc) < 1e-9
                assert abs(f[c] - fc) < 1e-9
            counts["metrics"] += 1

            scores = np.round(rng.random(25), 1)
            truths = rng.integers(0, 2, 25)
            truths[int(rng.integers(25))] = 1
            assert abs(auprc(scores, truths)
                       - enumerate_auprc(scores.tolist(), truths.tolist())) < 1e-9
            counts["auprc"] += 1

            train = np.round(rng.standard_normal((40, 2)), 1)
            labels = rng.integers(0, n_cls, 40)
            query = np.round(rng.standard_normal(2), 1)
            k_nn = int(rng.integers(1, 8))
            post = knn_posteriors(train, labels, query[None], k_nn, n_classes=n_cls)[0]
            assert np.max(np.abs(post - naive_knn(train, labels, query, k_nn, n_cls)[1])) < 1e-9
            counts["knn"] += 1
        verdict(record_property, 3, "oracle equivalence", min(counts.values()) >= 100,
                ", ".join(f"{k} {v}" for k, v in counts.items()))

    def test_4_degenerate_reduction(self, record_property):
        worst = 0.0
        for seed in range(3):
            rng = np.random.default_rng(seed)
            y = np.repeat([0, 1, 2], [40, 40, 8])
            ds = Dataset((rng.standard_normal((len(y), 1, 6, 6)) + y[:, None, None, None])
                         .astype(np.float32), y, 3, minority_classes=(2,))
            cfg = NetworkConfig(input_shape=(1, 6, 6), conv_filters=[(3, 3)], fc_widths=[12, 6],
                                n_classes=3, learning_rate=0.1, batch_size=10, alpha=0.0)
            params = train_stl(cfg, ds, 1, seed)
            plan = TrainPlan(k_mnr=0, r_per_class={0: 1, 1: 1, 2: 1}, seed=seed)
            k, r = class_plan(ds, plan)
            dos, _ = dos_round(cfg, params, ds, plan, 1, k, r)
            order = nx.make_rng(seed, "mtl-shuffle", 1, 0).permutation(len(ds))
            stl, _ = stl_epoch(cfg, params, ds, order, update_embedding=False)
            worst = max(worst, float(np.max(np.abs(_losses(cfg, dos, ds) - _losses(cfg, stl, ds)))))
        verdict(record_property, 4, "degenerate reduction", worst < 1e-6,
                f"max per-sample loss difference {worst:.1e}")


class TestDeskScale:
    def test_5_imbalance_benefit(self, desk_runs, record_property):
        gaps = [desk.minority_f1(r.dos_report) - desk.minority_f1(r.stl_report) for r in desk_runs]
        wins = sum(g >= 0.02 for g in gaps)
        verdict(record_property, 5, "imbalance benefit", wins >= 4,
                f"DOS minority F1 ahead by >= 0.02 in {wins}/5 seeds, gaps "
                + " ".join(f"{g:+.3f}" for g in gaps))

    def test_6_variance_trend(self, desk_runs, record_property):
        trends = [desk.round_variances(r) for r in desk_runs]
        down = sum(v[-1] < v[0] for v in trends)
        verdict(record_property, 6, "in-class variance trend", down >= 4,
                f"round 1 -> {desk.ROUNDS} decreases in {down}/5 seeds, "
                + " ".join(f"{v[0]:.1f}->{v[-1]:.1f}" for v in trends))

    def test_7_runtime_overhead(self, desk_runs, record_property):
        stl = np.mean([e["seconds"] for r in desk_runs for e in r.stl_epochs])
        dos = np.mean([e["seconds"] for r in desk_runs for e in r.dos_rounds
                       if e["kind"] == "dos_round"])
        verdict(record_property, 7, "run-time overhead", dos / stl <= 2.0,
                f"DOS round {dos:.2f}s / STL epoch {stl:.2f}s = {dos / stl:.2f}")

    def test_8_determinism(self, desk_runs, tmp_path, record_property):
        first = desk_runs[0]
        again = desk.run(first.seed)
        same = True
        for name in ("stl", "dos"):
            for tag, run in (("a", first), ("b", again)):
                save_checkpoint(tmp_path / f"{name}-{tag}.dosm", desk.CONFIG,
                                getattr(run, f"{name}_params"))
            same &= ((tmp_path / f"{name}-a.dosm").read_bytes()
                     == (tmp_path / f"{name}-b.dosm").read_bytes())
            same &= (getattr(first, f"{name}_report").to_csv()
                     == getattr(again, f"{name}_report").to_csv())
        verdict(record_property, 8, "determinism", same,
                f"seed {first.seed} rerun: checkpoints and metric CSVs "
                + ("bit-identical" if same else "differ"))


def _losses(cfg, params, ds):
    p = predict_proba(cfg, params, ds.x)
    return -np.log(np.maximum(p[np.arange(len(ds)), ds.y], 1e-12))
