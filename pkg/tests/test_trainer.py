from fractions import Fraction

import numpy as np
import pytest

from deep_oversampling import numerics as nx
from deep_oversampling.data_io import Dataset
from deep_oversampling.dualhead_net import (DataError, NetworkConfig, init_params,
                                            predict_proba)
from deep_oversampling.evaluation import in_class_variance
from deep_oversampling.overloading import compute_embeddings
from deep_oversampling.trainer import (TrainPlan, class_plan, dos_round, stl_epoch,
                                       suggest_params, train_dos, train_stl)


def toy(seed, counts, centers=((0.0, 0.0), (2.5, 0.0), (1.25, 2.0))):
    """2-D Gaussian classes with unit spread, as (1, 1, 2) inputs."""
    rng = np.random.default_rng(seed)
    xs = [np.asarray(c) + rng.standard_normal((n, 2)) for c, n in zip(centers, counts)]
    y = np.repeat(np.arange(len(counts)), counts)
    minority = tuple(c for c, n in enumerate(counts) if n < max(counts))
    return Dataset(np.concatenate(xs).reshape(-1, 1, 1, 2).astype(np.float32), y,
                   len(counts), minority_classes=minority)


def toy_config(n_classes=3, **kw):
    base = dict(input_shape=(1, 1, 2), conv_filters=[], fc_widths=[16, 8],
                n_classes=n_classes, learning_rate=0.05, batch_size=30, alpha=0.1)
    base.update(kw)
    return NetworkConfig(**base)


def per_sample_losses(config, params, ds):
    p = predict_proba(config, params, ds.x)
    return -np.log(np.maximum(p[np.arange(len(ds)), ds.y], 1e-12))


class TestTrainStl:
    def test_zero_epochs(self):
        ds = toy(0, [20, 20])
        config = toy_config(2)
        p = train_stl(config, ds, 0, seed=3)
        for a, b in zip(p.arrays(), init_params(config, 3).arrays()):
            assert np.array_equal(a, b)

    def test_separable(self):
        ds = toy(1, [100, 100], centers=((-3.0, 0.0), (3.0, 0.0)))
        config = toy_config(2, fc_widths=[4], batch_size=20)
        p = train_stl(config, ds, 50, seed=0)
        assert np.mean(predict_proba(config, p, ds.x).argmax(axis=1) == ds.y) >= 0.95

    def test_determinism(self):
        ds = toy(2, [40, 40, 10])
        config = toy_config()
        a = train_stl(config, ds, 3, seed=5)
        b = train_stl(config, ds, 3, seed=5)
        assert all(x.tobytes() == y.tobytes() for x, y in zip(a.arrays(), b.arrays()))

    def test_empty(self):
        with pytest.raises(DataError):
            train_stl(toy_config(), Dataset(np.zeros((0, 1, 1, 2)), [], 3), 1, seed=0)

    def test_progress_records(self):
        seen = []
        train_stl(toy_config(), toy(3, [10, 10, 10]), 2, seed=0, progress=seen.append)
        assert [r["epoch"] for r in seen] == [0, 1]
        assert all(r["kind"] == "stl_epoch" and r["seconds"] >= 0 for r in seen)


class TestPlan:
    @pytest.mark.parametrize("kw", [dict(rounds=0), dict(k_mnr=1, k_mjr=2), dict(k_mnr=-1),
                                    dict(r_per_class={0: 0}), dict(epochs_per_round=0)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            TrainPlan(**kw).validate()

    def test_class_plan_defaults(self):
        ds = toy(4, [100, 100, 10])
        k, r = class_plan(ds, TrainPlan(k_mnr=5))
        assert k == {0: 0, 1: 0, 2: 5}
        assert r == {0: 1, 1: 1, 2: 20}

    def test_class_plan_clamps(self):
        ds = toy(5, [50, 50, 3])
        k, _ = class_plan(ds, TrainPlan(k_mnr=8))
        assert k[2] == 2


class TestSuggestParams:
    def test_tenth(self):
        s = suggest_params(np.array([100, 1000]), [0])
        assert s.R == Fraction(1, 10)
        assert s.r_range == (10, 50) and s.k_mjr == 0 and s.k_mnr == 5

    def test_balanced(self):
        s = suggest_params(np.array([50, 50]), [1], k_mnr=7)
        assert s.R == 1 and s.r_range == (1, 7) and s.r_default == 1

    def test_counting(self):
        counts = np.array([300] * 4 + [6000] * 6)
        assert suggest_params(counts, [0, 1, 2, 3]).R == Fraction(1, 30)

    def test_empty_group(self):
        with pytest.raises(DataError):
            suggest_params(np.array([10, 10]), [0, 1])


class TestTrainDos:
    def test_degenerate_reduction(self):
        ds = toy(6, [60, 60, 12])
        config = toy_config(alpha=0.0)
        params = train_stl(config, ds, 1, seed=2)
        plan = TrainPlan(k_mnr=0, r_per_class={0: 1, 1: 1, 2: 1}, seed=2)
        k, r = class_plan(ds, plan)
        dos, rec = dos_round(config, params, ds, plan, 1, k, r)
        assert rec.instances == len(ds)
        order = nx.make_rng(2, "mtl-shuffle", 1, 0).permutation(len(ds))
        stl, _ = stl_epoch(config, params, ds, order, update_embedding=False)
        diff = per_sample_losses(config, dos, ds) - per_sample_losses(config, stl, ds)
        assert np.max(np.abs(diff)) < 1e-6
        for a, b in zip(dos.embedding, params.embedding):
            assert np.array_equal(a, b)

    def test_budget_accounting(self):
        ds = toy(7, [30, 30, 6])
        seen = []
        train_dos(toy_config(), ds, TrainPlan(k_mnr=3, rounds=2, seed=0), progress=seen.append)
        rounds = [s for s in seen if s["kind"] == "dos_round"]
        assert [s["instances"] for s in rounds] == [30 + 30 + 6 * 10] * 2  # R = 6/60 -> r = 10
        assert all(s["k"]["2"] <= 5 for s in rounds)

    def test_determinism(self):
        ds = toy(8, [40, 40, 8])
        plan = TrainPlan(k_mnr=3, rounds=2, seed=4)
        a = train_dos(toy_config(), ds, plan)
        b = train_dos(toy_config(), ds, plan)
        assert all(x.tobytes() == y.tobytes() for x, y in zip(a.arrays(), b.arrays()))

    def test_minority_recall_with_equal_steps(self):
        wins = 0
        for seed in range(5):
            train, test = toy(seed, [300, 300, 30]), toy(100 + seed, [300, 300, 300])
            config = toy_config()
            plan = TrainPlan(k_mnr=5, rounds=3, stl_epochs=1, seed=seed)
            _, r = class_plan(train, plan)
            per_epoch = -(-len(train) // config.batch_size)
            z_size = sum(r[c] * n for c, n in enumerate(train.class_counts()))
            dos_steps = per_epoch + plan.rounds * -(-z_size // config.batch_size)
            # the baseline gets at least as many gradient steps
            stl_epochs = -(-dos_steps // per_epoch)
            dos = train_dos(config, train, plan)
            stl = train_stl(config, train, stl_epochs, seed)

            def minority_recall(p):
                pred = predict_proba(config, p, test.x).argmax(axis=1)
                return np.mean(pred[test.y == 2] == 2)
            wins += minority_recall(dos) >= minority_recall(stl)
        assert wins >= 4

    def test_variance_trend(self):
        ds = toy(9, [300, 300, 30])
        config = toy_config()
        seen = []
        params = train_dos(config, ds, TrainPlan(k_mnr=5, rounds=4, seed=1),
                           progress=seen.append)
        v = [s["mean_variance"] for s in seen if s["kind"] == "dos_round"]
        v.append(np.mean(list(in_class_variance(compute_embeddings(config, params, ds)).values())))
        assert sum(b <= a for a, b in zip(v, v[1:])) > (len(v) - 1) / 2

    def test_alpha_override(self):
        ds = toy(10, [20, 20, 5])
        base = train_dos(toy_config(alpha=0.5), ds, TrainPlan(k_mnr=2, rounds=1, seed=0))
        over = train_dos(toy_config(alpha=0.0), ds, TrainPlan(k_mnr=2, rounds=1, seed=0,
                                                                alpha=0.5))
        assert all(x.tobytes() == y.tobytes() for x, y in zip(base.arrays(), over.arrays()))
