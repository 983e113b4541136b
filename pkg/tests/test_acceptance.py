"""
End-to-end checks on the synthetic benchmark. Everything that trains a
full-size controller or runs multi-seed searches is marked slow; run with
`pytest -m slow`.
"""

import math
from dataclasses import replace

import numpy as np
import pytest
from scipy.stats import kendalltau

from src.analysis import correlate_all, traverse
from src.archspace import SEQ_LEN, FlopsModel, cell_key, enumerate_cells, tokenize
from src.benchmark import SyntheticBench, SyntheticTable, flops_percentile, synth_eval
from src.controller import ControllerConfig, DNASController, LatentCode
from src.nnkernel import gaussian_kl
from src.sampler import improve_architectures, latent_gradient_step
from src.searchloop import SearchConfig, compare_with_random, run_ablation, run_random_search, run_search
from tests.conftest import synthetic_records

SEEDS = list(range(20))


def test_kl_matches_monte_carlo_on_random_pairs():
    rng = np.random.default_rng(0)
    for _ in range(20):
        mu = rng.choice([-1.0, 1.0]) * rng.uniform(1.0, 2.0)
        logvar = rng.uniform(-1.0, 1.0)
        sigma = math.exp(0.5 * logvar)
        u = rng.standard_normal(1_000_000)
        z = mu + sigma * u
        estimate = float(np.mean(-0.5 * u * u - math.log(sigma) + 0.5 * z * z))
        exact = gaussian_kl(np.array([mu]), np.array([logvar]))
        assert abs(estimate - exact) / exact < 0.01


@pytest.fixture(scope="module")
def bench_and_model():
    return SyntheticBench(seed=7), FlopsModel()


@pytest.fixture(scope="module")
def trained_500(bench_and_model):
    bench, fm = bench_and_model
    records = synthetic_records(700, 42, bench, fm)
    controller = DNASController(ControllerConfig(epochs=150), seed=0)
    controller.train_model(records[:500], seed=0)
    return controller, records[:500], records[500:]


@pytest.mark.slow
def test_predictor_ranks_held_out_cells(trained_500):
    controller, _, held_out = trained_500
    Z = controller.encode_means([r.cell for r in held_out])
    tau, _ = kendalltau(controller.predict_acc(Z), [r.accuracy for r in held_out])
    assert tau > 0.5
    assert controller.evaluate_predictors(held_out)["median_flops_rel_error"] < 0.15


@pytest.mark.slow
def test_ascent_step_raises_predicted_accuracy(trained_500):
    controller, train, _ = trained_500
    codes = controller.encode_means([r.cell for r in train])
    rng = np.random.default_rng(1)
    Z = rng.uniform(codes.min(axis=0), codes.max(axis=0), size=(1000, codes.shape[1]))
    wins = sum(controller.predict_acc(latent_gradient_step(LatentCode.point(z), controller, 1e-3, 0.0))
               >= controller.predict_acc(z) for z in Z)
    assert wins >= 950


@pytest.mark.slow
def test_improvement_yields_novel_cells(trained_500):
    controller, train, _ = trained_500
    known = {cell_key(r.cell) for r in train}
    rng = np.random.default_rng(2)
    hits = 0
    for _ in range(20):
        idx = rng.choice(len(train), size=10, replace=False)
        result = improve_architectures([train[i].cell for i in idx], controller, 1.0, 0.0, steps=10,
                                       known_keys=known, max_steps=50)
        hits += bool(result.cells)
    assert hits >= 18


@pytest.mark.slow
def test_traversals_change_few_tokens(trained_500):
    controller, train, _ = trained_500
    distances = []
    for record in train[:20]:
        for dim in range(controller.config.latent_dim):
            report = traverse(controller, record.cell, dim)
            assert report.edit_distances[report.base_index] == 0
            distances.extend(report.edit_distances)
    assert np.mean(distances) < SEQ_LEN / 4


@pytest.mark.slow
def test_some_dimension_tracks_accuracy(trained_500):
    controller, train, _ = trained_500
    reports = correlate_all(controller, train)
    assert len(reports) == controller.config.latent_dim
    assert max(abs(r.tau) for r in reports) > 0.3


@pytest.mark.slow
def test_reconstruction_on_training_set(bench_and_model):
    bench, fm = bench_and_model
    records = synthetic_records(1000, 5, bench, fm)
    controller = DNASController(ControllerConfig(epochs=400), seed=0)
    controller.train_model(records, seed=0)
    cells = [r.cell for r in records]
    decoded = controller.decode_tokens(controller.encode_means(cells))
    exact = sum(tuple(int(t) for t in row) == tokenize(c) for row, c in zip(decoded, cells))
    assert exact / len(cells) >= 0.99


def _search_cfg(budget, **overrides):
    controller = ControllerConfig(epochs=200, retrain_epochs=20)
    return SearchConfig(m_labeled=50, n_unlabeled=1000, iters=2, p_top=50, query_budget=budget,
                        controller=controller, **overrides)


@pytest.mark.slow
def test_search_beats_random_search(bench_and_model):
    bench, fm = bench_and_model
    table = SyntheticTable(bench, fm, max_nodes=5)
    rows = compare_with_random(_search_cfg(150), table, fm, SEEDS, jobs=-1)
    assert np.mean([r["dnas"] for r in rows]) > np.mean([r["random"] for r in rows])
    assert sum(r["dnas"] > r["random"] for r in rows) > sum(r["dnas"] < r["random"] for r in rows)

    ranked = sorted(synth_eval(bench, c, fm).accuracy for c in enumerate_cells(5))
    ranks = [1.0 - np.searchsorted(ranked, r["dnas"], side="right") / len(ranked) for r in rows]
    assert np.mean(ranks) <= 0.01


@pytest.mark.slow
def test_full_model_leads_ablation(bench_and_model):
    bench, fm = bench_and_model
    table = SyntheticTable(bench, fm, max_nodes=5)
    rows = run_ablation(_search_cfg(200), table, fm, SEEDS, jobs=-1)
    full = rows[-1]
    assert (full["dense"], full["disen"]) == ("Y", "Y")
    assert all(full["top1_mean"] >= r["top1_mean"] for r in rows[:-1])


@pytest.mark.slow
def test_constrained_search_respects_limit(bench_and_model):
    bench, fm = bench_and_model
    limit = flops_percentile(fm, 5, 60)
    cfg = _search_cfg(150, flops_limit=limit, flops_margin=0.05 * limit, eps2=0.1)
    dnas, rand = [], []
    for seed in SEEDS:
        run_cfg = replace(cfg, seed=seed)
        state = run_search(run_cfg, SyntheticTable(bench, fm, max_nodes=5), fm)
        assert state.best is not None and state.best.flops <= limit
        dnas.append(state.best.accuracy)
        baseline = run_random_search(run_cfg, SyntheticTable(bench, fm, max_nodes=5))
        rand.append(baseline.best.accuracy)
    assert np.mean(dnas) > np.mean(rand)
