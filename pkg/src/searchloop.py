"""
Semi-supervised search loop: random labeled pool, controller training,
dense sampling with pseudo-labels, latent-gradient improvement and final
selection under the FLOPS constraint.
"""

import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from joblib import Parallel, delayed

from src.archspace import cell_key, detokenize, estimate_flops
from src.benchmark import BenchTable, SyntheticTable
from src.controller import ControllerConfig, DNASController
from src.data_processing import PseudoRecord, merge_datasets
from src.errors import ConfigError, NotInBenchError, UnrepairableError
from src.sampler import Branch, SamplerPolicy, compute_regions, improve_architectures, sample_many
from utils.data_utils import derive_seed

logger = logging.getLogger(__name__)


@dataclass
class SearchConfig:
    m_labeled: int = 100
    n_unlabeled: int = 10000
    iters: int = 2
    p_top: int = 100
    query_budget: int = 300
    flops_limit: float = math.inf
    flops_margin: float = None
    sigma: float = 0.05
    topk: int = 3
    eps1: float = 0.05
    eps2: float = 0.0
    edge_band: float = None
    eta1: float = 1.0
    eta2: float = 0.3
    improve_steps: int = 10
    improve_max_steps: int = 50
    dense_sampling: bool = True
    disentangle: bool = True
    # training steps per architecture; a no-op under tabular oracles
    train_steps_per_arch: int = 0
    seed: int = 0
    controller: ControllerConfig = field(default_factory=ControllerConfig)

    def __post_init__(self):
        if isinstance(self.controller, dict):
            self.controller = ControllerConfig(**self.controller)
        if self.flops_margin is None:
            self.flops_margin = 0.05 * self.flops_limit if math.isfinite(self.flops_limit) else 0.0

    def validate(self):
        for flag, value in (("--m-labeled", self.m_labeled), ("--n-unlabeled", self.n_unlabeled),
                            ("--p-top", self.p_top), ("--budget", self.query_budget), ("--topk", self.topk)):
            if value <= 0:
                raise ConfigError(flag, f"must be positive, got {value}")
        if self.iters < 0:
            raise ConfigError("--iters", "must be non-negative")
        if self.query_budget < self.m_labeled:
            raise ConfigError("--budget", f"budget {self.query_budget} is smaller than --m-labeled {self.m_labeled}")
        if self.topk > self.m_labeled:
            raise ConfigError("--topk", "top-k cannot exceed the labeled pool")
        if self.sigma <= 0:
            raise ConfigError("--sigma", "must be positive")
        if self.flops_limit <= 0:
            raise ConfigError("--flops-limit", "must be positive")
        if self.flops_margin < 0:
            raise ConfigError("--flops-margin", "must be >= 0")
        if self.eta1 < 0 or self.eta2 < 0:
            raise ConfigError("--eta1/--eta2", "step sizes must be >= 0")
        self.policy().validate()
        self.effective_controller().validate()
        return self

    def policy(self):
        if not self.dense_sampling:
            return SamplerPolicy(eps1=0.0, eps2=0.0, flops_limit=self.flops_limit, edge_band=self.edge_band)
        return SamplerPolicy(eps1=self.eps1, eps2=self.eps2, flops_limit=self.flops_limit, edge_band=self.edge_band)

    def effective_controller(self):
        """Controller config with beta forced to 0 when disentangling is switched off."""
        return self.controller if self.disentangle else replace(self.controller, beta=0.0)

    def to_dict(self):
        out = asdict(self)
        for key in ("flops_limit", "flops_margin"):
            if out[key] is not None and not math.isfinite(out[key]):
                out[key] = "inf"
        return out


@dataclass
class IterationStats:
    iteration: int
    queries_used: int
    best_oracle_acc: float
    mean_pseudo_acc: float
    pseudo_size: int
    improved: int
    refilled: int
    unrepairable: int
    not_in_bench: int
    losses: dict
    region_volumes: list
    branch_counts: dict


@dataclass
class SearchState:
    labeled: list = field(default_factory=list)
    pseudo: list = field(default_factory=list)
    best: object = None
    query_count: int = 0
    budget_exhausted: bool = False
    not_in_bench: int = 0
    history: list = field(default_factory=list)
    controller: object = None

    @property
    def merged(self):
        return merge_datasets(self.labeled, self.pseudo)

    def feasible(self, flops_limit):
        return [r for r in self.labeled if r.flops <= flops_limit]

    def top_records(self, n, flops_limit=math.inf):
        ranked = sorted(self.feasible(flops_limit), key=lambda r: (-r.accuracy, cell_key(r.cell)))
        return ranked[:n]


def pseudo_label(cells, controller):
    """Predicted (accuracy, FLOPS) for each cell; the oracle is never consulted."""
    if not cells:
        return []
    Z = controller.encode_means(list(cells))
    acc = controller.predict_acc(Z)
    flops = controller.predict_flops(Z)
    return [PseudoRecord(cell=c, accuracy=float(a), flops=float(f)) for c, a, f in zip(cells, acc, flops)]


def select_top_p(candidates, P, flops_limit, margin):
    """
    Highest predicted accuracy first among candidates whose predicted FLOPS
    is within flops_limit + margin; a violating candidate is passed over in
    favour of the next one.
    """
    bound = flops_limit + margin
    ok = [c for c in candidates if c.flops <= bound]
    ok.sort(key=lambda c: (-c.accuracy, cell_key(c.cell)))
    return ok[:P]


class _Oracle:
    """Budget-aware wrapper around a BenchTable that feeds D'."""

    def __init__(self, bench, budget, state):
        self.bench = bench
        self.budget = budget
        self.state = state
        self.start = bench.query_count

    @property
    def used(self):
        return self.bench.query_count - self.start

    def evaluate(self, cells, limit=None):
        """Query the novel cells in order; stops at the budget or after `limit` new queries."""
        known = {cell_key(r.cell) for r in self.state.labeled}
        start = self.used
        for cell in cells:
            key = cell_key(cell)
            if key in known:
                continue
            if self.used >= self.budget:
                self.state.budget_exhausted = True
                break
            if limit is not None and self.used - start >= limit:
                break
            try:
                record = self.bench.query(cell)
            except NotInBenchError:
                self.state.not_in_bench += 1
                continue
            known.add(key)
            self.state.labeled.append(record)
        self.state.query_count = self.used
        return self.used - start


def _best_feasible(state, flops_limit):
    top = state.top_records(1, flops_limit)
    return top[0] if top else None


def initial_pool(bench, n, seed):
    rng = np.random.default_rng(seed)
    cells, seen = [], set()
    # distinct cells; bounded so tiny spaces cannot loop forever
    for _ in range(50):
        for cell in bench.sample_cells(n - len(cells), rng):
            key = cell_key(cell)
            if key not in seen:
                seen.add(key)
                cells.append(cell)
        if len(cells) >= n:
            break
    return cells


def _decode_samples(controller, codes, known, max_nodes=None):
    Z = np.stack([code.sample for code in codes])
    cells, unrepairable = [], 0
    seen = set(known)
    for tokens in controller.decode_tokens(Z):
        try:
            cell = detokenize(tokens, max_nodes=max_nodes)
        except UnrepairableError:
            unrepairable += 1
            continue
        key = cell_key(cell)
        if key not in seen:
            seen.add(key)
            cells.append(cell)
    return cells, unrepairable


def run_search(cfg, bench, flops_model):
    """Run the full search; deterministic for a fixed cfg.seed and bench."""
    cfg.validate()
    state = SearchState()
    oracle = _Oracle(bench, cfg.query_budget, state)
    ccfg = cfg.effective_controller()

    oracle.evaluate(initial_pool(bench, cfg.m_labeled, derive_seed(cfg.seed, "initial")))
    state.best = _best_feasible(state, cfg.flops_limit)
    logger.info("initial pool: %d evaluated, best %.4f", len(state.labeled), state.best.accuracy if state.best else float("nan"))

    controller = DNASController(ccfg, seed=derive_seed(cfg.seed, "controller"))
    node_limit = bench.node_limit()
    for it in range(cfg.iters):
        if state.budget_exhausted or oracle.used >= cfg.query_budget:
            state.budget_exhausted = True
            logger.info("query budget exhausted before iteration %d", it)
            break

        controller.train_model(state.labeled, seed=derive_seed(cfg.seed, "pretrain", it))

        labeled_codes = controller.encode_means([r.cell for r in state.labeled])
        policy = cfg.policy().with_range(labeled_codes)
        region = None
        if cfg.dense_sampling:
            region = compute_regions(labeled_codes, [r.accuracy for r in state.labeled], cfg.sigma, cfg.topk)
        draws = sample_many(region, policy, controller.predict_flops, cfg.n_unlabeled, derive_seed(cfg.seed, "sample", it))
        branch_counts = {b.value: 0 for b in Branch}
        for _, branch in draws:
            branch_counts[branch.value] += 1

        known = {cell_key(r.cell) for r in state.labeled} | {cell_key(r.cell) for r in state.pseudo}
        sampled, unrepairable = _decode_samples(controller, [code for code, _ in draws], known, node_limit)
        state.pseudo.extend(pseudo_label(sampled, controller))

        history = controller.train_model(state.merged, seed=derive_seed(cfg.seed, "retrain", it), epochs=ccfg.retrain_epochs)

        candidates = pseudo_label([r.cell for r in state.merged], controller)
        chosen = select_top_p(candidates, cfg.p_top, cfg.flops_limit, cfg.flops_margin)
        eta2 = cfg.eta2 if math.isfinite(cfg.flops_limit) else 0.0
        improved = improve_architectures([c.cell for c in chosen], controller, cfg.eta1, eta2, cfg.improve_steps,
                                         known_keys={cell_key(r.cell) for r in state.labeled},
                                         max_steps=cfg.improve_max_steps, max_nodes=node_limit)
        # this iteration's share of the remaining budget
        quota = math.ceil((cfg.query_budget - oracle.used) / (cfg.iters - it))
        n_improved = oracle.evaluate(improved.cells, limit=quota)
        # spare quota goes to the next-best predicted candidates
        ranked = select_top_p(candidates, len(candidates), cfg.flops_limit, cfg.flops_margin)
        n_refilled = oracle.evaluate([c.cell for c in ranked if c.cell in bench], limit=quota - n_improved)

        best = _best_feasible(state, cfg.flops_limit)
        if best is not None and (state.best is None or best.accuracy > state.best.accuracy):
            state.best = best
        stats = IterationStats(
            iteration=it + 1,
            queries_used=oracle.used,
            best_oracle_acc=state.best.accuracy if state.best else float("nan"),
            mean_pseudo_acc=float(np.mean([r.accuracy for r in state.pseudo])) if state.pseudo else float("nan"),
            pseudo_size=len(state.pseudo),
            improved=n_improved,
            refilled=n_refilled,
            unrepairable=unrepairable + improved.unrepairable,
            not_in_bench=state.not_in_bench,
            losses=history.epochs[-1] if history.epochs else {},
            region_volumes=region.lengths() if region else [],
            branch_counts=branch_counts,
        )
        state.history.append(stats)
        logger.info("iteration %d: queries %d, best %.4f, |D-hat| %d, improved %d, refilled %d", stats.iteration,
                    stats.queries_used, stats.best_oracle_acc, stats.pseudo_size, stats.improved, stats.refilled)

    if state.not_in_bench:
        logger.warning("%d candidate cells were not in the benchmark and were skipped", state.not_in_bench)
    state.query_count = oracle.used
    state.controller = controller
    return state


def run_random_search(cfg, bench):
    """Distinct random cells up to the query budget; the baseline of the comparison tables."""
    state = SearchState()
    oracle = _Oracle(bench, cfg.query_budget, state)
    oracle.evaluate(initial_pool(bench, cfg.query_budget, derive_seed(cfg.seed, "initial")))
    state.best = _best_feasible(state, cfg.flops_limit)
    state.query_count = oracle.used
    return state


def _fresh_bench(bench):
    """Independent copy so every run starts its query count at zero."""
    if isinstance(bench, SyntheticTable):
        return SyntheticTable(bench.bench, bench.flops_model, max_nodes=bench.max_nodes)
    return BenchTable(bench.records)


def _run_variant(cfg, bench, flops_model, dense, disen, seed):
    run_cfg = replace(cfg, dense_sampling=dense, disentangle=disen, seed=seed)
    state = run_search(run_cfg, _fresh_bench(bench), flops_model)
    top = state.top_records(10, cfg.flops_limit)
    return {
        "top1": top[0].accuracy if top else float("nan"),
        "top10": float(np.mean([r.accuracy for r in top])) if top else float("nan"),
    }


ABLATION_GRID = ((False, False), (False, True), (True, False), (True, True))


def run_ablation(cfg, bench, flops_model, seeds, jobs=1):
    """
    The 2x2 dense-sampling / disentangling grid over `seeds`.
    Rows come out in the fixed order NN, NY, YN, YY.
    """
    tasks = [(dense, disen, seed) for dense, disen in ABLATION_GRID for seed in seeds]
    results = Parallel(n_jobs=jobs)(
        delayed(_run_variant)(cfg, bench, flops_model, dense, disen, seed) for dense, disen, seed in tasks
    )
    rows = []
    for dense, disen in ABLATION_GRID:
        runs = [r for (d, e, _), r in zip(tasks, results) if d == dense and e == disen]
        top1 = np.array([r["top1"] for r in runs])
        top10 = np.array([r["top10"] for r in runs])
        rows.append({
            "dense": "Y" if dense else "N",
            "disen": "Y" if disen else "N",
            "top1_mean": float(top1.mean()),
            "top1_std": float(top1.std()),
            "top10_mean": float(top10.mean()),
            "top10_std": float(top10.std()),
        })
    return rows


def _run_pair(cfg, bench, flops_model, seed):
    run_cfg = replace(cfg, seed=seed)
    dnas = run_search(run_cfg, _fresh_bench(bench), flops_model)
    rand = run_random_search(run_cfg, _fresh_bench(bench))
    acc = lambda s: s.best.accuracy if s.best else float("nan")
    return {"seed": seed, "dnas": acc(dnas), "random": acc(rand),
            "dnas_cell": cell_key(dnas.best.cell) if dnas.best else None,
            "dnas_flops": estimate_flops(dnas.best.cell, flops_model) if dnas.best else None}


def compare_with_random(cfg, bench, flops_model, seeds, jobs=1):
    """Paired-seed DNAS vs random search at equal budget."""
    return Parallel(n_jobs=jobs)(delayed(_run_pair)(cfg, bench, flops_model, seed) for seed in seeds)
