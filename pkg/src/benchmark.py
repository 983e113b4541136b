"""
Ground-truth oracles: converted NASBench-101 JSONL tables and a deterministic
synthetic benchmark that can be enumerated exhaustively for small cells.
"""

import hashlib
import json
import logging
import threading
from dataclasses import dataclass, field

import numpy as np

from src.archspace import (
    MAX_NODES,
    OpType,
    Validity,
    cell_from_json,
    cell_key,
    enumerate_cells,
    estimate_flops,
    longest_path,
    prune,
    random_cell,
    validate,
)
from src.errors import ConfigError, DisconnectedError, InvalidCellError, NotInBenchError, ParseError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EvaluatedRecord:
    cell: object
    accuracy: float
    flops: float

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValueError(f"accuracy {self.accuracy} outside [0, 1]")
        if self.flops < 0:
            raise ValueError(f"flops {self.flops} is negative")

    def to_json(self):
        obj = {"adj": [list(r) for r in self.cell.adjacency], "ops": [op.value for op in self.cell.ops]}
        obj.update({"acc": self.accuracy, "flops": self.flops})
        return obj


class BenchTable:
    """Lookup table of evaluated cells with distinct-query accounting."""

    def __init__(self, records=None):
        self.records = dict(records or {})
        self.query_count = 0
        self._seen = set()
        self._lock = threading.Lock()

    def __len__(self):
        return len(self.records)

    def __contains__(self, cell):
        return cell_key(cell) in self.records

    def _lookup(self, key, cell):
        try:
            return self.records[key]
        except KeyError:
            raise NotInBenchError(key) from None

    def query(self, cell):
        key = cell_key(prune(cell))
        with self._lock:
            record = self._lookup(key, cell)
            if key not in self._seen:
                self._seen.add(key)
                self.query_count += 1
        return record

    def is_queried(self, cell):
        return cell_key(cell) in self._seen

    def node_limit(self):
        """Largest cell size the table can answer for."""
        return max((r.cell.num_nodes for r in self.records.values()), default=MAX_NODES)

    def sample_cells(self, n, rng):
        """Draw up to n distinct cells for the initial labeled pool."""
        keys = sorted(self.records)
        idx = rng.permutation(len(keys))[:n]
        return [self.records[keys[i]].cell for i in idx]


def load_records(path):
    """
    Read a JSONL file of {"adj", "ops", "acc", "flops"} lines into a BenchTable
    keyed by the pruned cell. Duplicate cells keep their first occurrence.
    """
    records = {}
    duplicates = 0
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                acc = float(obj["acc"])
                flops = float(obj["flops"])
                adj, ops = obj["adj"], obj["ops"]
            except (ValueError, KeyError, TypeError) as e:
                raise ParseError(str(e), line=lineno) from e
            try:
                cell = prune(cell_from_json({"adj": adj, "ops": ops}))
                verdict = validate(cell)
                if verdict != Validity.OK:
                    raise InvalidCellError(verdict.value, line=lineno)
                record = EvaluatedRecord(cell=cell, accuracy=acc, flops=flops)
            except InvalidCellError:
                raise
            except (ValueError, DisconnectedError) as e:
                raise InvalidCellError(str(e), line=lineno) from e
            key = cell_key(cell)
            if key in records:
                duplicates += 1
                continue
            records[key] = record
    if duplicates:
        logger.warning("%s: %d duplicate cells ignored (first occurrence kept)", path, duplicates)
    return BenchTable(records)


def _unit_noise(seed, key):
    digest = hashlib.blake2b(f"{seed}:{key}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") / 2**64 * 2.0 - 1.0


@dataclass
class SyntheticBench:
    """
    Smooth, seeded accuracy surface: deeper cells with more convolution score
    higher, pooling-heavy cells are penalised, and a small per-cell noise
    term breaks ties.
    """

    seed: int = 0
    base: float = 0.80
    depth_bonus: float = 0.02
    op_scores: dict = field(default_factory=lambda: {
        OpType.CONV1X1: 0.006,
        OpType.CONV3X3: 0.012,
        OpType.MAXPOOL3X3: 0.002,
    })
    density_weight: float = 0.01
    pool_penalty: float = 0.015
    noise: float = 0.02

    def penalty(self, cell):
        interior = cell.ops[1:-1]
        pools = sum(op == OpType.MAXPOOL3X3 for op in interior)
        convs = len(interior) - pools
        return self.pool_penalty * max(0, pools - convs)

    def clean_accuracy(self, cell):
        score = self.base + self.depth_bonus * longest_path(cell)
        score += sum(self.op_scores.get(op, 0.0) for op in cell.ops[1:-1])
        score += self.density_weight * cell.num_edges / 9.0
        return score - self.penalty(cell)

    def to_dict(self):
        return {
            "seed": self.seed,
            "base": self.base,
            "depth_bonus": self.depth_bonus,
            "op_scores": {OpType(k).value: v for k, v in self.op_scores.items()},
            "density_weight": self.density_weight,
            "pool_penalty": self.pool_penalty,
            "noise": self.noise,
        }


def synth_eval(bench, cell, m):
    acc = bench.clean_accuracy(cell)
    if bench.noise:
        acc += bench.noise * _unit_noise(bench.seed, cell_key(cell))
    return EvaluatedRecord(cell=cell, accuracy=float(np.clip(acc, 0.0, 1.0)), flops=estimate_flops(cell, m))


class SyntheticTable(BenchTable):
    """BenchTable whose records are computed by synth_eval on first lookup."""

    def __init__(self, bench, flops_model, max_nodes=5):
        super().__init__()
        self.bench = bench
        self.flops_model = flops_model
        self.max_nodes = max_nodes

    def node_limit(self):
        return self.max_nodes

    def __contains__(self, cell):
        return cell.num_nodes <= self.max_nodes and validate(cell) == Validity.OK

    def _lookup(self, key, cell):
        record = self.records.get(key)
        if record is None:
            pruned = prune(cell)
            if pruned not in self:
                raise NotInBenchError(key)
            record = synth_eval(self.bench, pruned, self.flops_model)
            self.records[key] = record
        return record

    def sample_cells(self, n, rng):
        return [random_cell(rng, max_nodes=self.max_nodes) for _ in range(n)]


def enumerate_top(bench, m, v_max, k):
    """Exact top-k of the synthetic space, best first, ties by serialized cell."""
    if v_max > 5:
        raise ValueError("exhaustive enumeration is limited to v_max <= 5")
    scored = [synth_eval(bench, cell, m) for cell in enumerate_cells(v_max)]
    scored.sort(key=lambda r: (-r.accuracy, cell_key(r.cell)))
    return scored[:k]


def flops_percentile(m, v_max, q):
    """FLOPS at percentile q (0-100) of the exhaustive v_max space."""
    values = [estimate_flops(cell, m) for cell in enumerate_cells(v_max)]
    return float(np.percentile(values, q))


def resolve_bench(source, flops_model, bench_seed=0, noise=0.02, max_nodes=5):
    """Build the oracle named by the `--bench` flag: 'synthetic' or 'file:<path>'."""
    if source == "synthetic":
        return SyntheticTable(SyntheticBench(seed=bench_seed, noise=noise), flops_model, max_nodes=max_nodes)
    if source.startswith("file:"):
        return load_records(source[len("file:"):])
    raise ConfigError("--bench", f"expected 'synthetic' or 'file:<path>', got {source!r}")
