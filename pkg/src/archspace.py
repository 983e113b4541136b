"""
Cell search space: validity rules, pruning, tokenization and the FLOPS model.

A cell is a DAG of at most 7 nodes whose adjacency matrix is strictly upper
triangular. Node 0 is INPUT, node V-1 is OUTPUT, the nodes in between carry a
conv1x1, conv3x3 or maxpool3x3 operation.
"""

import enum
import itertools
import json
from dataclasses import dataclass, field

import numpy as np

from src.errors import DisconnectedError, InvalidCellError, UnrepairableError

MAX_NODES = 7
MAX_EDGES = 9
MAX_INTERIOR = MAX_NODES - 2
NUM_ADJ_SLOTS = MAX_NODES * (MAX_NODES - 1) // 2
SEQ_LEN = NUM_ADJ_SLOTS + MAX_INTERIOR

# token vocabulary
PAD = 0
EDGE_0 = 1
EDGE_1 = 2
OP_CONV1X1 = 3
OP_CONV3X3 = 4
OP_MAXPOOL3X3 = 5
VOCAB = 6

RANDOM_CELL_RETRIES = 10_000


class OpType(str, enum.Enum):
    CONV1X1 = "conv1x1"
    CONV3X3 = "conv3x3"
    MAXPOOL3X3 = "maxpool3x3"
    INPUT = "input"
    OUTPUT = "output"


INTERIOR_OPS = (OpType.CONV1X1, OpType.CONV3X3, OpType.MAXPOOL3X3)
OP_TO_TOKEN = {
    OpType.CONV1X1: OP_CONV1X1,
    OpType.CONV3X3: OP_CONV3X3,
    OpType.MAXPOOL3X3: OP_MAXPOOL3X3,
}
TOKEN_TO_OP = {tok: op for op, tok in OP_TO_TOKEN.items()}


class Validity(str, enum.Enum):
    OK = "OK"
    NOT_DAG = "NOT_DAG"
    TOO_MANY_EDGES = "TOO_MANY_EDGES"
    DISCONNECTED = "DISCONNECTED"
    BAD_TERMINALS = "BAD_TERMINALS"


@dataclass(frozen=True)
class CellGraph:
    """An architecture cell. `adjacency` is a tuple of row tuples of 0/1."""

    adjacency: tuple
    ops: tuple

    def __post_init__(self):
        object.__setattr__(self, "adjacency", tuple(tuple(int(bool(v)) for v in row) for row in self.adjacency))
        object.__setattr__(self, "ops", tuple(OpType(op) for op in self.ops))

    @property
    def num_nodes(self):
        return len(self.ops)

    @property
    def num_edges(self):
        return sum(sum(row) for row in self.adjacency)

    def matrix(self):
        return np.array(self.adjacency, dtype=np.int8).reshape(self.num_nodes, self.num_nodes)


def make_cell(adjacency, ops):
    return CellGraph(adjacency=tuple(map(tuple, np.asarray(adjacency, dtype=int).tolist())), ops=tuple(ops))


@dataclass
class FlopsModel:
    """Analytic multiply-add model for a stack of identical cells."""

    input_resolution: int = 32
    channels: int = 128
    cells_per_stack: int = 3
    op_costs: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.op_costs:
            hw = self.input_resolution * self.input_resolution
            c = self.channels
            self.op_costs = {
                OpType.CONV1X1: float(hw * c * c),
                OpType.CONV3X3: float(hw * c * c * 9),
                # one multiply-add per window element and channel
                OpType.MAXPOOL3X3: float(hw * c * 9),
            }
        else:
            self.op_costs = {OpType(k): float(v) for k, v in self.op_costs.items()}

    def cost(self, op):
        return self.op_costs.get(OpType(op), 0.0)

    def to_dict(self):
        return {
            "input_resolution": self.input_resolution,
            "channels": self.channels,
            "cells_per_stack": self.cells_per_stack,
            "op_costs": {op.value: cost for op, cost in self.op_costs.items()},
        }


def _reachable(adj, start, forward=True):
    n = adj.shape[0]
    seen = {start}
    stack = [start]
    while stack:
        node = stack.pop()
        nbrs = np.nonzero(adj[node])[0] if forward else np.nonzero(adj[:, node])[0]
        for nxt in nbrs:
            nxt = int(nxt)
            if nxt not in seen:
                seen.add(nxt)
                stack.append(nxt)
    return seen


def _on_path_nodes(adj):
    n = adj.shape[0]
    return _reachable(adj, 0, forward=True) & _reachable(adj, n - 1, forward=False)


def validate(g):
    """Return Validity.OK or the first violated rule."""
    n = g.num_nodes
    if n < 2 or n > MAX_NODES:
        return Validity.BAD_TERMINALS
    if g.ops[0] != OpType.INPUT or g.ops[-1] != OpType.OUTPUT:
        return Validity.BAD_TERMINALS
    if any(op in (OpType.INPUT, OpType.OUTPUT) for op in g.ops[1:-1]):
        return Validity.BAD_TERMINALS
    if len(g.adjacency) != n or any(len(row) != n for row in g.adjacency):
        return Validity.NOT_DAG
    adj = g.matrix()
    if np.any(np.tril(adj)):
        return Validity.NOT_DAG
    if int(adj.sum()) > MAX_EDGES:
        return Validity.TOO_MANY_EDGES
    if len(_on_path_nodes(adj)) != n:
        return Validity.DISCONNECTED
    return Validity.OK


def prune(g):
    """Drop every node (and its edges) that is not on an INPUT->OUTPUT path."""
    adj = np.triu(g.matrix(), k=1)
    n = adj.shape[0]
    keep = _on_path_nodes(adj)
    if 0 not in keep or n - 1 not in keep or n < 2:
        raise DisconnectedError("no path from INPUT to OUTPUT")
    idx = sorted(keep)
    sub = adj[np.ix_(idx, idx)]
    return make_cell(sub, [g.ops[i] for i in idx])


def _adj_slots(n):
    return [(i, j) for i in range(n) for j in range(i + 1, n)]


def tokenize(g):
    """Fixed-length token sequence: row-major adjacency bits, then interior ops."""
    pruned = prune(g)
    verdict = validate(pruned)
    if verdict != Validity.OK:
        raise InvalidCellError(f"cell fails validation: {verdict.value}")
    n = pruned.num_nodes
    tokens = [PAD] * SEQ_LEN
    for slot, (i, j) in enumerate(_adj_slots(n)):
        tokens[slot] = EDGE_1 if pruned.adjacency[i][j] else EDGE_0
    for k, op in enumerate(pruned.ops[1:-1]):
        tokens[NUM_ADJ_SLOTS + k] = OP_TO_TOKEN[op]
    return tuple(tokens)


def _nearest_op_token(tok):
    if tok in TOKEN_TO_OP:
        return tok
    legal = np.array(sorted(TOKEN_TO_OP))
    return int(legal[np.argmin(np.abs(legal - tok))])


def detokenize(tokens, max_nodes=None):
    """
    Inverse of tokenize; repairs decoder emissions that fall outside its image.
    With max_nodes set, interior nodes past the limit are dropped before pruning.
    """
    tokens = [int(t) for t in tokens]
    if len(tokens) != SEQ_LEN:
        raise UnrepairableError(f"expected {SEQ_LEN} tokens, got {len(tokens)}")
    if any(t < 0 or t >= VOCAB for t in tokens):
        raise UnrepairableError("token id outside vocabulary")

    # interior op list ends at the first PAD op slot
    ops = []
    for tok in tokens[NUM_ADJ_SLOTS:]:
        if tok == PAD:
            break
        ops.append(TOKEN_TO_OP[_nearest_op_token(tok)])
    n = len(ops) + 2

    adj = np.zeros((n, n), dtype=np.int8)
    kept = 0
    for slot, (i, j) in enumerate(_adj_slots(n)):
        if tokens[slot] == EDGE_1:
            if kept >= MAX_EDGES:
                continue
            adj[i, j] = 1
            kept += 1
    node_ops = [OpType.INPUT, *ops, OpType.OUTPUT]
    if max_nodes is not None and n > max_nodes:
        keep = list(range(max_nodes - 1)) + [n - 1]
        adj = adj[np.ix_(keep, keep)]
        node_ops = [node_ops[i] for i in keep]
    cell = make_cell(adj, node_ops)
    try:
        return prune(cell)
    except DisconnectedError as e:
        raise UnrepairableError("no INPUT->OUTPUT path survives repair") from e


def estimate_flops(g, m):
    return float(sum(m.cost(op) for op in g.ops[1:-1]) * m.cells_per_stack)


def random_cell(seed, num_nodes=None, max_nodes=MAX_NODES):
    """
    Rejection-sample a valid cell.
    Args:
        seed: int or np.random.Generator
        num_nodes: fix V instead of drawing it uniformly from [2, max_nodes]
    """
    rng = np.random.default_rng(seed)
    for _ in range(RANDOM_CELL_RETRIES):
        n = int(num_nodes) if num_nodes is not None else int(rng.integers(2, max_nodes + 1))
        interior = rng.integers(0, len(INTERIOR_OPS), size=n - 2)
        ops = [OpType.INPUT, *(INTERIOR_OPS[k] for k in interior), OpType.OUTPUT]
        adj = np.triu(rng.integers(0, 2, size=(n, n)), k=1)
        cell = make_cell(adj, ops)
        if validate(cell) == Validity.OK:
            return cell
    raise RuntimeError("random_cell retry cap exhausted")


def enumerate_cells(v_max, v_min=2):
    """Yield every valid cell with v_min..v_max nodes (exhaustive; keep v_max small)."""
    for n in range(v_min, v_max + 1):
        slots = _adj_slots(n)
        valid_adjs = []
        for bits in itertools.product((0, 1), repeat=len(slots)):
            if sum(bits) > MAX_EDGES:
                continue
            adj = np.zeros((n, n), dtype=np.int8)
            for (i, j), b in zip(slots, bits):
                adj[i, j] = b
            if len(_on_path_nodes(adj)) == n:
                valid_adjs.append(adj)
        for interior in itertools.product(INTERIOR_OPS, repeat=n - 2):
            ops = [OpType.INPUT, *interior, OpType.OUTPUT]
            for adj in valid_adjs:
                yield make_cell(adj, ops)


def longest_path(g):
    """Edge count of the longest INPUT->OUTPUT path."""
    n = g.num_nodes
    dist = [-1] * n
    dist[0] = 0
    for j in range(1, n):
        preds = [dist[i] + 1 for i in range(j) if g.adjacency[i][j] and dist[i] >= 0]
        dist[j] = max(preds) if preds else -1
    return max(dist[-1], 0)


def cell_to_json(g):
    return {"v": g.num_nodes, "adj": [list(row) for row in g.adjacency], "ops": [op.value for op in g.ops]}


def cell_from_json(obj):
    cell = make_cell(obj["adj"], obj["ops"])
    if "v" in obj and int(obj["v"]) != cell.num_nodes:
        raise InvalidCellError(f"'v'={obj['v']} disagrees with {cell.num_nodes} ops")
    return cell


def cell_key(g):
    """Serialized canonical key; only meaningful for pruned cells."""
    return json.dumps(cell_to_json(g), separators=(",", ":"))
