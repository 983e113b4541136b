import numpy as np
import pytest

from src.archspace import FlopsModel, OpType, make_cell, random_cell
from src.benchmark import SyntheticBench, SyntheticTable, synth_eval
from src.controller import ControllerConfig, DNASController


@pytest.fixture
def flops_model():
    return FlopsModel()


@pytest.fixture
def synth_bench():
    return SyntheticBench(seed=7)


@pytest.fixture
def synth_table(synth_bench, flops_model):
    return SyntheticTable(synth_bench, flops_model, max_nodes=5)


@pytest.fixture
def tiny_config():
    return ControllerConfig(hidden_size=8, epochs=3, retrain_epochs=1, batch_size=8)


@pytest.fixture
def chain_cell():
    """INPUT -> conv3x3 -> conv1x1 -> OUTPUT plus a skip from INPUT to OUTPUT."""
    adj = np.zeros((4, 4), dtype=int)
    adj[0, 1] = adj[1, 2] = adj[2, 3] = adj[0, 3] = 1
    return make_cell(adj, [OpType.INPUT, OpType.CONV3X3, OpType.CONV1X1, OpType.OUTPUT])


def synthetic_records(n, seed, bench, flops_model, max_nodes=5):
    rng = np.random.default_rng(seed)
    seen, records = set(), []
    while len(records) < n:
        cell = random_cell(rng, max_nodes=max_nodes)
        key = (cell.adjacency, cell.ops)
        if key in seen:
            continue
        seen.add(key)
        records.append(synth_eval(bench, cell, flops_model))
    return records


@pytest.fixture(scope="session")
def trained_tiny():
    """A small controller trained briefly on synthetic records, shared across tests."""
    bench, fm = SyntheticBench(seed=7), FlopsModel()
    records = synthetic_records(40, 0, bench, fm)
    controller = DNASController(ControllerConfig(hidden_size=8, epochs=30, batch_size=16), seed=0)
    controller.train_model(records, seed=1)
    return controller, records
