"""
Interpretability tables: single-factor latent traversals and factor/accuracy
rank correlations.
"""

import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy.stats import kendalltau

from src.archspace import cell_key, detokenize, tokenize
from src.errors import InsufficientRecordsError, UnrepairableError

logger = logging.getLogger(__name__)

MIN_CORRELATION_RECORDS = 10


@dataclass
class TraversalReport:
    dim: int
    values: list
    cells: list  # CellGraph, or None where the decoded sequence was unrepairable
    edit_distances: list
    base_index: int

    def to_frame(self):
        return pd.DataFrame({
            "value": self.values,
            "cell": [cell_key(c) if c is not None else "UNREPAIRABLE" for c in self.cells],
            "edit_distance": self.edit_distances,
        })


@dataclass
class CorrelationReport:
    dim: int
    points: list  # (z, accuracy, flops)
    tau: float

    def to_frame(self):
        return pd.DataFrame(self.points, columns=["z", "acc", "flops"])


def hamming(a, b):
    return int(sum(x != y for x, y in zip(a, b)))


def traverse(controller, base_cell, dim, lo=-0.4, hi=0.4, steps=9):
    """
    Decode the base cell's posterior mean with coordinate `dim` swept over
    linspace(lo, hi, steps); the base value itself is included in the sweep.
    Edit distances are token Hamming distances to the base reconstruction.
    """
    if not lo < hi:
        raise ValueError("traversal needs lo < hi")
    if steps < 2:
        raise ValueError("traversal needs at least 2 steps")
    latent_dim = controller.config.latent_dim
    if not 0 <= dim < latent_dim:
        raise ValueError(f"dimension {dim} outside [0, {latent_dim})")

    base = controller.encode(tokenize(base_cell)).mean
    values = sorted(set(np.linspace(lo, hi, steps).tolist()) | {float(base[dim])})
    Z = np.tile(base, (len(values), 1))
    Z[:, dim] = values
    decoded = controller.decode_tokens(Z)
    base_index = values.index(float(base[dim]))
    reference = decoded[base_index]

    cells = []
    for tokens in decoded:
        try:
            cells.append(detokenize(tokens))
        except UnrepairableError:
            cells.append(None)
    if any(c is None for c in cells):
        logger.debug("traversal of dim %d: %d unrepairable decodes", dim, sum(c is None for c in cells))
    return TraversalReport(
        dim=dim,
        values=values,
        cells=cells,
        edit_distances=[hamming(tokens, reference) for tokens in decoded],
        base_index=base_index,
    )


def rank_correlation(x, y):
    """Kendall tau; defined as 0 when either side has no variance."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        return 0.0
    tau, _ = kendalltau(x, y)
    return 0.0 if np.isnan(tau) else float(tau)


def correlate(codes, records, dim):
    """
    Args:
        codes: (n, d) latent means of oracle-evaluated records
        records: the matching EvaluatedRecords
    """
    if len(records) < MIN_CORRELATION_RECORDS:
        raise InsufficientRecordsError(f"need at least {MIN_CORRELATION_RECORDS} records, got {len(records)}")
    codes = np.atleast_2d(codes)
    z = codes[:, dim]
    points = [(float(v), float(r.accuracy), float(r.flops)) for v, r in zip(z, records)]
    return CorrelationReport(dim=dim, points=points, tau=rank_correlation(z, [r.accuracy for r in records]))


def correlate_all(controller, records):
    codes = controller.encode_means([r.cell for r in records])
    logger.info("correlating %d records across %d latent dims", len(records), codes.shape[1])
    return [correlate(codes, records, s) for s in range(codes.shape[1])]
