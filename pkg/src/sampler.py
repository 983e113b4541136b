"""
Promising-region dense sampling and latent-space improvement.

Regions are per-dimension unions of [z - sigma, z + sigma] around the latent
values of the top-k evaluated cells. Draws mix three branches: the promising
region, the FLOPS-limit edge and the whole latent range.
"""

import enum
import logging
import math
from dataclasses import dataclass

import numpy as np

from src.archspace import cell_key, detokenize, validate, Validity
from src.controller import LatentCode
from src.errors import ConfigError, InsufficientRecordsError, UnrepairableError

logger = logging.getLogger(__name__)

FLOPS_EDGE_ATTEMPTS = 200
RANGE_EXPANSION = 0.2


class Branch(str, enum.Enum):
    PROMISING = "PROMISING"
    FLOPS_EDGE = "FLOPS_EDGE"
    GLOBAL = "GLOBAL"


def merge_intervals(intervals):
    """Sort and merge overlapping (or touching) closed intervals."""
    merged = []
    for lo, hi in sorted(intervals):
        if merged and lo <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], hi)
        else:
            merged.append([lo, hi])
    return [tuple(iv) for iv in merged]


@dataclass
class PromisingRegion:
    intervals: list
    sigma: float
    k: int

    @property
    def dim(self):
        return len(self.intervals)

    def lengths(self):
        return [sum(hi - lo for lo, hi in dim) for dim in self.intervals]

    def contains(self, z):
        return all(any(lo <= v <= hi for lo, hi in dim) for v, dim in zip(z, self.intervals))


def compute_regions(codes, accuracies, sigma, k):
    """
    Args:
        codes: (n, d) latent values (posterior means) of evaluated cells
        accuracies: length-n oracle accuracies
    Returns:
        PromisingRegion built from the k most accurate cells, ties by input order
    """
    codes = np.atleast_2d(np.asarray(codes, dtype=np.float64))
    accuracies = np.asarray(accuracies, dtype=np.float64)
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    if k < 1 or len(accuracies) < k:
        raise InsufficientRecordsError(f"need at least k={k} records, got {len(accuracies)}")
    top = np.argsort(-accuracies, kind="stable")[:k]
    intervals = [merge_intervals((float(z) - sigma, float(z) + sigma) for z in codes[top, s])
                 for s in range(codes.shape[1])]
    return PromisingRegion(intervals=intervals, sigma=sigma, k=k)


@dataclass
class SamplerPolicy:
    eps1: float = 0.05
    eps2: float = 0.0
    flops_limit: float = math.inf
    edge_band: float = None
    z_min: np.ndarray = None
    z_max: np.ndarray = None

    def __post_init__(self):
        if self.edge_band is None and math.isfinite(self.flops_limit):
            self.edge_band = 0.1 * self.flops_limit

    @property
    def eps3(self):
        return 1.0 - self.eps1 - self.eps2

    def validate(self):
        if self.eps1 < 0:
            raise ConfigError("--eps1", "probability must be >= 0")
        if self.eps2 < 0:
            raise ConfigError("--eps2", "probability must be >= 0")
        if self.eps1 + self.eps2 > 1.0 + 1e-12:
            raise ConfigError("--eps1/--eps2", f"eps1 + eps2 = {self.eps1 + self.eps2} exceeds 1")
        if self.eps2 > 0 and not math.isfinite(self.flops_limit):
            raise ConfigError("--eps2", "FLOPS-edge sampling needs a finite --flops-limit")
        if self.edge_band is not None and self.edge_band < 0:
            raise ConfigError("--edge-band", "must be >= 0")
        return self

    def with_range(self, codes):
        """Global sampling range: empirical min/max of `codes` widened by 20% of the span."""
        codes = np.atleast_2d(codes)
        lo, hi = codes.min(axis=0), codes.max(axis=0)
        pad = RANGE_EXPANSION * np.maximum(hi - lo, 1e-6) / 2.0
        self.z_min, self.z_max = lo - pad, hi + pad
        return self


def _draw_promising(region, rng):
    z = np.empty(region.dim)
    for s, dim in enumerate(region.intervals):
        widths = np.array([hi - lo for lo, hi in dim])
        j = rng.choice(len(dim), p=widths / widths.sum())
        z[s] = rng.uniform(dim[j][0], dim[j][1])
    return z


def _draw_global(policy, rng, size=None):
    shape = (len(policy.z_min),) if size is None else (size, len(policy.z_min))
    return rng.uniform(policy.z_min, policy.z_max, size=shape)


def _draw_flops_edge(policy, predict_flops, rng):
    candidates = _draw_global(policy, rng, size=FLOPS_EDGE_ATTEMPTS)
    flops = np.asarray(predict_flops(candidates))
    limit = policy.flops_limit
    band = policy.edge_band or 0.0
    accepted = np.nonzero((flops <= limit) & (flops >= limit - band))[0]
    if len(accepted):
        return candidates[accepted[0]]
    under = np.nonzero(flops <= limit)[0]
    if len(under):
        return candidates[under[np.argmax(flops[under])]]
    return candidates[np.argmin(flops)]


def sample_latent(region, policy, predict_flops, seed):
    """
    One mixture draw. `predict_flops` maps an (n, d) array to de-normalized FLOPS.
    Returns (LatentCode, Branch).
    """
    rng = np.random.default_rng(seed)
    u = rng.random()
    if u < policy.eps1:
        branch = Branch.PROMISING
        z = _draw_promising(region, rng)
    elif u < policy.eps1 + policy.eps2:
        branch = Branch.FLOPS_EDGE
        z = _draw_flops_edge(policy, predict_flops, rng)
    else:
        branch = Branch.GLOBAL
        z = _draw_global(policy, rng)
    return LatentCode.point(z), branch


def sample_many(region, policy, predict_flops, n, root_seed):
    """n draws with per-draw seeds derived from root_seed by counter."""
    return [sample_latent(region, policy, predict_flops, np.random.default_rng([root_seed, i])) for i in range(n)]


def latent_gradient_step(z, controller, eta1, eta2):
    """z' = z + eta1 * d f_acc/dz - eta2 * d f_flops/dz, evaluated at z.mean."""
    if eta1 < 0 or eta2 < 0:
        raise ValueError("step sizes must be non-negative")
    mean = z.mean if isinstance(z, LatentCode) else np.asarray(z, dtype=np.float64)
    if eta1 == 0 and eta2 == 0:
        new = mean.copy()
    else:
        d_acc, d_flops = controller.predictor_gradients(mean)
        new = mean + eta1 * d_acc[0] - eta2 * d_flops[0]
    return LatentCode.point(new)


@dataclass
class ImprovementResult:
    cells: list
    unrepairable: int
    duplicates: int


def improve_architectures(cells, controller, eta1, eta2, steps, known_keys=(), max_steps=None, max_nodes=None):
    """
    Move each cell's latent mean along the predictor gradients and decode it.

    After `steps` updates a decoded cell that is already known keeps stepping
    up to `max_steps` in total. Only valid cells that are new with respect to
    `known_keys` and to each other are returned. Decodes are cut down to
    `max_nodes` nodes when it is given.
    """
    if not cells:
        return ImprovementResult([], 0, 0)
    max_steps = steps if max_steps is None else max(max_steps, steps)
    seen = set(known_keys)
    novel, unrepairable, duplicates = [], 0, 0
    means = controller.encode_means(list(cells))
    for mean in means:
        z = LatentCode.point(mean)
        for _ in range(steps):
            z = latent_gradient_step(z, controller, eta1, eta2)
        taken = steps
        while True:
            try:
                cell = detokenize(controller.decode(z), max_nodes=max_nodes)
            except UnrepairableError:
                cell = None
            if cell is not None and validate(cell) == Validity.OK and cell_key(cell) not in seen:
                seen.add(cell_key(cell))
                novel.append(cell)
                break
            if taken >= max_steps:
                if cell is None:
                    unrepairable += 1
                else:
                    duplicates += 1
                break
            z = latent_gradient_step(z, controller, eta1, eta2)
            taken += 1
    if unrepairable:
        logger.warning("improvement: %d decoded cells could not be repaired", unrepairable)
    return ImprovementResult(novel, unrepairable, duplicates)
