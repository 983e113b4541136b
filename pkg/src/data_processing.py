import numpy as np
import pandas as pd
from dataclasses import dataclass
from sklearn.preprocessing import StandardScaler

from src.archspace import cell_key, tokenize


@dataclass(frozen=True)
class PseudoRecord:
    """Predictor-labelled cell (an element of D-hat); values are never oracle values."""

    cell: object
    accuracy: float
    flops: float


class FlopsScaler:
    """
    Zero-mean / unit-variance FLOPS normalization fitted on the current dataset.
    Wraps StandardScaler so the fitted state can be written into a JSON sidecar.
    """

    def __init__(self):
        self.scaler = StandardScaler()
        self.is_fitted = False

    def fit(self, flops):
        self.scaler.fit(np.asarray(flops, dtype=np.float64).reshape(-1, 1))
        self.is_fitted = True
        return self

    def transform(self, flops):
        if not self.is_fitted:
            raise ValueError("FlopsScaler must be fitted before use")
        return self.scaler.transform(np.asarray(flops, dtype=np.float64).reshape(-1, 1))[:, 0]

    def inverse_transform(self, values):
        if not self.is_fitted:
            raise ValueError("FlopsScaler must be fitted before use")
        return self.scaler.inverse_transform(np.asarray(values, dtype=np.float64).reshape(-1, 1))[:, 0]

    @property
    def scale(self):
        return float(self.scaler.scale_[0])

    def to_dict(self):
        if not self.is_fitted:
            return None
        return {"mean": float(self.scaler.mean_[0]), "scale": self.scale, "var": float(self.scaler.var_[0]),
                "n_samples_seen": int(self.scaler.n_samples_seen_)}

    @classmethod
    def from_dict(cls, state):
        obj = cls()
        if state:
            obj.scaler.mean_ = np.array([state["mean"]])
            obj.scaler.scale_ = np.array([state["scale"]])
            obj.scaler.var_ = np.array([state["var"]])
            obj.scaler.n_samples_seen_ = state["n_samples_seen"]
            obj.scaler.n_features_in_ = 1
            obj.is_fitted = True
        return obj


@dataclass
class TrainingData:
    tokens: np.ndarray
    accuracy: np.ndarray
    flops_norm: np.ndarray

    def __len__(self):
        return len(self.accuracy)


def tokens_matrix(cells):
    """Stack the token sequences of `cells` into an (n, SEQ_LEN) int matrix."""
    return np.array([tokenize(cell) for cell in cells], dtype=np.int64)


def prepare_training_data(records, scaler, fit_scaler=True):
    """
    Turn records (oracle or pseudo-labelled) into controller arrays.
    FLOPS targets are normalized with `scaler`, refitted here when fit_scaler is set.
    """
    if not records:
        raise ValueError("cannot prepare an empty dataset")
    flops = np.array([r.flops for r in records], dtype=np.float64)
    if fit_scaler:
        scaler.fit(flops)
    return TrainingData(
        tokens=tokens_matrix([r.cell for r in records]),
        accuracy=np.array([r.accuracy for r in records], dtype=np.float64),
        flops_norm=scaler.transform(flops),
    )


def records_frame(records, source):
    """Tabular view of records, tagged with their `source` ('oracle' or 'pseudo')."""
    return pd.DataFrame({
        "cell": [cell_key(r.cell) for r in records],
        "accuracy": [r.accuracy for r in records],
        "flops": [r.flops for r in records],
        "source": source,
    })


def merge_datasets(labeled, pseudo):
    """D = D' U D-hat; a cell present in D' keeps its oracle record."""
    known = {cell_key(r.cell) for r in labeled}
    return list(labeled) + [r for r in pseudo if cell_key(r.cell) not in known]
