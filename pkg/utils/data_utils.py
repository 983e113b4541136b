import hashlib
import json
import math
from pathlib import Path

import numpy as np
import pandas as pd


def _key_int(key):
    if isinstance(key, (int, np.integer)):
        return int(key)
    digest = hashlib.blake2b(str(key).encode(), digest_size=4).digest()
    return int.from_bytes(digest, "little")


def derive_seed(root, *keys):
    """
    Sub-seed for a named phase of a run, e.g. derive_seed(seed, "sample", 2).
    Stable across processes and platforms.
    """
    entropy = [int(root) & 0xFFFFFFFF] + [_key_int(k) for k in keys]
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        value = float(obj)
        if math.isnan(value):
            return None
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return value
    if isinstance(obj, np.integer):
        return int(obj)
    if hasattr(obj, "value"):
        return obj.value
    return obj


def write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(_jsonable(obj), f, indent=2, sort_keys=True)
        f.write("\n")


def write_jsonl(path, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(_jsonable(row), sort_keys=True, separators=(",", ":")) + "\n")


def content_hash(config, input_paths=()):
    """sha256 over the canonical resolved config and the bytes of any input files."""
    h = hashlib.sha256()
    h.update(json.dumps(_jsonable(config), sort_keys=True, separators=(",", ":")).encode())
    for path in input_paths:
        h.update(Path(path).read_bytes())
    return h.hexdigest()


def build_manifest(command, config, seed, out_dir, input_paths=()):
    return {
        "command": command,
        "config": _jsonable(config),
        "seed": seed,
        "input_hash": content_hash({"command": command, "config": config, "seed": seed}, input_paths),
        "out_dir": str(out_dir),
    }


def history_frame(history):
    """One row per search iteration; region volumes spread into one column per dimension."""
    rows = []
    for stats in history:
        row = {
            "iteration": stats.iteration,
            "queries_used": stats.queries_used,
            "best_oracle_acc": stats.best_oracle_acc,
            "mean_pseudo_acc": stats.mean_pseudo_acc,
            "pseudo_size": stats.pseudo_size,
            "improved": stats.improved,
            "refilled": stats.refilled,
        }
        for s, volume in enumerate(stats.region_volumes):
            row[f"region_vol_{s}"] = volume
        rows.append(row)
    return pd.DataFrame(rows)


def write_csv(path, frame):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format="%.10g", lineterminator="\n")
