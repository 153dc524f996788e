"""Prefill-activation LLM router."""

import json
import struct
from pathlib import Path

import numpy as np

from ._core import (
    ActivationStore,
    ConfigError,
    DataError,
    NumericError,
    PfrouterError,
    anisotropy,
    bayes_optimal_auc,
    brier,
    canonical_matrix_name,
    effective_dimensionality,
    fisher_j,
    p_auccc,
    roc_auc,
    route,
    run,
    synth,
)

MAGIC = b"PFACT\x00\x01\x00"
POOLING_CODES = {"last_token": 0, "mean": 1}


def write_matrix(path, values, layer, pooling):
    """Write one activation matrix in the binary dump layout."""
    values = np.ascontiguousarray(values, dtype="<f4")
    rows, cols = values.shape
    header = MAGIC + struct.pack("<IIHBB", rows, cols, layer, POOLING_CODES[pooling], 0)
    Path(path).write_bytes(header + values.tobytes())


def write_dump(directory, encoder_id, query_ids, matrices, num_layers):
    """Write a dump directory; `matrices` maps (layer, pooling) to a 2-D array."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    hidden = None
    for (layer, pooling), values in sorted(matrices.items()):
        name = canonical_matrix_name(layer, pooling)
        write_matrix(directory / name, values, layer, pooling)
        hidden = np.shape(values)[1]
        entries.append({"layer": layer, "pooling": pooling, "path": name})
    manifest = {
        "encoder_id": encoder_id,
        "num_layers": num_layers,
        "hidden_dim": hidden,
        "dtype": "f32le",
        "query_ids": list(query_ids),
        "matrices": entries,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return directory


__all__ = [
    "ActivationStore",
    "ConfigError",
    "DataError",
    "NumericError",
    "PfrouterError",
    "anisotropy",
    "bayes_optimal_auc",
    "brier",
    "canonical_matrix_name",
    "effective_dimensionality",
    "fisher_j",
    "p_auccc",
    "roc_auc",
    "route",
    "run",
    "synth",
    "write_dump",
    "write_matrix",
]
