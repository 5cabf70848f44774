"""Delimited outputs plus aligned plain-text table mirrors.

Every tabular artifact is written twice: a machine-readable CSV and a
monospace .txt rendering for eyeball comparison against published layouts.
"""

from __future__ import annotations

import hashlib
import json
import platform
import time
from pathlib import Path

import numpy as np
import pandas as pd


def write_table(frame, csv_path, title=None, float_format="%.6g"):
    """Write CSV and a .txt mirror next to it; returns the CSV path."""
    csv_path = Path(csv_path)
    frame.to_csv(csv_path, index=False, float_format=float_format)
    txt_path = csv_path.with_suffix(".txt")
    with open(txt_path, "w") as fh:
        if title:
            fh.write(title + "\n")
            fh.write("=" * len(title) + "\n")
        fh.write(frame.to_string(index=False,
                                 float_format=lambda v: float_format % v))
        fh.write("\n")
    return csv_path


def write_json(payload, path):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=_coerce)
        fh.write("\n")
    return path


def _coerce(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj)}")


def file_hash(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir, command, seed, config_payload=None, inputs=(),
                   started=None, status="ok"):
    """One manifest.json per output directory."""
    out_dir = Path(out_dir)
    payload = {
        "command": command,
        "seed": seed,
        "config_hash": hashlib.sha256(
            json.dumps(config_payload or {}, sort_keys=True, default=_coerce).encode()
        ).hexdigest(),
        "input_hashes": {str(p): file_hash(p) for p in inputs if Path(p).exists()},
        "versions": {
            "python": platform.python_version(),
            "numpy": np.__version__,
            "pandas": pd.__version__,
        },
        "wall_time_s": None if started is None else round(time.time() - started, 3),
        "status": status,
    }
    return write_json(payload, out_dir / "manifest.json")
