"""Bit-exact JSON checkpoints and deterministic manifest hashing.

Float arrays are serialized as base64-encoded little-endian float64 bytes so
a save/load round trip reproduces every bit; manifests avoid timestamps and
use sorted keys so identical runs yield identical files.
"""

from __future__ import annotations

import base64
import hashlib
import json

import numpy as np

CHECKPOINT_VERSION = 1


def encode_array(arr: np.ndarray) -> dict:
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    return {
        "shape": list(arr.shape),
        "data": base64.b64encode(arr.tobytes()).decode("ascii"),
    }


def decode_array(blob: dict) -> np.ndarray:
    raw = base64.b64decode(blob["data"])
    return np.frombuffer(raw, dtype=np.float64).reshape(blob["shape"]).copy()


def dumps(payload: dict) -> str:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def save_json(path, payload: dict):
    with open(path, "w") as fh:
        fh.write(dumps(payload))


def load_json(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def content_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()
