"""Checksummed text files for trained models.

Layout: one header line ``cmprop-model v1 type=<ann|gpr|forest> sha256=<hex>``
followed by a JSON payload. Floats survive the round trip exactly because
JSON stores Python's shortest round-trip repr.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

from .forest import RandomForest, forest_from_payload, forest_to_payload
from .models import (AnnModel, GprModel, ann_from_payload, ann_to_payload,
                     gpr_from_payload, gpr_to_payload)

MAGIC = "cmprop-model"
VERSION = "v1"

_CODECS = {
    "ann": (AnnModel, ann_to_payload, ann_from_payload),
    "gpr": (GprModel, gpr_to_payload, gpr_from_payload),
    "forest": (RandomForest, forest_to_payload, forest_from_payload),
}


class ModelFileError(ValueError):
    pass


class ChecksumError(ModelFileError):
    pass


class ModelTypeError(ModelFileError):
    pass


def model_type(model) -> str:
    for name, (cls, _, _) in _CODECS.items():
        if isinstance(model, cls):
            return name
    raise TypeError(f"cannot serialize {type(model).__name__}")


def dumps_model(model, meta: dict | None = None) -> str:
    kind = model_type(model)
    body = json.dumps({"model": _CODECS[kind][1](model), "meta": meta or {}},
                      sort_keys=True, allow_nan=True)
    digest = hashlib.sha256(body.encode()).hexdigest()
    return f"{MAGIC} {VERSION} type={kind} sha256={digest}\n{body}\n"


def loads_model(text: str, expected_type: str | None = None):
    """Parse a model file; returns ``(model, meta)``."""
    header, _, body = text.partition("\n")
    parts = header.split()
    if len(parts) != 4 or parts[0] != MAGIC:
        raise ModelFileError("not a cmprop model file")
    if parts[1] != VERSION:
        raise ModelFileError(f"unsupported model file version {parts[1]!r} (expected {VERSION})")
    fields = dict(p.split("=", 1) for p in parts[2:])
    kind = fields.get("type")
    if kind not in _CODECS:
        raise ModelFileError(f"unknown model type {kind!r}")
    if expected_type is not None and kind != expected_type:
        raise ModelTypeError(f"file holds a {kind} model, expected {expected_type}")
    body = body.rstrip("\n")
    if hashlib.sha256(body.encode()).hexdigest() != fields.get("sha256"):
        raise ChecksumError("model file checksum mismatch (truncated or corrupted)")
    data = json.loads(body)
    return _CODECS[kind][2](data["model"]), data.get("meta", {})


def save_model(model, path, meta: dict | None = None) -> None:
    Path(path).write_text(dumps_model(model, meta), encoding="utf-8")


def load_model(path, expected_type: str | None = None):
    return loads_model(Path(path).read_text(encoding="utf-8"), expected_type)[0]


def load_model_with_meta(path, expected_type: str | None = None):
    return loads_model(Path(path).read_text(encoding="utf-8"), expected_type)
