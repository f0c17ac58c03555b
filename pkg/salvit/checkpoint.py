"""Checkpoint files: a text manifest followed by little-endian float32 payloads in manifest order.

    SALVIT-CHECKPOINT 1
    meta {"gelu": "erf", "model": {...}, "run_hash": "..."}
    entry enc.backbone.c0_w 32,3,4,4 float32
    ...
    end
"""
from __future__ import annotations
import json
import logging
from pathlib import Path
from typing import Any, Mapping, Optional

import numpy as np

from .errors import DimensionError, ParameterError
from .fskd import KeypointDetector, ModelConfig
from .numcore import EXPORT_DTYPE, GELU_FORM
from .utils import atomic_write, backup_file

logger = logging.getLogger(__name__)

MAGIC = "SALVIT-CHECKPOINT 1"


def _shape_text(shape: tuple[int, ...]) -> str:
    return ",".join(str(s) for s in shape) if shape else "scalar"


def _parse_shape(text: str) -> tuple[int, ...]:
    return () if text == "scalar" else tuple(int(s) for s in text.split(","))


def encode_checkpoint(params: Mapping[str, np.ndarray], meta: Mapping[str, Any]) -> bytes:
    names = sorted(params)
    lines = [MAGIC, "meta " + json.dumps({"gelu": GELU_FORM, **meta}, sort_keys=True, default=str)]
    for name in names:
        if any(ch.isspace() for ch in name):
            raise ParameterError(f"parameter name {name!r} contains whitespace")
        lines.append(f"entry {name} {_shape_text(np.shape(params[name]))} float32")
    lines.append("end")
    payload = b"".join(np.ascontiguousarray(params[n], dtype=EXPORT_DTYPE).tobytes() for n in names)
    return ("\n".join(lines) + "\n").encode("utf-8") + payload


def decode_checkpoint(blob: bytes) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    entries: list[tuple[str, tuple[int, ...]]] = []
    meta: dict[str, Any] = {}
    pos = 0
    first = True
    while True:
        nl = blob.find(b"\n", pos)
        if nl < 0:
            raise ParameterError("checkpoint manifest is not terminated by `end`")
        line = blob[pos:nl].decode("utf-8")
        pos = nl + 1
        if first:
            if line != MAGIC:
                raise ParameterError("not a salvit checkpoint")
            first = False
            continue
        if line == "end":
            break
        kind, _, rest = line.partition(" ")
        if kind == "meta":
            meta = json.loads(rest)
        elif kind == "entry":
            name, shape, dtype = rest.split(" ")
            if dtype != "float32":
                raise ParameterError(f"unsupported dtype {dtype} for {name}")
            entries.append((name, _parse_shape(shape)))
        else:
            raise ParameterError(f"unknown manifest line: {line!r}")
    params: dict[str, np.ndarray] = {}
    for name, shape in entries:
        size = int(np.prod(shape)) * EXPORT_DTYPE.itemsize
        if pos + size > len(blob):
            raise DimensionError(f"checkpoint payload truncated at {name}")
        params[name] = np.frombuffer(blob, dtype=EXPORT_DTYPE, count=int(np.prod(shape)), offset=pos) \
            .astype(np.float64).reshape(shape)
        pos += size
    if pos != len(blob):
        raise DimensionError(f"{len(blob) - pos} trailing bytes after the last entry")
    return params, meta


def save_checkpoint(path: Path, params: Mapping[str, np.ndarray], meta: Mapping[str, Any],
                    backup_dir: Optional[Path] = None) -> Path:
    path = Path(path)
    if path.exists() and backup_dir is not None:
        logger.info("backed up previous checkpoint to %s", backup_file(Path(backup_dir), path))
    atomic_write(path, encode_checkpoint(params, meta))
    return path


def load_checkpoint(path: Path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    params, meta = decode_checkpoint(Path(path).read_bytes())
    if meta.get("gelu", GELU_FORM) != GELU_FORM:
        logger.warning("checkpoint was trained with %s GELU; this build uses %s", meta["gelu"], GELU_FORM)
    return params, meta


def load_detector(path: Path) -> KeypointDetector:
    params, meta = load_checkpoint(path)
    if "model" not in meta:
        raise ParameterError(f"{path} carries no model configuration")
    cfg = ModelConfig.model_validate(meta["model"])
    return KeypointDetector(cfg, {k: v for k, v in params.items() if k.startswith(("enc.", "head."))})
