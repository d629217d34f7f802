"""Shared encodings: strict JSON and headerless little-endian float32 blobs."""
import json
from pathlib import Path
from typing import Any, Dict, List, Tuple, Union

import numpy as np

from dqss.core.errors import BlobLengthError, DuplicateKeyError, ManifestValidationError, MissingBlobError

PathLike = Union[str, Path]


def _reject_duplicates(pairs: List[Tuple[str, Any]]) -> Dict[str, Any]:
    out: Dict[str, Any] = {}
    for key, value in pairs:
        if key in out:
            raise DuplicateKeyError(f"duplicate key {key!r}", {"key": key})
        out[key] = value
    return out


def read_json(path: PathLike) -> Any:
    path = Path(path)
    if not path.is_file():
        raise MissingBlobError(f"file not found: {path}", {"file": str(path)})
    try:
        return json.loads(path.read_text(encoding="utf-8"), object_pairs_hook=_reject_duplicates)
    except json.JSONDecodeError as exc:
        raise ManifestValidationError(f"{path.name}: invalid JSON at line {exc.lineno}: {exc.msg}")


def write_json(path: PathLike, payload: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def read_blob(path: PathLike, shape: List[int]) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise MissingBlobError(f"missing blob: {path.name}", {"file": str(path)})
    raw = path.read_bytes()
    expected = 4 * int(np.prod(shape, dtype=np.int64))
    if len(raw) != expected:
        raise BlobLengthError(
            f"blob {path.name} has {len(raw)} bytes, expected {expected} for shape {list(shape)}",
            {"file": str(path), "bytes": len(raw), "expected": expected},
        )
    return np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(shape)


def write_blob(path: PathLike, data: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(np.ascontiguousarray(data, dtype="<f4").tobytes())
    return path
