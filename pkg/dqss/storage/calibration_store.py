import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np

from dqss.core.errors import MalformedIndexError, MissingBlobError
from dqss.storage.codec import PathLike, read_blob, write_blob

INDEX_NAME = "index.csv"


@dataclass(frozen=True)
class CalibrationSet:
    inputs: np.ndarray
    labels: np.ndarray
    input_shape: Tuple[int, ...]

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def subset(self, limit: int) -> "CalibrationSet":
        return CalibrationSet(self.inputs[:limit], self.labels[:limit], self.input_shape)


def load_calibration(dir_path: PathLike, limit: int, input_shape: Sequence[int],
                     num_classes: Optional[int] = None) -> CalibrationSet:
    """
    Load the first `limit` (blob, label) rows of dir_path/index.csv.

    Rows are validated before any blob is read; a limit above the number of
    rows returns every row.

    Raises:
        MissingBlobError: index.csv or a referenced blob is absent.
        MalformedIndexError: bad header, column count, label or label range, with the row number.
        BlobLengthError: a blob does not hold product(input_shape) float32 values.
    """
    root = Path(dir_path)
    index = root / INDEX_NAME
    if not index.is_file():
        raise MissingBlobError(f"calibration index not found: {index}", {"file": str(index)})
    shape = tuple(int(d) for d in input_shape)

    rows = []
    with index.open(newline="", encoding="utf-8") as handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["blob", "label"]:
            raise MalformedIndexError(f"{INDEX_NAME} row 1: header must be 'blob,label'", {"row": 1})
        for row_number, row in enumerate(reader, start=2):
            if len(rows) >= limit:
                break
            if len(row) != 2 or not row[0].strip():
                raise MalformedIndexError(f"{INDEX_NAME} row {row_number}: expected 'blob,label'", {"row": row_number})
            try:
                label = int(row[1])
            except ValueError:
                raise MalformedIndexError(
                    f"{INDEX_NAME} row {row_number}: label {row[1]!r} is not an integer", {"row": row_number}
                )
            if label < 0 or (num_classes is not None and label >= num_classes):
                raise MalformedIndexError(
                    f"{INDEX_NAME} row {row_number}: label {label} outside [0, {num_classes})", {"row": row_number}
                )
            rows.append((row[0].strip(), label))

    inputs = np.zeros((len(rows),) + shape, dtype=np.float32)
    for i, (blob, _) in enumerate(rows):
        inputs[i] = read_blob(root / blob, list(shape))
    labels = np.array([label for _, label in rows], dtype=np.int64)
    return CalibrationSet(inputs=inputs, labels=labels, input_shape=shape)


def save_calibration(calib: CalibrationSet, dir_path: PathLike, prefix: str = "sample") -> Path:
    root = Path(dir_path)
    root.mkdir(parents=True, exist_ok=True)
    width = max(4, len(str(len(calib))))
    with (root / INDEX_NAME).open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["blob", "label"])
        for i in range(len(calib)):
            name = f"{prefix}_{i:0{width}d}.bin"
            write_blob(root / name, calib.inputs[i])
            writer.writerow([name, int(calib.labels[i])])
    return root / INDEX_NAME
