import csv
import hashlib
import json
import logging
import os
from pathlib import Path
from typing import Any, Iterable, List, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel

from .maps import Dataset, External

# Configure structured logging
logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def doc_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def config_hash(config: Any) -> str:
    """Short stable hash of a config model or JSON-able value."""
    if isinstance(config, BaseModel):
        payload = config.model_dump(mode="json")
    else:
        payload = config
    return doc_hash(json.dumps(payload, sort_keys=True, separators=(",", ":")))[:16]


def provenance_line(cfg_hash: str, seed: int) -> str:
    return f"# mapid config_hash={cfg_hash} seed={int(seed)}"


def _cell(v: Any) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.17g}"
    return str(v)


def write_csv(
    path: PathLike, header: Sequence[str], rows: Iterable[Sequence[Any]], provenance: str = ""
) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        if provenance:
            f.write(provenance + "\n")
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_cell(v) for v in row])
    logger.debug(f"Wrote {path}")


def read_csv(path: PathLike) -> Tuple[List[str], List[List[str]]]:
    with open(path, "r", encoding="utf-8", newline="") as f:
        lines = [ln for ln in f if ln.strip() and not ln.startswith("#")]
    reader = csv.reader(lines)
    header = next(reader, None)
    if header is None:
        raise ValueError(f"{path} has no header row")
    return [h.strip() for h in header], [row for row in reader]


def write_trajectory_csv(path: PathLike, traj: np.ndarray, provenance: str = "") -> None:
    traj = np.asarray(traj, dtype=float)
    header = ["t"] + [f"x{j}" for j in range(traj.shape[1])]
    write_csv(path, header, ([t, *row] for t, row in enumerate(traj)), provenance)


def write_dataset_csv(path: PathLike, ds: Dataset, provenance: str = "") -> None:
    n = ds.dim
    header = [f"x{j}_in" for j in range(n)] + [f"x{j}_out" for j in range(n)] + ["fold"]
    rows = (
        [*ds.inputs[m], *ds.targets[m], int(ds.fold_ids[m])] for m in range(ds.M)
    )
    write_csv(path, header, rows, provenance)


def read_dataset(path: PathLike) -> Dataset:
    """
    Load a dataset from a trajectory CSV (consecutive pairs) or a pair CSV.

    The loaded values are taken as-is; their noise level is unknown to the reader.
    """
    header, rows = read_csv(path)
    values = np.array([[float(c) for c in row] for row in rows])
    source = os.fspath(path)
    if not len(values):
        raise ValueError(f"{path} contains no data rows")
    if header[0] == "t":
        states = values[:, 1:]
        if states.shape[0] < 2:
            raise ValueError(f"{path} needs at least two states")
        return Dataset(inputs=states[:-1], targets=states[1:], sampling=External(source=source))
    if header[-1] != "fold" or (len(header) - 1) % 2:
        raise ValueError(f"{path}: unrecognized header {header}")
    n = (len(header) - 1) // 2
    fold_ids = values[:, -1].astype(np.int64)
    folds = int(fold_ids.max()) + 1
    return Dataset(
        inputs=values[:, :n],
        targets=values[:, n : 2 * n],
        sampling=External(source=source),
        fold_ids=fold_ids,
        folds=folds,
    )


def write_json(path: PathLike, model: BaseModel) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(model.model_dump_json(indent=2) + "\n", encoding="utf-8")
    logger.debug(f"Wrote {path}")


def write_text(path: PathLike, text: str) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(text, encoding="utf-8")
