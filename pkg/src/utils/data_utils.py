import hashlib
import json
import pathlib
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np
import pandas as pd
import torch

FLOAT_FORMAT = "%.17g"


def canonical_json(record) -> str:
    return json.dumps(record, sort_keys=True, separators=(",", ":"), default=_to_builtin)


def _to_builtin(value):
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return float(value)
    if isinstance(value, (np.ndarray, torch.Tensor)):
        return value.tolist()
    if isinstance(value, tuple):
        return list(value)
    raise TypeError(f"cannot serialise {type(value).__name__}")


def config_hash(record) -> str:
    """sha256 of the canonical JSON form of a resolved config."""
    return hashlib.sha256(canonical_json(record).encode("utf-8")).hexdigest()


def write_json(path, record) -> pathlib.Path:
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(record, indent=2, sort_keys=True, default=_to_builtin) + "\n")
    return path


def read_json(path) -> Dict:
    return json.loads(pathlib.Path(path).read_text())


def write_table(path, rows, columns: Optional[List[str]] = None) -> pathlib.Path:
    """CSV with full float precision so reruns compare byte for byte."""
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = rows if isinstance(rows, pd.DataFrame) else pd.DataFrame(list(rows), columns=columns)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    return path


def partial_path(out_dir, table: str, block: int) -> pathlib.Path:
    return pathlib.Path(out_dir, "partials", table, f"block_{block:06d}.csv")


def collect_partials(out_dir, table: str, sort_by: Optional[Iterable[str]] = None) -> pd.DataFrame:
    """Concatenates every partial block of ``table`` in block order."""
    files = sorted(pathlib.Path(out_dir, "partials", table).glob("block_*.csv"))
    frames = [pd.read_csv(f, float_precision="round_trip") for f in files]
    frames = [f for f in frames if not f.empty]
    if not frames:
        return pd.DataFrame()
    frame = pd.concat(frames, ignore_index=True)
    if sort_by:
        frame = frame.sort_values(list(sort_by), kind="mergesort").reset_index(drop=True)
    return frame


def dump_trajectories(path, batch, block_size: int, config: Dict) -> pathlib.Path:
    """Trajectory CSV (traj_id, step_index, t, x_0..) with a JSON sidecar."""
    states = batch.states.numpy()
    n_times, n_traj, dim = states.shape
    frame = pd.DataFrame(
        {
            "traj_id": np.repeat(batch.traj_ids, n_times),
            "step_index": np.tile(np.arange(n_times), n_traj),
            "t": np.tile(np.asarray(batch.times), n_traj),
        }
    )
    flat = states.transpose(1, 0, 2).reshape(-1, dim)
    for d in range(dim):
        frame[f"x_{d}"] = flat[:, d]
    path = write_table(path, frame)
    write_json(
        path.with_suffix(".json"),
        {"config": config, "seed": batch.seed, "traj_ids": batch.traj_ids, "block_size": block_size},
    )
    return path


def save_flat_checkpoint(module: torch.nn.Module, stem, header: Dict) -> Tuple[pathlib.Path, pathlib.Path]:
    """Writes ``<stem>.bin`` (little-endian float64 parameters in state_dict order) and ``<stem>.json``."""
    stem = pathlib.Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    state = module.state_dict()
    shapes = [[name, list(tensor.shape)] for name, tensor in state.items()]
    flat = [tensor.detach().cpu().double().reshape(-1).numpy() for tensor in state.values()]
    values = np.concatenate(flat) if flat else np.empty(0)
    bin_path = stem.with_suffix(".bin")
    values.astype("<f8").tofile(bin_path)
    json_path = write_json(stem.with_suffix(".json"), dict(header, parameters=shapes, n_values=int(values.size)))
    return bin_path, json_path


def load_flat_checkpoint(stem) -> Tuple[Dict[str, torch.Tensor], Dict]:
    stem = pathlib.Path(stem)
    header = read_json(stem.with_suffix(".json"))
    values = np.fromfile(stem.with_suffix(".bin"), dtype="<f8")
    if values.size != header["n_values"]:
        raise ValueError(f"checkpoint {stem} holds {values.size} values, header expects {header['n_values']}")
    state, offset = {}, 0
    for name, shape in header["parameters"]:
        size = int(np.prod(shape)) if shape else 1
        state[name] = torch.from_numpy(values[offset : offset + size].copy()).reshape(shape)
        offset += size
    return state, header
