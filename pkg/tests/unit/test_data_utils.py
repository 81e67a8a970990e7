import numpy as np
import pandas as pd
import pytest
import torch

from src.utils.data_utils import (
    canonical_json,
    collect_partials,
    config_hash,
    partial_path,
    read_json,
    write_json,
    write_table,
)


def test_config_hash_ignores_key_order():
    a = {"seed": 0, "mixture": {"side": 5, "sigma": 0.02}}
    b = {"mixture": {"sigma": 0.02, "side": 5}, "seed": 0}
    assert canonical_json(a) == canonical_json(b)
    assert config_hash(a) == config_hash(b)
    assert len(config_hash(a)) == 64
    assert config_hash(a) != config_hash(dict(a, seed=1))


def test_json_handles_numpy_and_torch(tmp_path):
    record = {"n": np.int64(3), "x": np.float64(0.5), "v": torch.tensor([1.0, 2.0]), "pair": (1, 2)}
    path = write_json(tmp_path / "nested" / "record.json", record)
    assert read_json(path) == {"n": 3, "x": 0.5, "v": [1.0, 2.0], "pair": [1, 2]}
    with pytest.raises(TypeError):
        canonical_json({"bad": object()})


def test_write_table_keeps_full_precision(tmp_path):
    value = 0.1 + 0.2
    path = write_table(tmp_path / "t.csv", [{"a": value, "b": 1}])
    back = pd.read_csv(path, float_precision="round_trip")
    assert back["a"][0] == value
    assert list(back.columns) == ["a", "b"]


def test_collect_partials_in_block_order(tmp_path):
    for block in (2, 0, 1):
        write_table(partial_path(tmp_path, "rows", block), [{"block": block, "key": 10 - block}])
    write_table(partial_path(tmp_path, "rows", 3), pd.DataFrame(columns=["block", "key"]))

    frame = collect_partials(tmp_path, "rows")
    assert list(frame["block"]) == [0, 1, 2]
    assert list(collect_partials(tmp_path, "rows", sort_by=["key"])["key"]) == [8, 9, 10]
    assert collect_partials(tmp_path, "missing").empty


def test_partial_path_layout(tmp_path):
    assert partial_path(tmp_path, "summary", 12) == tmp_path / "partials" / "summary" / "block_000012.csv"
