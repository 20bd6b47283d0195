import json

import numpy as np
import pytest

from effowt.checkpoint import CheckpointError, load_checkpoint, namespace, save_checkpoint


def test_round_trip_and_manifest(tmp_path, rng):
    state = {"b.w": rng.standard_normal((3, 2)), "a": rng.standard_normal(4), "s": np.array(2.5)}
    bin_path, json_path = save_checkpoint(state, tmp_path / "m")
    back = load_checkpoint(tmp_path / "m")
    assert set(back) == set(state)
    for k in state:
        np.testing.assert_array_equal(back[k], state[k])
    man = json.loads(json_path.read_text())
    assert man["tensors"]["a"] == {"shape": [4], "offset": 0}
    assert man["tensors"]["b.w"]["offset"] == 32
    assert man["total_bytes"] == bin_path.stat().st_size == 8 * 11
    assert not list(tmp_path.glob("*.tmp"))


def test_truncated_blob_rejected(tmp_path):
    bin_path, _ = save_checkpoint({"a": np.ones(4)}, tmp_path / "m")
    bin_path.write_bytes(bin_path.read_bytes()[:-8])
    with pytest.raises(CheckpointError, match="bytes"):
        load_checkpoint(tmp_path / "m")


def test_wrong_format_rejected(tmp_path):
    _, json_path = save_checkpoint({"a": np.ones(1)}, tmp_path / "m")
    man = json.loads(json_path.read_text())
    man["format"] = "other"
    json_path.write_text(json.dumps(man))
    with pytest.raises(CheckpointError, match="format"):
        load_checkpoint(tmp_path / "m")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing")


def test_namespace_filter():
    s = {"side.a": 1, "sidecar.b": 2, "head.c": 3}
    assert namespace(s, "side") == {"side.a": 1}
