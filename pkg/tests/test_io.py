import json

import numpy as np
import pytest

from pcpomdp import envs, io, solver
from pcpomdp.model import Trajectory


def assert_same(a, b):
    assert len(a) == len(b)
    for x, y in zip(a, b):
        assert x.id == y.id
        np.testing.assert_array_equal(x.actions, y.actions)
        np.testing.assert_array_equal(x.observations, y.observations)  # NaN positions must agree too
        np.testing.assert_array_equal(x.rewards, y.rewards)
        np.testing.assert_array_equal(x.behavior_probs, y.behavior_probs)


def test_dataset_round_trip_is_bitwise(tmp_path):
    data = envs.generate_tiger_dataset(envs.TigerSpec("missing_data"), 50, seed=3)
    path = io.write_dataset(tmp_path / "d.jsonl", data, n_actions=3)
    header, back = io.read_dataset(path)
    assert header["n_actions"] == 3 and header["n_dims"] == 2 and header["version"] == io.FORMAT_VERSION
    assert_same(data, back)
    assert "NaN" not in path.read_text()


def test_empty_dataset_is_header_only(tmp_path):
    path = io.write_dataset(tmp_path / "e.jsonl", [], n_actions=3, n_dims=2)
    assert len(path.read_text().splitlines()) == 1
    header, back = io.read_dataset(path)
    assert back == [] and header["n_dims"] == 2


def test_irrelevant_noise_thousand_records(tmp_path):
    data = envs.generate_tiger_dataset(envs.TigerSpec(), 1000, seed=0)
    path = io.write_dataset(tmp_path / "d.jsonl", data, n_actions=3)
    lines = path.read_text().splitlines()
    assert len(lines) == 1001
    for ln in lines[1:]:
        rec = json.loads(ln)
        assert set(rec) == {"id", "actions", "observations", "rewards", "behavior_probs"}


def test_bad_files(tmp_path):
    p = tmp_path / "x.jsonl"
    p.write_text("")
    with pytest.raises(io.FormatError):
        io.read_dataset(p)
    p.write_text(json.dumps({"format": "other"}) + "\n")
    with pytest.raises(io.FormatError):
        io.read_dataset(p)
    head = io.dataset_header(3, 1, 0.9)
    p.write_text(json.dumps(head) + "\n" + json.dumps({"actions": [0, 1], "observations": [0.1],
                                                       "rewards": [0, 0]}) + "\n")
    with pytest.raises(io.FormatError):
        io.read_dataset(p)


def test_checkpoint_round_trip_is_byte_identical(tmp_path):
    p = envs.manual_tiger_solution(envs.TigerSpec())
    vf = solver.solve_hard(p, k_obs=20, max_backups=20, n_expansions=1)
    a = io.write_checkpoint(tmp_path / "a.json", p, vf, note="x", score=float("nan"))
    p2, vf2, meta = io.read_checkpoint(a)
    b = io.write_checkpoint(tmp_path / "b.json", p2, vf2, **meta)
    assert a.read_bytes() == b.read_bytes()
    np.testing.assert_array_equal(p2.tau, p.tau)
    np.testing.assert_array_equal(vf2.alphas, vf.alphas)
    json.loads(a.read_text())  # strict JSON even with a NaN in meta


def test_checkpoint_without_value_function(tmp_path):
    p = envs.manual_tiger_solution(envs.TigerSpec())
    _, vf, _ = io.read_checkpoint(io.write_checkpoint(tmp_path / "c.json", p))
    assert vf is None


def test_csv_floats_round_trip(tmp_path):
    rows = [{"a": 0.1 + 0.2, "b": "x"}, {"a": 1e-300}]
    path = io.write_csv(tmp_path / "t.csv", rows, ("a", "b"))
    lines = path.read_text().splitlines()
    assert lines[0] == "a,b"
    assert float(lines[1].split(",")[0]) == 0.1 + 0.2
    assert lines[2] == "1e-300,"


def test_trajectory_without_behavior(tmp_path):
    tr = Trajectory([0, 1], [[0.5], [np.nan]], [0.0, 1.0], id="t")
    _, back = io.read_dataset(io.write_dataset(tmp_path / "d.jsonl", [tr], n_actions=2))
    assert_same([tr], back)
