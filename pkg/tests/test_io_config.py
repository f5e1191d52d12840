"""Flat-file formats and JSON run configuration."""
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from simto import io
from simto.config import ConfigError, RunConfig, default_tree, valid_keys
from simto.fem import DensityField, GridSpec
from simto.topopt import OptimizationLog, IterationRecord


def field_from_rows(rows_bottom_first, h=1.0):
    img = np.asarray(rows_bottom_first, dtype=float)
    return DensityField(img.ravel(), GridSpec(img.shape[1], img.shape[0], h))


def test_design_csv_top_row_first(tmp_path):
    rho = field_from_rows([[0.0, 0.25, 0.5], [1.0, 0.75, 0.125]])
    path = tmp_path / "d.csv"
    io.write_design_csv(path, rho)
    assert path.read_text().splitlines() == ["1.000000,0.750000,0.125000", "0.000000,0.250000,0.500000"]
    back = io.read_design_csv(path, 2.5)
    np.testing.assert_array_equal(back.values, rho.values)
    assert back.grid == GridSpec(3, 2, 2.5)


@settings(max_examples=25)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_design_csv_round_trip_to_six_decimals(nx, ny, seed):
    import tempfile
    from pathlib import Path

    rho = DensityField(np.random.default_rng(seed).uniform(size=nx * ny), GridSpec(nx, ny))
    with tempfile.TemporaryDirectory() as d:
        p = Path(d) / "x.csv"
        io.write_design_csv(p, rho)
        np.testing.assert_allclose(io.read_design_csv(p).values, rho.values, atol=5e-7)


def test_empty_design_file(tmp_path):
    (tmp_path / "e.csv").write_text("\n")
    with pytest.raises(ValueError):
        io.read_design_csv(tmp_path / "e.csv")


def test_pgm_layout(tmp_path):
    rho = field_from_rows([[0.0, 1.0], [0.5, 1.0], [1.0, 1.0]])
    path = tmp_path / "d.pgm"
    io.write_pgm(path, rho)
    data = path.read_bytes()
    assert data.startswith(b"P5\n2 3\n255\n")
    img = io.read_pgm(path)
    np.testing.assert_array_equal(img, [[255, 255], [128, 255], [0, 255]])


def test_pgm_with_comment(tmp_path):
    path = tmp_path / "c.pgm"
    path.write_bytes(b"P5\n# made by hand\n2 1\n255\n" + bytes([7, 9]))
    np.testing.assert_array_equal(io.read_pgm(path), [[7, 9]])


def test_pgm_rejects_ascii(tmp_path):
    path = tmp_path / "a.pgm"
    path.write_bytes(b"P2\n1 1\n255\n0\n")
    with pytest.raises(ValueError):
        io.read_pgm(path)


def test_log_csv(tmp_path):
    log = OptimizationLog([IterationRecord(1, -0.5, 0.2, 0.3), IterationRecord(2, -0.6, 0.05, 0.3)])
    io.write_log_csv(tmp_path / "log.csv", log)
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "iter,objective,max_change,volume"
    assert lines[2] == "2,-0.6,0.05,0.3"


def test_json_helpers(tmp_path):
    payload = {"b": np.float64(1.5), "a": (np.int64(2), np.arange(2)), "c": GridSpec(2, 3)}
    io.dump_json(tmp_path / "x.json", payload)
    back = json.loads((tmp_path / "x.json").read_text())
    assert back["a"] == [2, [0, 1]] and back["c"] == {"nelx": 2, "nely": 3, "element_size": 1.0}
    assert io.config_hash(payload) == io.config_hash(dict(reversed(list(payload.items()))))
    assert len(io.config_hash(payload)) == 16
    assert io.file_hash(tmp_path / "x.json") == io.file_hash(tmp_path / "x.json")


# config

def test_defaults_build_every_section():
    cfg = RunConfig.load()
    cfg.validate()
    assert cfg.grid == GridSpec(60, 28, 2.5)
    assert cfg.domain.volume_fraction == 0.3
    assert cfg.sim.N_t == 400 and cfg.loop.epsilon == 10.0
    assert cfg.topopt.material.p == 3


def test_file_and_overrides(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"sim": {"E_g": 4.6e5}, "loop": {"pose_object": {"rotation": 5}}}))
    cfg = RunConfig.load(path, ["domain.nelx=30", "topopt.material.nu=0.25", "loop.check_feasibility=false",
                                "loop.pose_object.translation=[1, 2]"])
    assert cfg.sim.E_g == 4.6e5
    assert cfg.grid.nelx == 30
    assert cfg.topopt.material.nu == 0.25
    assert cfg.loop.check_feasibility is False
    assert cfg.loop.pose_object.rotation == 5.0 and cfg.loop.pose_object.translation == (1.0, 2.0)


@pytest.mark.parametrize("override", ["sim.nope=1", "nope.x=1", "sim=3", "domain.nelx=2.5", "sim.ground=maybe",
                                      "no-equals-sign"])
def test_bad_overrides(override):
    with pytest.raises(ConfigError):
        RunConfig.load(overrides=[override])


def test_unknown_key_lists_valid_keys():
    with pytest.raises(ConfigError, match="sim.E_g"):
        RunConfig.load(overrides=["sim.Eg=1"])


def test_invalid_json(tmp_path):
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(ConfigError):
        RunConfig.load(tmp_path / "bad.json")


def test_validate_catches_bad_values():
    cfg = RunConfig.load(overrides=["sim.N_t=3"])
    with pytest.raises(ConfigError):
        cfg.validate()


def test_copy_is_deep():
    a = RunConfig.load()
    b = a.copy()
    b.tree["sim"]["E_g"] = 1.0
    assert a.tree["sim"]["E_g"] != 1.0


def test_valid_keys_cover_tree():
    keys = valid_keys()
    assert "topopt.material.e_min" in keys and "domain.port_length" in keys
    assert len(keys) == len(set(keys))
    assert set(default_tree()) == {"domain", "sim", "topopt", "loop"}
