import numpy as np
import pytest

from lightweight.io import (SCHEMA, ConfigError, load_config, parse_predicate, read_density, write_density,
                            write_vtk)


def test_density_roundtrip(tmp_path, unit_cube):
    rho = np.random.default_rng(0).random(unit_cube.n_elements)
    path = write_density(tmp_path / "d.txt", rho, unit_cube)
    assert np.array_equal(read_density(path, unit_cube), rho)      # %.17g is exact


def test_density_rejects_other_mesh(tmp_path, unit_cube, cube6):
    path = write_density(tmp_path / "d.txt", np.ones(unit_cube.n_elements), unit_cube)
    with pytest.raises(ValueError, match="mesh"):
        read_density(path, cube6)
    with pytest.raises(ValueError):
        write_density(tmp_path / "e.txt", np.ones(3), unit_cube)
    bad = tmp_path / "bad.txt"
    bad.write_text("0.5\n")
    with pytest.raises(ValueError, match=":1:"):
        read_density(bad, unit_cube)


def test_vtk_layout(tmp_path, cube6):
    path = write_vtk(tmp_path / "m.vtk", cube6, {"rho": np.ones(cube6.n_elements)}, {"c": {0: 2.0}})
    lines = path.read_text().splitlines()
    assert lines[0] == "# vtk DataFile Version 3.0"
    assert f"POINTS {cube6.n_nodes} double" in lines
    assert f"CELLS {cube6.n_elements} {5 * cube6.n_elements}" in lines
    i = lines.index(f"CELL_TYPES {cube6.n_elements}")
    assert set(lines[i + 1:i + 1 + cube6.n_elements]) == {"10"}
    j = lines.index(f"POINT_DATA {cube6.n_nodes}")
    assert lines[j + 3] == "2" and lines[j + 4] == "0"
    with pytest.raises(ValueError):
        write_vtk(tmp_path / "x.vtk", cube6, {"rho": np.ones(2)})


def test_predicates():
    f = parse_predicate("z < 0.01 and x > 2 or x >= 20")
    x = np.array([3.0, 3.0, 20.0, 1.0])
    z = np.array([0.0, 1.0, 5.0, 0.0])
    assert f(x, x * 0, z).tolist() == [True, False, True, False]
    assert parse_predicate("y > -inf")(x, x, x).all()
    for bad in ["x << 2", "w > 1", "x > 1 and", "(x > 1)"]:
        with pytest.raises(ConfigError):
            parse_predicate(bad)


def test_defaults_and_overrides(tmp_path):
    cfg = load_config(None, ["mesh.model=cantilever", "optimizer.max_iters=7", "load.patch_radius=auto"])
    assert cfg.get("optimizer", "max_iters") == 7 and cfg.get("load", "patch_radius") is None
    assert cfg.get("reduction", "k") == 15 and cfg.get("weak_regions", "modes") == 15
    assert cfg.get("surrogate", "sample_fraction") == 0.05 and cfg.get("surrogate", "fr_fraction") == 0.10
    assert cfg.get("material", "simp_exponent") == 3.0 and cfg.get("material", "void_fraction") == 1e-8


def test_config_echo_roundtrips(tmp_path):
    cfg = load_config(None, ["mesh.model=bracket", "regions.fixed_nodes=1 2 3", "surrogate.q=4"])
    p = tmp_path / "echo.ini"
    p.write_text(cfg.as_text())
    again = load_config(p)
    assert again.values == cfg.values
    assert again.path("sub/x.txt") == tmp_path / "sub/x.txt"


@pytest.mark.parametrize("text, match", [
    ("[mesh]\nmodel = cantilever\n[bogus]\na = 1\n", "unknown section"),
    ("[mesh]\nmodel = cantilever\nfoo = 1\n", "unknown key"),
    ("[mesh]\nmodel = cantilever\n[optimizer]\nmax_iters = many\n", "bad value"),
    ("[mesh]\nmodel = cantilever\n[material]\nyoungs_modulus = -1\n", "positive"),
    ("[mesh]\nmodel = cantilever\n[surrogate]\nfr_fraction = 1.5\n", r"\(0, 1\]"),
    ("[mesh]\nmodel = cantilever\n[material]\npoisson_ratio = 0.5\n", "poisson"),
    ("[mesh]\nmodel = cantilever\n[load]\nforce_budget = -2\n", "non-negative"),
    ("[mesh]\nmodel = cantilever\n[weak_regions]\nmass_floor = 2\n", "mass_floor"),
    ("[material]\nyield_strength = 3\n", r"\[mesh\]"),
    ("[mesh\nmodel = x\n", "echo|mesh"),
])
def test_config_errors(tmp_path, text, match):
    p = tmp_path / "echo.ini"
    p.write_text(text)
    with pytest.raises(ConfigError, match=match):
        load_config(p)


def test_bad_override():
    with pytest.raises(ConfigError, match="section.key=value"):
        load_config(None, ["max_iters=3"])


def test_schema_covers_optimizer_defaults():
    from lightweight.optimizer import OptimizerConfig
    d = OptimizerConfig()
    for key, (_, default) in SCHEMA["optimizer"].items():
        assert getattr(d, key) == default, key
