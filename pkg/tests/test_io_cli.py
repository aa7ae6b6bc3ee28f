import os
import struct

import numpy as np
import pytest

from maternglm import io
from maternglm.cli import main


def _vol(shape=(4, 5, 3), seed=0, dtype=np.float32):
    data = np.random.default_rng(seed).standard_normal(shape).astype(dtype)
    return io.Volume(data, (3.0, 3.0, 2.5), (-10.0, 4.0, 7.5))


@pytest.mark.parametrize("ext", [".nii", ".vol"])
def test_float32_round_trip_is_bitwise(tmp_path, ext):
    for shape in ((4, 5, 3), (4, 5, 3, 7)):
        v = _vol(shape)
        p = tmp_path / f"v{len(shape)}{ext}"
        io.write_volume(p, v)
        r = io.read_volume(p)
        assert r.data.dtype == np.float32
        assert r.data.tobytes() == v.data.tobytes()
        assert r.voxel_size == v.voxel_size
        assert r.origin == v.origin


def test_int16_and_float64_payloads(tmp_path):
    for dt in (np.int16, np.float64):
        v = io.Volume((np.arange(60).reshape(3, 4, 5) - 30).astype(dt))
        io.write_volume(tmp_path / "a.nii", v, dtype=dt)
        r = io.read_volume(tmp_path / "a.nii")
        assert r.data.dtype == np.dtype(dt)
        assert np.array_equal(r.data, v.data)


def test_big_endian_header_is_read(tmp_path):
    v = _vol()
    io.write_volume(tmp_path / "le.nii", v)
    raw = bytearray((tmp_path / "le.nii").read_bytes())
    # byte-swap the fields the reader uses
    for off, fmt in ((0, "i"), (40, "8h"), (70, "h"), (72, "h"), (76, "8f"), (108, "f"), (112, "2f"),
                     (252, "h"), (254, "h"), (268, "3f"), (280, "12f")):
        vals = struct.unpack_from("<" + fmt, raw, off)
        struct.pack_into(">" + fmt, raw, off, *vals)
    payload = np.frombuffer(bytes(raw[352:]), "<f4").astype(">f4").tobytes()
    (tmp_path / "be.nii").write_bytes(bytes(raw[:352]) + payload)
    r = io.read_volume(tmp_path / "be.nii")
    assert np.array_equal(r.data, v.data)
    assert r.voxel_size == v.voxel_size


def test_header_errors_name_the_field(tmp_path):
    v = _vol()
    io.write_volume(tmp_path / "a.nii", v)
    raw = bytearray((tmp_path / "a.nii").read_bytes())
    bad = bytearray(raw)
    bad[344:348] = b"ni1\x00"
    (tmp_path / "magic.nii").write_bytes(bad)
    with pytest.raises(io.VolumeError, match="magic"):
        io.read_volume(tmp_path / "magic.nii")
    bad = bytearray(raw)
    struct.pack_into("<h", bad, 70, 2)  # uint8
    (tmp_path / "dtype.nii").write_bytes(bad)
    with pytest.raises(io.VolumeError, match="datatype"):
        io.read_volume(tmp_path / "dtype.nii")
    (tmp_path / "gz.nii").write_bytes(b"\x1f\x8b" + bytes(400))
    with pytest.raises(io.VolumeError, match="compressed"):
        io.read_volume(tmp_path / "gz.nii")
    with pytest.raises(io.VolumeError, match="compressed"):
        io.write_volume(tmp_path / "x.nii.gz", v)
    (tmp_path / "short.nii").write_bytes(bytes(raw[:400]))
    with pytest.raises(io.VolumeError, match="payload"):
        io.read_volume(tmp_path / "short.nii")


def test_four_d_series_loads_under_mask(tmp_path):
    from maternglm.lattice import ball_mask, build_lattice

    mask = ball_mask((6, 6, 6))
    lat = build_lattice(mask)
    series = np.random.default_rng(1).standard_normal((lat.N, 100)).astype(np.float32)
    io.write_volume(tmp_path / "bold.nii", io.Volume(lat.to_volume(series)))
    Y = lat.from_volume(io.read_volume(tmp_path / "bold.nii").data).T
    assert Y.shape == (100, lat.N)
    assert np.array_equal(Y, series.T)


def test_design_header_detection_and_ragged_rows(tmp_path):
    X = np.random.default_rng(2).standard_normal((20, 15))
    io.write_design(tmp_path / "d.csv", X, header=[f"c{i}" for i in range(15)])
    assert np.array_equal(io.read_design(tmp_path / "d.csv"), X)
    io.write_design(tmp_path / "n.csv", X)
    assert io.read_design(tmp_path / "n.csv").shape == (20, 15)
    (tmp_path / "r.csv").write_text("1,2,3\n4,5\n")
    with pytest.raises(io.VolumeError, match="row 2"):
        io.read_design(tmp_path / "r.csv")


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

_GOOD = """
seed = 4
[data]
bold = "b.nii"
mask = "m.nii"
design = "d.csv"
[model]
activity = [1, 2]
priors = ["M2", "ICAR1"]
[optimizer]
n_iter = 10
eta0 = 1
"""


def test_config_parse_and_round_trip():
    cfg = io.parse_config(_GOOD)
    assert cfg.seed == 4
    assert cfg.section("optimizer")["eta0"] == 1.0
    assert cfg.section("model")["ar_order"] == 1  # default filled in
    again = io.parse_config(io.dump_config(cfg))
    assert again.raw == cfg.raw


@pytest.mark.parametrize("text,key", [
    ("bogus = 1", "bogus"),
    ("[model]\nfoo = 1", "model.foo"),
    ("[model]\nar_order = 'x'", "model.ar_order"),
    ("[model]\nactivity = [0]", "model.activity"),
    ("[model]\npriors = ['M3']", "model.priors[0]"),
    ("[optimizer]\ntrace = 'other'", "optimizer.trace"),
    ("[cv]\nleave_out = 1.5", "cv.leave_out"),
    ("[hyperprior]\nrho0 = -1.0", "hyperprior.rho0"),
    ("[model\n", "<file>"),
])
def test_config_errors_name_the_key(text, key):
    with pytest.raises(io.ConfigError) as exc:
        io.parse_config(text)
    assert exc.value.key == key


# ---------------------------------------------------------------------------
# command line
# ---------------------------------------------------------------------------

_RUN = """
seed = 2
[data]
bold = "bold.nii"
mask = "mask.nii"
design = "design.csv"
output = "."
[model]
activity = [1]
priors = ["M2"]
[optimizer]
n_iter = 6
n_probes = 8
[ppm]
n_rbmc = 10
[cv]
n_splits = 1
n_rbmc = 5
[simulate]
dims = [6, 6, 6]
T = 30
"""


@pytest.fixture(scope="module")
def simulated(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "run.toml"
    cfg.write_text(_RUN)
    assert main(["simulate", "--config", str(cfg)]) == 0
    return root, cfg


def test_simulate_fit_ppm_workflow(simulated):
    root, cfg = simulated
    assert main(["fit", "--config", str(cfg)]) == 0
    assert main(["ppm", "--config", str(cfg)]) == 0
    mask = io.read_volume(root / "mask.nii")
    for name in ("mean_beta1.nii", "mean_beta2.nii", "ppm.nii", "noise_lambda.nii", "noise_a1.nii"):
        vol = io.read_volume(root / name)
        assert vol.dims == mask.dims
        assert vol.voxel_size == mask.voxel_size
        assert vol.origin == mask.origin
    ppm = io.read_volume(root / "ppm.nii").data
    assert ppm.dtype == np.float32
    assert 0 <= ppm.min() and ppm.max() <= 1
    rows = (root / "hyperparameters.csv").read_text().splitlines()
    assert rows[0].startswith("regressor,kind")
    assert (root / "diagnostics.csv").read_text().startswith("iteration,coordinate,value,gradient,step")


def test_cv_and_sample_prior(simulated, tmp_path):
    root, cfg = simulated
    if not (root / "fit.npz").exists():
        assert main(["fit", "--config", str(cfg)]) == 0
    assert main(["cv", "--config", str(cfg)]) == 0
    lines = (root / "cv_scores.csv").read_text().splitlines()
    assert lines[0] == "split,prior,MAE,RMSE,CRPS,IGN,INT"
    assert main(["sample-prior", "--kind", "ICAR2", "--dims", "5", "5", "5", "--n", "2", "--out",
                 str(tmp_path)]) == 0
    assert sorted(os.listdir(tmp_path)) == ["sample_ICAR2_1.nii", "sample_ICAR2_2.nii"]


def test_missing_mask_exits_2(simulated, tmp_path, capsys):
    root, _ = simulated
    cfg = tmp_path / "bad.toml"
    cfg.write_text(_RUN.replace('mask = "mask.nii"', f'mask = "{root}/absent.nii"'))
    assert main(["fit", "--config", str(cfg)]) == 2
    assert "data.mask" in capsys.readouterr().err


def test_invalid_config_exits_2_with_key(tmp_path, capsys):
    cfg = tmp_path / "bad.toml"
    cfg.write_text("[optimizer]\nn_iter = 'many'\n")
    assert main(["fit", "--config", str(cfg)]) == 2
    assert "optimizer.n_iter" in capsys.readouterr().err


def test_same_seed_same_bytes(tmp_path):
    outs = []
    for d in ("a", "b"):
        root = tmp_path / d
        root.mkdir()
        assert main(["sample-prior", "--kind", "M2", "--dims", "8", "8", "8", "--n", "2", "--seed", "9",
                     "--out", str(root)]) == 0
        outs.append({f: (root / f).read_bytes() for f in os.listdir(root)})
    assert outs[0] == outs[1]
    root = tmp_path / "c"
    root.mkdir()
    main(["sample-prior", "--kind", "M2", "--dims", "8", "8", "8", "--n", "2", "--seed", "10", "--out", str(root)])
    assert (root / "sample_M2_1.nii").read_bytes() != outs[0]["sample_M2_1.nii"]
