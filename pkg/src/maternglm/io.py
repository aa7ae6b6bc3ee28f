"""Volume files, design matrices and run configuration.

Volumes are read from single-file uncompressed NIfTI-1 (``.nii``) or a small
raw format (``.vol``): ASCII header lines

    MATERNGLM-RAW 1
    dims nx ny nz [T]
    voxel_size dx dy dz
    origin ox oy oz
    END

followed by little-endian float32 values with x varying fastest.
"""

from dataclasses import dataclass, field
import csv
import os
import struct

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
import tomli_w


class VolumeError(ValueError):
    pass


class ConfigError(ValueError):
    """Invalid run configuration; ``key`` names the offending entry."""

    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass
class Volume:
    data: np.ndarray                       # (nx, ny, nz) or (nx, ny, nz, T)
    voxel_size: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)

    @property
    def dims(self):
        return tuple(self.data.shape[:3])

    def like(self, data):
        """A volume with the same geometry and new data."""
        return Volume(np.asarray(data), self.voxel_size, self.origin)


# ---------------------------------------------------------------------------
# NIfTI-1
# ---------------------------------------------------------------------------

_NIFTI_DTYPES = {4: ("i2", 16), 16: ("f4", 32), 64: ("f8", 64)}
_HDR_SIZE = 348
_VOX_OFFSET = 352


def _read_nifti(raw):
    if len(raw) < _HDR_SIZE:
        raise VolumeError("file too short for a NIfTI-1 header")
    if raw[:2] == b"\x1f\x8b":
        raise VolumeError("compressed NIfTI is not supported")
    if struct.unpack("<i", raw[:4])[0] == _HDR_SIZE:
        end = "<"
    elif struct.unpack(">i", raw[:4])[0] == _HDR_SIZE:
        end = ">"
    else:
        raise VolumeError("sizeof_hdr is not 348")
    magic = raw[344:348]
    if magic != b"n+1\x00":
        raise VolumeError(f"magic {magic!r} is not a single-file NIfTI-1 ('n+1')")
    dim = struct.unpack(end + "8h", raw[40:56])
    ndim = dim[0]
    if ndim not in (3, 4):
        raise VolumeError(f"dim[0]={ndim}: only 3D and 4D volumes are supported")
    shape = tuple(int(d) for d in dim[1:1 + ndim])
    if ndim == 4 and shape[3] == 1:
        shape = shape[:3]
    datatype = struct.unpack(end + "h", raw[70:72])[0]
    if datatype not in _NIFTI_DTYPES:
        raise VolumeError(f"datatype {datatype} is not supported (int16, float32, float64)")
    code, _ = _NIFTI_DTYPES[datatype]
    pixdim = struct.unpack(end + "8f", raw[76:108])
    vox_offset = int(struct.unpack(end + "f", raw[108:112])[0])
    slope, inter = struct.unpack(end + "2f", raw[112:120])
    qoff = struct.unpack(end + "3f", raw[268:280])
    sform_code = struct.unpack(end + "h", raw[254:256])[0]
    if sform_code > 0:
        srow = [struct.unpack(end + "4f", raw[280 + 16 * i:296 + 16 * i]) for i in range(3)]
        origin = tuple(float(r[3]) for r in srow)
    else:
        origin = tuple(float(v) for v in qoff)
    count = int(np.prod(shape))
    dt = np.dtype(end + code)
    nbytes = count * dt.itemsize
    if len(raw) < vox_offset + nbytes:
        raise VolumeError("payload shorter than dims imply")
    data = np.frombuffer(raw, dtype=dt, count=count, offset=vox_offset).reshape(shape, order="F")
    if slope not in (0.0, 1.0) or inter != 0.0:
        data = data.astype(np.float64) * (slope if slope != 0.0 else 1.0) + inter
    else:
        data = data.astype(dt.newbyteorder("="))
    return Volume(data, tuple(float(p) for p in pixdim[1:4]), origin)


def _write_nifti(path, vol, dtype=np.float32):
    data = np.asarray(vol.data)
    if data.ndim not in (3, 4):
        raise VolumeError("only 3D and 4D volumes can be written")
    code = {np.dtype(np.float32): 16, np.dtype(np.float64): 64, np.dtype(np.int16): 4}[np.dtype(dtype)]
    bits = _NIFTI_DTYPES[code][1]
    hdr = bytearray(_HDR_SIZE)
    struct.pack_into("<i", hdr, 0, _HDR_SIZE)
    dim = [data.ndim] + list(data.shape) + [1] * (7 - data.ndim)
    struct.pack_into("<8h", hdr, 40, *dim)
    struct.pack_into("<h", hdr, 70, code)
    struct.pack_into("<h", hdr, 72, bits)
    pix = [1.0] + list(vol.voxel_size) + [1.0] * 4
    struct.pack_into("<8f", hdr, 76, *pix)
    struct.pack_into("<f", hdr, 108, float(_VOX_OFFSET))
    struct.pack_into("<2f", hdr, 112, 1.0, 0.0)
    hdr[123] = 10  # xyzt_units: mm, seconds
    struct.pack_into("<h", hdr, 252, 1)
    struct.pack_into("<h", hdr, 254, 1)
    struct.pack_into("<3f", hdr, 268, *vol.origin)
    for i in range(3):
        row = [0.0, 0.0, 0.0, float(vol.origin[i])]
        row[i] = float(vol.voxel_size[i])
        struct.pack_into("<4f", hdr, 280 + 16 * i, *row)
    hdr[344:348] = b"n+1\x00"
    payload = np.asarray(data, dtype=np.dtype(dtype).newbyteorder("<")).ravel(order="F").tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(hdr))
        fh.write(b"\x00" * (_VOX_OFFSET - _HDR_SIZE))
        fh.write(payload)


# ---------------------------------------------------------------------------
# raw format
# ---------------------------------------------------------------------------

_RAW_MAGIC = "MATERNGLM-RAW 1"


def _read_raw(raw):
    lines = []
    pos = 0
    while True:
        nl = raw.find(b"\n", pos)
        if nl < 0:
            raise VolumeError("raw header has no END line")
        line = raw[pos:nl].decode("ascii", errors="replace").strip()
        pos = nl + 1
        if line == "END":
            break
        lines.append(line)
        if len(lines) > 16:
            raise VolumeError("raw header too long")
    if not lines or lines[0] != _RAW_MAGIC:
        raise VolumeError(f"raw magic must be {_RAW_MAGIC!r}")
    fields = {}
    for line in lines[1:]:
        key, *vals = line.split()
        fields[key] = vals
    for key in ("dims", "voxel_size", "origin"):
        if key not in fields:
            raise VolumeError(f"raw header is missing {key!r}")
    shape = tuple(int(v) for v in fields["dims"])
    if len(shape) not in (3, 4):
        raise VolumeError("dims must have 3 or 4 entries")
    count = int(np.prod(shape))
    if len(raw) - pos != 4 * count:
        raise VolumeError(f"payload has {len(raw) - pos} bytes, expected {4 * count}")
    data = np.frombuffer(raw, dtype="<f4", count=count, offset=pos).reshape(shape, order="F").astype(np.float32)
    return Volume(data, tuple(float(v) for v in fields["voxel_size"]), tuple(float(v) for v in fields["origin"]))


def _write_raw(path, vol):
    data = np.asarray(vol.data)
    head = [_RAW_MAGIC, "dims " + " ".join(str(int(d)) for d in data.shape),
            "voxel_size " + " ".join(repr(float(v)) for v in vol.voxel_size),
            "origin " + " ".join(repr(float(v)) for v in vol.origin), "END"]
    with open(path, "wb") as fh:
        fh.write(("\n".join(head) + "\n").encode("ascii"))
        fh.write(np.asarray(data, dtype="<f4").ravel(order="F").tobytes())


def read_volume(path):
    """Read a ``.nii`` or ``.vol`` file into a :class:`Volume`."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw.startswith(_RAW_MAGIC.encode()):
        return _read_raw(raw)
    return _read_nifti(raw)


def write_volume(path, vol, dtype=np.float32):
    """Write ``vol``; the format follows the extension (``.vol`` raw, otherwise NIfTI-1)."""
    path = os.fspath(path)
    if path.endswith(".gz"):
        raise VolumeError("compressed output is not supported")
    if path.endswith(".vol"):
        _write_raw(path, vol)
    else:
        _write_nifti(path, vol, dtype)


# ---------------------------------------------------------------------------
# design matrices
# ---------------------------------------------------------------------------

def read_design(path):
    """Read a T x K design matrix from CSV; a non-numeric first row is a header."""
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if not rows:
        raise VolumeError("design file is empty")

    def numeric(row):
        try:
            [float(c) for c in row]
            return True
        except ValueError:
            return False

    header = None
    if not numeric(rows[0]):
        header, rows = rows[0], rows[1:]
    width = len(header) if header else len(rows[0])
    for i, r in enumerate(rows):
        if len(r) != width:
            raise VolumeError(f"design row {i + 1} has {len(r)} columns, expected {width}")
        if not numeric(r):
            raise VolumeError(f"design row {i + 1} is not numeric")
    return np.array([[float(c) for c in r] for r in rows])


def write_design(path, X, header=None):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        if header:
            w.writerow(header)
        for row in np.asarray(X):
            w.writerow([repr(float(v)) for v in row])


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------

PRIOR_KINDS = ("GS", "ICAR1", "M1", "ICAR2", "M2", "AM2")

_SCHEMA = {
    "seed": int,
    "data": {"bold": str, "mask": str, "design": str, "output": str},
    "model": {"activity": list, "priors": list, "ar_order": int, "sigma0_percent": float,
              "preconditioner": str},
    "hyperprior": {"rho0": float, "xi1": float, "xi2": float, "sigma_h2": float,
                   "icar1_constant": float, "icar2_constant": float,
                   "gamma_scale": float, "gamma_shape": float, "tau2_prior": str,
                   "noise_scale": float, "noise_shape": float, "tau_A2": float},
    "optimizer": {"n_iter": int, "gamma1": float, "gamma2": float, "eta_mom": float, "eta_n": float,
                  "eta0": float, "n_polyak": int, "n_probes": int, "n_warmup": int, "trace": str,
                  "pcg_tol": float, "workers": int},
    "ppm": {"contrast": list, "threshold_percent": float, "display": float, "n_rbmc": int},
    "cv": {"leave_out": float, "n_splits": int, "n_rbmc": int, "priors": list},
    "simulate": {"dims": list, "voxel_size": float, "mask": str, "T": int, "noise_sd": float, "ar": list,
                 "intercept": float, "block": int, "conditions": list},
}

_DEFAULTS = {
    "seed": 0,
    "model": {"ar_order": 1, "sigma0_percent": 2.0, "preconditioner": "block_jacobi"},
    "hyperprior": {"rho0": 2.0, "xi1": 0.05, "xi2": 0.05, "sigma_h2": 0.01, "icar1_constant": 1.0 / 6.0,
                   "icar2_constant": 1.0 / 42.0, "gamma_scale": 10.0, "gamma_shape": 0.1, "tau2_prior": "pc",
                   "noise_scale": 10.0, "noise_shape": 0.1, "tau_A2": 1e-3},
    "optimizer": {},
    "ppm": {"threshold_percent": 0.5, "display": 0.9, "n_rbmc": 100},
    "cv": {"leave_out": 0.9, "n_splits": 50, "n_rbmc": 100},
}


@dataclass
class RunConfig:
    raw: dict = field(default_factory=dict)
    base_dir: str = "."

    def section(self, name):
        out = dict(_DEFAULTS.get(name, {}))
        out.update(self.raw.get(name, {}))
        return out

    @property
    def seed(self):
        return int(self.raw.get("seed", 0))

    def path(self, key):
        p = self.raw.get("data", {}).get(key)
        if p is None:
            raise ConfigError(f"data.{key}", "is required")
        return p if os.path.isabs(p) else os.path.join(self.base_dir, p)


def _check_type(key, value, typ):
    if typ is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if typ is int and isinstance(value, bool):
        raise ConfigError(key, "expected an integer")
    if not isinstance(value, typ):
        raise ConfigError(key, f"expected {typ.__name__}, got {type(value).__name__}")
    return value


def validate_config(raw):
    """Check keys and value types against the schema; returns a normalized copy."""
    out = {}
    for key, value in raw.items():
        if key not in _SCHEMA:
            raise ConfigError(key, "unknown key")
        spec = _SCHEMA[key]
        if isinstance(spec, dict):
            if not isinstance(value, dict):
                raise ConfigError(key, "expected a section")
            sec = {}
            for k, v in value.items():
                if k not in spec:
                    raise ConfigError(f"{key}.{k}", "unknown key")
                sec[k] = _check_type(f"{key}.{k}", v, spec[k])
            out[key] = sec
        else:
            out[key] = _check_type(key, value, spec)
    model = out.get("model", {})
    if "priors" in model:
        for i, p in enumerate(model["priors"]):
            if p not in PRIOR_KINDS:
                raise ConfigError(f"model.priors[{i}]", f"unknown prior kind {p!r}")
    if "activity" in model:
        if not all(isinstance(i, int) and i >= 1 for i in model["activity"]):
            raise ConfigError("model.activity", "indices must be integers >= 1 (1-based)")
        if "priors" in model and len(model["priors"]) not in (1, len(model["activity"])):
            raise ConfigError("model.priors", "give one prior kind or one per activity regressor")
    if out.get("model", {}).get("ar_order", 0) < 0:
        raise ConfigError("model.ar_order", "must be non-negative")
    opt = out.get("optimizer", {})
    if opt.get("trace", "hutchinson") not in ("hutchinson", "exact"):
        raise ConfigError("optimizer.trace", "must be 'hutchinson' or 'exact'")
    cv = out.get("cv", {})
    if "leave_out" in cv and not 0 < cv["leave_out"] < 1:
        raise ConfigError("cv.leave_out", "must lie strictly between 0 and 1")
    hp = out.get("hyperprior", {})
    for k, v in hp.items():
        if isinstance(v, float) and v <= 0:
            raise ConfigError(f"hyperprior.{k}", "must be positive")
    if hp.get("tau2_prior", "pc") not in ("pc", "gamma"):
        raise ConfigError("hyperprior.tau2_prior", "must be 'pc' or 'gamma'")
    if "model" in out and out["model"].get("preconditioner", "block_jacobi") not in ("block_jacobi", "jacobi"):
        raise ConfigError("model.preconditioner", "must be 'block_jacobi' or 'jacobi'")
    return out


def parse_config(text, base_dir="."):
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError("<file>", f"TOML syntax error: {exc}") from exc
    return RunConfig(validate_config(raw), base_dir)


def load_config(path):
    with open(path, "rb") as fh:
        text = fh.read().decode("utf-8")
    return parse_config(text, os.path.dirname(os.path.abspath(path)))


def dump_config(cfg):
    """Serialize a :class:`RunConfig` back to TOML text."""
    return tomli_w.dumps(cfg.raw)
