"""Run configuration and on-disk formats.

* config: flat UTF-8 ``key = value`` lines, ``#`` comments, unknown keys rejected
* shots: CSV ``shot_index,prepared_state,t_d_us,S_mV`` preceded by a
  ``# config_sha256=...`` line
* traces: binary ``BOLO1`` files (see :func:`write_trace`)
* results: JSON with sorted keys
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import math
import os
import struct
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .model import AveragingWindow, BolometerResponse, NoiseModel, QubitDecayModel
from .sim import BaselineMode, ShotRecord, SimConfig, State, Trace

TRACE_MAGIC = b"BOLO1"
SHOTS_HEADER = ["shot_index", "prepared_state", "t_d_us", "S_mV"]
HASH_PREFIX = "# config_sha256="


class ConfigError(ValueError):
    pass


class FormatError(ValueError):
    pass


@dataclass
class RunConfig:
    """All inputs of a run. Defaults reproduce the 13.9 µs / 10.6 µs operating point."""

    # bolometer
    c_g: float = 24.7
    c_e: float = 182.0
    tau_b: float = 9.4
    # qubit
    T1: float = 25.8
    P_x: float = 0.2
    # noise (sigma = 17.4 mV over a 10.6 µs window)
    P_N: float = 17.4**2 * 10.6
    # averaging window
    t_RO: float = 13.9
    t0: float = 3.3
    t_base: float = 1.1
    baseline_mode: str = "common"
    common_baseline: float = 0.0
    # simulation
    n_shots: int = 10000
    n_traces: int = 1000
    trace_duration: float = 40.0
    dt: float = 0.05
    workers: int = 1
    # landscape grid
    grid_t_ro_min: float = 1.0
    grid_t_ro_max: float = 40.0
    grid_t_ro_n: int = 30
    grid_avg_min: float = 0.5
    grid_avg_max: float = 30.0
    grid_avg_n: int = 30
    landscape_level: float = 0.6
    # provenance labels, never used in computation
    f_d_GHz: float = 5.4
    P_d_dBm: float = -107.8
    f_p_MHz: float = 580.5
    P_p_dBm: float = -128.7
    seed: int | None = None

    def validate(self) -> "RunConfig":
        try:
            self.response()
            self.qubit()
            self.noise()
            self.window()
            BaselineMode(self.baseline_mode)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        checks = [
            (self.n_shots >= 1, "n_shots must be >= 1"),
            (self.n_traces >= 1, "n_traces must be >= 1"),
            (self.dt > 0, "dt must be positive"),
            (self.trace_duration >= self.dt, "trace_duration must be at least dt"),
            (self.workers >= 1, "workers must be >= 1"),
            (self.grid_t_ro_n >= 1 and self.grid_avg_n >= 1, "grid sizes must be >= 1"),
            (self.grid_t_ro_min <= self.grid_t_ro_max, "grid_t_ro_min > grid_t_ro_max"),
            (self.grid_avg_min <= self.grid_avg_max, "grid_avg_min > grid_avg_max"),
            (self.grid_avg_min > 0, "grid_avg_min must be positive"),
        ]
        if self.baseline_mode == BaselineMode.PER_SHOT.value:
            checks.append((self.t_base > 0, "per_shot baseline mode needs t_base > 0"))
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, float) and not math.isfinite(v):
                raise ConfigError(f"{f.name} must be finite")
        return self

    def response(self):
        return BolometerResponse(self.c_g, self.c_e, self.tau_b)

    def qubit(self):
        return QubitDecayModel(self.T1, self.P_x)

    def noise(self):
        return NoiseModel(self.P_N)

    def window(self):
        return AveragingWindow(self.t_RO, self.t0, self.t_base)

    def sim_config(self, duration: float | None = None) -> SimConfig:
        return SimConfig(self.response(), self.qubit(), self.noise(), self.window(),
                         dt=self.dt, duration=duration)

    def t_ro_axis(self):
        return np.linspace(self.grid_t_ro_min, self.grid_t_ro_max, self.grid_t_ro_n)

    def avg_axis(self):
        return np.linspace(self.grid_avg_min, self.grid_avg_max, self.grid_avg_n)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_text(self) -> str:
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in self.to_dict().items())

    def sha256(self) -> str:
        """Hash of the model and protocol settings; the seed and worker count are excluded."""
        d = {k: v for k, v in self.to_dict().items() if k not in ("seed", "workers")}
        text = "".join(f"{k} = {_fmt(v)}\n" for k, v in d.items())
        return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _fmt(v):
    if v is None:
        return "none"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(name, typ, raw: str, lineno: int):
    raw = raw.strip()
    try:
        if "int" in typ and raw.lower() == "none" and "None" in typ:
            return None
        if typ.startswith("int"):
            return int(raw)
        if typ == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"line {lineno}: cannot parse {name} = {raw!r} as {typ}") from None


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    cfg = dataclasses.replace(base) if base is not None else RunConfig()
    types = {f.name: f.type for f in fields(RunConfig)}
    seen = set()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        seen.add(key)
        setattr(cfg, key, _coerce(key, str(types[key]), value, lineno))
    return cfg.validate()


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# shots CSV


def shots_to_csv(records, config_hash: str) -> str:
    buf = io.StringIO()
    buf.write(f"{HASH_PREFIX}{config_hash}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SHOTS_HEADER)
    for r in records:
        w.writerow([r.shot_index, State(r.prepared_state).value,
                    "" if r.t_d is None else repr(float(r.t_d)), repr(float(r.S))])
    return buf.getvalue()


def parse_shots_csv(text: str):
    """Return ``(records, config_hash)``. Malformed rows raise :class:`FormatError` with the line number."""
    config_hash = None
    records = []
    header_seen = False
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        if line.startswith("#"):
            if line.startswith(HASH_PREFIX):
                config_hash = line[len(HASH_PREFIX):].strip()
            continue
        row = next(csv.reader([line]))
        if not header_seen:
            if row != SHOTS_HEADER:
                raise FormatError(f"line {lineno}: expected header {','.join(SHOTS_HEADER)}")
            header_seen = True
            continue
        if len(row) != 4:
            raise FormatError(f"line {lineno}: expected 4 fields, got {len(row)}")
        try:
            idx = int(row[0])
            state = State(row[1])
            t_d = float(row[2]) if row[2] else None
            S = float(row[3])
        except ValueError as exc:
            raise FormatError(f"line {lineno}: {exc}") from None
        records.append(ShotRecord(idx, state, t_d, S))
    if not records:
        raise FormatError("no shot rows found")
    return records, config_hash


def split_by_state(records):
    g = np.array([r.S for r in records if State(r.prepared_state) is State.GROUND])
    e = np.array([r.S for r in records if State(r.prepared_state) is State.EXCITED])
    return g, e


# ---------------------------------------------------------------------------
# binary traces


def trace_to_bytes(trace: Trace) -> bytes:
    """``BOLO1`` + little-endian u32 count, f64 dt_us, f64 t_pulse_start_us, u8 channels, f64 samples (row-major)."""
    s = np.asarray(trace.samples, dtype="<f8")
    channels = 1 if s.ndim == 1 else s.shape[1]
    if channels not in (1, 2):
        raise FormatError("traces have one or two channels")
    head = TRACE_MAGIC + struct.pack("<IddB", s.shape[0], trace.dt, trace.t_pulse_start, channels)
    return head + s.tobytes(order="C")


def trace_from_bytes(data: bytes) -> Trace:
    n_head = len(TRACE_MAGIC) + struct.calcsize("<IddB")
    if data[: len(TRACE_MAGIC)] != TRACE_MAGIC:
        raise FormatError("not a BOLO1 trace file")
    if len(data) < n_head:
        raise FormatError("truncated trace header")
    n, dt, t_on, channels = struct.unpack("<IddB", data[len(TRACE_MAGIC):n_head])
    if channels not in (1, 2):
        raise FormatError(f"bad channel count {channels}")
    expected = n_head + 8 * n * channels
    if len(data) != expected:
        raise FormatError(f"trace payload has {len(data) - n_head} bytes, expected {expected - n_head}")
    s = np.frombuffer(data, dtype="<f8", offset=n_head).astype(float)
    if channels == 2:
        s = s.reshape(n, 2)
    return Trace(dt, t_on, s)


def write_trace(path, trace: Trace):
    atomic_write(path, trace_to_bytes(trace))


def read_trace(path) -> Trace:
    return trace_from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# results and plot data


def results_json(doc: dict) -> str:
    return json.dumps(_jsonable(doc), sort_keys=True, indent=2, allow_nan=False) + "\n"


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating, float)):
        v = float(x)
        return v if math.isfinite(v) else None
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.bool_,)):
        return bool(x)
    if hasattr(x, "value") and isinstance(getattr(x, "value"), str):
        return x.value
    return x


def table_csv(header, rows, config_hash: str | None = None) -> str:
    buf = io.StringIO()
    if config_hash:
        buf.write(f"{HASH_PREFIX}{config_hash}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return buf.getvalue()


def atomic_write(path, data):
    path = Path(path)
    tmp = path.with_name(path.name + ".part")
    mode = "wb" if isinstance(data, bytes) else "w"
    with open(tmp, mode, **({} if mode == "wb" else {"encoding": "utf-8", "newline": ""})) as fh:
        fh.write(data)
    os.replace(tmp, path)


class OutputSet:
    """Track files written by a command and delete them all if the command fails."""

    def __init__(self, out_dir):
        self.out_dir = Path(out_dir)
        self.written: list[Path] = []
        self._made_dirs: list[Path] = []

    def __enter__(self):
        self._mkdir(self.out_dir)
        return self

    def _mkdir(self, d: Path):
        missing = []
        p = d
        while not p.exists():
            missing.append(p)
            p = p.parent
        d.mkdir(parents=True, exist_ok=True)
        self._made_dirs.extend(reversed(missing))

    def path(self, name) -> Path:
        p = self.out_dir / name
        self._mkdir(p.parent)
        return p

    def write(self, name, data) -> Path:
        p = self.path(name)
        atomic_write(p, data)
        self.written.append(p)
        return p

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None:
            for p in self.written:
                for q in (p, p.with_name(p.name + ".part")):
                    if q.exists():
                        q.unlink()
            for d in reversed(self._made_dirs):
                try:
                    d.rmdir()
                except OSError:
                    pass
        return False
