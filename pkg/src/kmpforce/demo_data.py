"""Demonstration data model, CSV persistence, features and synthetic generators."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from kmpforce.errors import DataError

SCENARIOS = ("constant", "compression", "bimodal")

CSV_COLUMNS = ("t", "px", "py", "pz", "qw", "qx", "qy", "qz",
               "fx", "fy", "fz", "tx", "ty", "tz")

SCAN_LENGTH_MM = 200.0
SCAN_SPEED_MM_S = 10.0
SAMPLE_RATE_HZ = 100.0
NOISE_WINDOW_S = 0.5
# probe penetration used to fill the pz channel of synthetic recordings
NOMINAL_TISSUE_N_PER_MM = 1.5

QUAT_TOL = 1e-6

# contact normal in the probe frame; pressing into tissue reads as negative fz
CONTACT_AXIS = np.array([0.0, 0.0, 1.0])


@dataclass(frozen=True)
class RawSample:
    timestamp: float
    position: tuple  # mm
    orientation: tuple  # (w, x, y, z)
    force: tuple  # N
    torque: tuple  # N*mm


@dataclass
class Demonstration:
    """One recording, stored column-wise.

    Arrays are ``t`` (N,), ``position`` (N, 3) in mm, ``orientation`` (N, 4)
    as (w, x, y, z), ``force`` (N, 3) in N and ``torque`` (N, 3) in N*mm.
    """

    t: np.ndarray
    position: np.ndarray
    orientation: np.ndarray
    force: np.ndarray
    torque: np.ndarray
    scan_length: float = SCAN_LENGTH_MM
    scenario: str = "constant"
    demo_id: str = "demo"

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float).reshape(-1)
        n = self.t.shape[0]
        for name, width in (("position", 3), ("orientation", 4), ("force", 3), ("torque", 3)):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != (n, width):
                raise DataError(f"{self.demo_id}: {name} has shape {arr.shape}, expected {(n, width)}")
            setattr(self, name, arr)
        if n < 2:
            raise DataError(f"{self.demo_id}: a demonstration needs at least 2 samples, got {n}")
        if not self.scan_length > 0:
            raise DataError(f"{self.demo_id}: scan_length must be positive")
        if self.scenario not in SCENARIOS:
            raise DataError(f"{self.demo_id}: unknown scenario tag {self.scenario!r}")
        if np.any(np.diff(self.t) <= 0):
            k = int(np.argmax(np.diff(self.t) <= 0)) + 1
            raise DataError(f"{self.demo_id}: timestamps not strictly increasing at sample {k}")
        norms = np.linalg.norm(self.orientation, axis=1)
        bad = np.flatnonzero(np.abs(norms - 1.0) > QUAT_TOL)
        if bad.size:
            raise DataError(f"{self.demo_id}: quaternion norm {norms[bad[0]]:.6g} at sample {bad[0]}")

    def __len__(self):
        return self.t.shape[0]

    def sample(self, i: int) -> RawSample:
        return RawSample(float(self.t[i]), tuple(self.position[i]), tuple(self.orientation[i]),
                         tuple(self.force[i]), tuple(self.torque[i]))

    @classmethod
    def from_samples(cls, samples: Sequence[RawSample], **kwargs) -> "Demonstration":
        return cls(
            t=[s.timestamp for s in samples],
            position=[s.position for s in samples],
            orientation=[s.orientation for s in samples],
            force=[s.force for s in samples],
            torque=[s.torque for s in samples],
            **kwargs,
        )

    def table(self) -> np.ndarray:
        """All numeric channels as an (N, 14) array in CSV column order."""
        return np.column_stack([self.t, self.position, self.orientation, self.force, self.torque])

    def progress(self) -> np.ndarray:
        """Scan progress in [0, 1] along the scan (x) axis, relative to the first sample."""
        s = (self.position[:, 0] - self.position[0, 0]) / self.scan_length
        return np.clip(s, 0.0, 1.0)

    def normal_force(self) -> np.ndarray:
        """Force magnitude pressing along the contact normal (positive when pushing)."""
        return -self.force @ CONTACT_AXIS

    def equals(self, other: "Demonstration") -> bool:
        return (self.scenario == other.scenario and self.scan_length == other.scan_length
                and self.t.shape == other.t.shape
                and np.array_equal(self.table(), other.table()))


@dataclass
class DemonstrationDatabase:
    demonstrations: list
    input_dim: int = 1
    output_dim: int = 1
    # id of the reference demonstration once aligned, None for raw recordings
    aligned_to: str | None = None

    def __post_init__(self):
        if len(self.demonstrations) < 1:
            raise DataError("a demonstration database needs at least one demonstration")
        ids = [d.demo_id for d in self.demonstrations]
        if len(set(ids)) != len(ids):
            raise DataError(f"duplicate demonstration identifiers in {ids}")

    def __len__(self):
        return len(self.demonstrations)

    def __iter__(self):
        return iter(self.demonstrations)

    def __getitem__(self, i):
        return self.demonstrations[i]

    @property
    def ids(self) -> list:
        return [d.demo_id for d in self.demonstrations]

    def subset(self, ids: Sequence[str]) -> "DemonstrationDatabase":
        by_id = {d.demo_id: d for d in self.demonstrations}
        missing = [i for i in ids if i not in by_id]
        if missing:
            raise DataError(f"unknown demonstration identifiers {missing}")
        return DemonstrationDatabase([by_id[i] for i in ids], self.input_dim, self.output_dim,
                                     self.aligned_to)

    def is_aligned(self) -> bool:
        return len({len(d) for d in self.demonstrations}) == 1


_CHANNELS = {
    "px": ("position", 0), "py": ("position", 1), "pz": ("position", 2),
    "fx": ("force", 0), "fy": ("force", 1), "fz": ("force", 2),
    "tx": ("torque", 0), "ty": ("torque", 1), "tz": ("torque", 2),
}


@dataclass(frozen=True)
class FeatureSelector:
    """Which channels make up the input ``s`` and output ``xi`` vectors.

    Besides raw channel names (``px`` ... ``tz``) two derived channels exist:
    ``progress`` (normalized scan progress) and ``normal_force``.
    """

    input_spec: tuple = ("progress",)
    output_spec: tuple = ("normal_force",)

    @property
    def input_dim(self) -> int:
        return len(self.input_spec)

    @property
    def output_dim(self) -> int:
        return len(self.output_spec)

    def check(self, db: DemonstrationDatabase | None = None):
        for name in self.input_spec + self.output_spec:
            if name not in _CHANNELS and name not in ("progress", "normal_force"):
                raise DataError(f"feature selector references unknown channel {name!r}")
        if db is not None and (db.input_dim, db.output_dim) != (self.input_dim, self.output_dim):
            raise DataError(
                f"selector dims ({self.input_dim}, {self.output_dim}) do not match database "
                f"dims ({db.input_dim}, {db.output_dim})")


def _channel(demo: Demonstration, name: str) -> np.ndarray:
    if name == "progress":
        return demo.progress()
    if name == "normal_force":
        return demo.normal_force()
    group, k = _CHANNELS[name]
    return getattr(demo, group)[:, k]


@dataclass
class FeatureDatabase:
    """Per-demonstration (s, xi) sequences; ``inputs[h]`` is (N_h, I), ``outputs[h]`` is (N_h, O)."""

    inputs: list
    outputs: list
    ids: list = field(default_factory=list)

    def joint(self) -> np.ndarray:
        """Stacked joint vectors [s, xi] of every sample, shape (sum N_h, I + O)."""
        return np.vstack([np.hstack([s, x]) for s, x in zip(self.inputs, self.outputs)])


def extract_features(db: DemonstrationDatabase, sel: FeatureSelector = FeatureSelector()) -> FeatureDatabase:
    sel.check()
    if len(db) > 1 and not db.is_aligned():
        raise DataError("feature extraction needs an aligned database (equal lengths) or a single demo")
    inputs, outputs = [], []
    for demo in db:
        inputs.append(np.column_stack([_channel(demo, c) for c in sel.input_spec]))
        outputs.append(np.column_stack([_channel(demo, c) for c in sel.output_spec]))
    return FeatureDatabase(inputs, outputs, db.ids)


def subsample(db: DemonstrationDatabase, step: int) -> DemonstrationDatabase:
    """Keep every ``step``-th sample (the last sample is always kept)."""
    if step < 1:
        raise DataError("subsampling step must be >= 1")
    if step == 1:
        return db
    demos = []
    for d in db:
        idx = np.arange(0, len(d), step)
        if idx[-1] != len(d) - 1:
            idx = np.append(idx, len(d) - 1)
        demos.append(Demonstration(d.t[idx], d.position[idx], d.orientation[idx], d.force[idx],
                                   d.torque[idx], d.scan_length, d.scenario, d.demo_id))
    return DemonstrationDatabase(demos, db.input_dim, db.output_dim, db.aligned_to)


# --- persistence -----------------------------------------------------------

def _format(x: float) -> str:
    # repr gives the shortest string that round-trips to the same double
    return repr(float(x))


def save_demonstration(demo: Demonstration, path) -> Path:
    path = Path(path)
    lines = [f"# scenario={demo.scenario} scan_length_mm={_format(demo.scan_length)}",
             ",".join(CSV_COLUMNS)]
    for row in demo.table():
        lines.append(",".join(_format(v) for v in row))
    try:
        path.write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from exc
    return path


def save_demonstrations(db: DemonstrationDatabase, path) -> list:
    """Write one CSV per demonstration into directory ``path`` (created on demand)."""
    root = Path(path)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {root}: {exc}") from exc
    return [save_demonstration(d, root / f"{d.demo_id}.csv") for d in db]


def _parse_header(line: str, path: Path) -> dict:
    if not line.startswith("#"):
        raise DataError(f"{path}:1: missing '# scenario=... scan_length_mm=...' header")
    fields = {}
    for token in line[1:].split():
        key, sep, value = token.partition("=")
        if not sep:
            raise DataError(f"{path}:1: malformed header token {token!r}")
        fields[key] = value
    if "scenario" not in fields or "scan_length_mm" not in fields:
        raise DataError(f"{path}:1: header needs scenario and scan_length_mm")
    return fields


def load_demonstration(path) -> Demonstration:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"demonstration file not found: {path}")
    with path.open(newline="") as fh:
        lines = fh.read().splitlines()
    if len(lines) < 2:
        raise DataError(f"{path}: file too short")
    header = _parse_header(lines[0], path)
    if tuple(c.strip() for c in lines[1].split(",")) != CSV_COLUMNS:
        raise DataError(f"{path}:2: expected columns {','.join(CSV_COLUMNS)}")
    rows = []
    for lineno, row in enumerate(csv.reader(lines[2:]), start=3):
        if not row:
            continue
        if len(row) != len(CSV_COLUMNS):
            raise DataError(f"{path}:{lineno}: expected {len(CSV_COLUMNS)} columns, got {len(row)}")
        values = []
        for col, text in zip(CSV_COLUMNS, row):
            try:
                v = float(text)
            except ValueError:
                raise DataError(f"{path}:{lineno}: column {col}: not a number: {text!r}") from None
            if not math.isfinite(v):
                raise DataError(f"{path}:{lineno}: column {col}: non-finite value")
            values.append(v)
        q = np.array(values[4:8])
        if abs(np.linalg.norm(q) - 1.0) > QUAT_TOL:
            raise DataError(f"{path}:{lineno}: column qw..qz: quaternion norm "
                            f"{np.linalg.norm(q):.6g} is not 1")
        if rows and values[0] <= rows[-1][0]:
            raise DataError(f"{path}:{lineno}: column t: timestamps not strictly increasing")
        rows.append(values)
    if len(rows) < 2:
        raise DataError(f"{path}: a demonstration needs at least 2 samples")
    try:
        scan_length = float(header["scan_length_mm"])
    except ValueError:
        raise DataError(f"{path}:1: bad scan_length_mm {header['scan_length_mm']!r}") from None
    a = np.array(rows)
    try:
        return Demonstration(a[:, 0], a[:, 1:4], a[:, 4:8], a[:, 8:11], a[:, 11:14],
                             scan_length=scan_length, scenario=header["scenario"],
                             demo_id=path.stem)
    except DataError as exc:
        raise DataError(f"{path}: {exc}") from None


def load_demonstrations(path, schema: FeatureSelector = FeatureSelector()) -> DemonstrationDatabase:
    """Load a single CSV file or every ``*.csv`` in a directory (sorted by name)."""
    schema.check()
    path = Path(path)
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.suffix == ".csv")
        if not files:
            raise DataError(f"no demonstration files in {path}")
    elif path.is_file():
        files = [path]
    else:
        raise DataError(f"demonstration path not found: {path}")
    demos = [load_demonstration(f) for f in files]
    return DemonstrationDatabase(demos, schema.input_dim, schema.output_dim)


# --- synthetic demonstrations ---------------------------------------------

def _raised_cosine(s, lo, hi):
    x = np.clip((np.asarray(s, dtype=float) - lo) / (hi - lo), 0.0, 1.0)
    return 0.5 - 0.5 * np.cos(np.pi * x)


def _bump(s, a, b, c, d):
    """0 outside [a, d], 1 on [b, c], raised-cosine ramps in between."""
    return _raised_cosine(s, a, b) * (1.0 - _raised_cosine(s, c, d))


# (rise start, plateau start, plateau end, fall end) in scan progress
COMPRESSION_WINDOW = (0.30, 0.38, 0.62, 0.70)
BIMODAL_WINDOWS = ((0.10, 0.16, 0.34, 0.40), (0.60, 0.66, 0.84, 0.90))
CONSTANT_FORCE = 6.0
COMPRESSION_BASELINE = 5.0
COMPRESSION_PLATEAU = 25.0
BIMODAL_BASE_BEFORE = 6.0
BIMODAL_BASE_AFTER = 4.5
BIMODAL_PLATEAU = 20.0


def nominal_force(scenario: str, s) -> np.ndarray:
    """Noise-free normal force (N) as a function of scan progress."""
    s = np.asarray(s, dtype=float)
    if scenario == "constant":
        return np.full_like(s, CONSTANT_FORCE)
    if scenario == "compression":
        b = _bump(s, *COMPRESSION_WINDOW)
        return COMPRESSION_BASELINE * (1.0 - b) + COMPRESSION_PLATEAU * b
    if scenario == "bimodal":
        b1 = _bump(s, *BIMODAL_WINDOWS[0])
        b2 = _bump(s, *BIMODAL_WINDOWS[1])
        # the base level switches while the first plateau fully masks it
        base = np.where(s < 0.5 * (BIMODAL_WINDOWS[0][1] + BIMODAL_WINDOWS[0][2]),
                        BIMODAL_BASE_BEFORE, BIMODAL_BASE_AFTER)
        return base * (1.0 - b1 - b2) + BIMODAL_PLATEAU * (b1 + b2)
    raise DataError(f"unknown scenario tag {scenario!r}; expected one of {SCENARIOS}")


def plateau_windows(scenario: str) -> tuple:
    """Flat compression intervals of the nominal profile, in progress units."""
    if scenario == "compression":
        return ((COMPRESSION_WINDOW[1], COMPRESSION_WINDOW[2]),)
    if scenario == "bimodal":
        return tuple((w[1], w[2]) for w in BIMODAL_WINDOWS)
    return ()


def _smooth_unit_signal(rng, duration, n_terms=3):
    """Random smooth function of time with sup-norm exactly 1 on [0, duration]."""
    freqs = rng.uniform(0.03, 0.2, n_terms)
    phases = rng.uniform(0.0, 2.0 * np.pi, n_terms)
    amps = rng.uniform(0.5, 1.0, n_terms)
    grid = np.linspace(0.0, duration, 4096)
    peak = np.max(np.abs(np.sum(amps[:, None] * np.sin(2 * np.pi * freqs[:, None] * grid + phases[:, None]),
                                axis=0)))

    def w(t):
        t = np.asarray(t, dtype=float)
        return np.sum(amps[:, None] * np.sin(2 * np.pi * freqs[:, None] * t + phases[:, None]), axis=0) / peak

    return w


def _progress_curve(rng, time_warp, dt, frac_per_s):
    nominal = 1.0 / frac_per_s
    t_max = nominal / (1.0 - time_warp) + 2 * dt
    k = np.arange(int(np.ceil(t_max / dt)) + 1)
    if time_warp > 0:
        w = _smooth_unit_signal(rng, t_max)(k * dt)
        rate = 1.0 + time_warp * w
        p = frac_per_s * dt * np.concatenate([[0.0], np.cumsum(rate[:-1])])
    else:
        p = frac_per_s * dt * k
    end = int(np.argmax(p >= 1.0 - 1e-12))
    p = p[: end + 1].copy()
    p[-1] = 1.0
    return k[: end + 1] * dt, p


def synthesize_demonstrations(scenario: str, count: int, noise_std: float = 0.0, seed: int = 0,
                              time_warp: float = 0.1, scan_length: float = SCAN_LENGTH_MM,
                              speed: float = SCAN_SPEED_MM_S,
                              sample_rate: float = SAMPLE_RATE_HZ) -> DemonstrationDatabase:
    """Generate ``count`` noisy, time-warped recordings of a scenario's force profile.

    Each demonstration scans ``scan_length`` mm along +x at a local speed of
    ``speed * (1 + time_warp * w(t))`` with ``|w| <= 1`` smooth and random, so
    durations and timing differ while force as a function of progress does not.
    Force noise is white Gaussian smoothed by a 0.5 s moving average and
    rescaled to have standard deviation ``noise_std``.
    """
    if count < 1:
        raise DataError("count must be >= 1")
    if noise_std < 0:
        raise DataError("noise_std must be >= 0")
    if not 0 <= time_warp < 1:
        raise DataError("time_warp must be in [0, 1)")
    if scenario not in SCENARIOS:
        raise DataError(f"unknown scenario tag {scenario!r}; expected one of {SCENARIOS}")
    dt = 1.0 / sample_rate
    window = max(1, int(round(NOISE_WINDOW_S * sample_rate)))
    demos = []
    for h, child in enumerate(np.random.SeedSequence(seed).spawn(count)):
        rng = np.random.default_rng(child)
        t, p = _progress_curve(rng, time_warp, dt, speed / scan_length)
        n = t.shape[0]
        force = nominal_force(scenario, p)
        if noise_std > 0:
            white = rng.standard_normal(n + window - 1)
            force = force + noise_std * np.sqrt(window) * np.convolve(white, np.ones(window) / window, "valid")
        zeros = np.zeros(n)
        position = np.column_stack([p * scan_length, zeros, -force / NOMINAL_TISSUE_N_PER_MM])
        orientation = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
        demos.append(Demonstration(t, position, orientation, np.column_stack([zeros, zeros, -force]),
                                   np.zeros((n, 3)), scan_length, scenario, f"demo_{h:03d}"))
    return DemonstrationDatabase(demos)


def split_train_validation(ids: Sequence[str], seed: int) -> tuple:
    """Seeded half/half partition of identifiers; training gets the extra one if odd."""
    ids = list(ids)
    order = np.random.default_rng(seed).permutation(len(ids))
    n_train = (len(ids) + 1) // 2
    train = sorted(ids[i] for i in order[:n_train])
    valid = sorted(ids[i] for i in order[n_train:])
    return train, valid

