"""Admittance-controlled probe, simulated phantom and closed-loop reproduction."""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from kmpforce.demo_data import Demonstration
from kmpforce.errors import DataError, DivergenceError
from kmpforce.kmp import KMPModel, insert_via_point, train_kmp

IMAGE_SIZE = 128
FIELD_OF_VIEW = 0.04  # m, both lateral width and depth of a frame
FRAME_RATE = 20.0
DIVERGENCE_LIMIT = 0.5  # m of |x_c - x_d|
COUPLING_FORCE = 1.0  # N; contact force scale over which acoustic coupling builds up
LUMEN_INTENSITY = 0.03
DECOUPLED_INTENSITY = 0.02

LOG_COLUMNS = ("t", "xc_x", "xc_y", "xc_z", "xd_x", "xd_y", "xd_z",
               "f_meas", "f_target_mean", "f_target_std")


@dataclass(frozen=True)
class ControllerParams:
    mass: np.ndarray = field(default_factory=lambda: 2.5 * np.eye(3))
    damping: np.ndarray = field(default_factory=lambda: 500.0 * np.eye(3))
    stiffness: np.ndarray = field(default_factory=lambda: np.diag([270.0, 270.0, 0.0]))
    dt: float = 0.002

    def __post_init__(self):
        for name in ("mass", "damping", "stiffness"):
            m = np.asarray(getattr(self, name), dtype=float)
            if m.ndim == 1:
                m = np.diag(m)
            if m.shape != (3, 3) or not np.allclose(m, m.T):
                raise ValueError(f"{name} must be a symmetric 3x3 matrix")
            object.__setattr__(self, name, m)
        if np.linalg.eigvalsh(self.mass).min() <= 0 or np.linalg.eigvalsh(self.damping).min() <= 0:
            raise ValueError("mass and damping must be positive definite")
        if np.linalg.eigvalsh(self.stiffness).min() < 0:
            raise ValueError("stiffness must be positive semidefinite")
        if self.stiffness[2, 2] != 0 or np.any(self.stiffness[2, :2] != 0):
            raise ValueError("the contact (z) axis must have zero stiffness")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        object.__setattr__(self, "_mass_inv", np.linalg.inv(self.mass))

    @property
    def mass_inv(self) -> np.ndarray:
        return self._mass_inv

    def to_dict(self) -> dict:
        return {"mass": self.mass.tolist(), "damping": self.damping.tolist(),
                "stiffness": self.stiffness.tolist(), "dt": self.dt}


@dataclass(frozen=True)
class ProbeState:
    """Compliant position, error velocity d(x_c - x_d)/dt and desired position (m, m/s)."""

    x_c: np.ndarray
    velocity: np.ndarray
    x_d: np.ndarray

    @property
    def error(self) -> np.ndarray:
        return self.x_c - self.x_d

    @classmethod
    def at_rest(cls, position) -> "ProbeState":
        p = np.asarray(position, dtype=float)
        return cls(p.copy(), np.zeros(3), p.copy())


def controller_step(state: ProbeState, h_e, x_d, mu_f, params: ControllerParams) -> ProbeState:
    """Advance M x_e'' + D x_e' + K x_e = h_e + mu_f by one semi-implicit Euler step.

    The error x_e = x_c - x_d is integrated (velocity first, then position)
    and re-anchored on the new desired position ``x_d``.
    """
    x_d = np.array(x_d, dtype=float)
    x_e = state.x_c - state.x_d
    acc = params.mass_inv @ (np.asarray(h_e, dtype=float) + np.asarray(mu_f, dtype=float)
                             - params.damping @ state.velocity - params.stiffness @ x_e)
    # a non-finite input anywhere surfaces in this sum
    if not np.isfinite(acc.sum() + x_d.sum()):
        raise ValueError("controller inputs must be finite")
    v = state.velocity + params.dt * acc
    x_e = x_e + params.dt * v
    return ProbeState(x_d + x_e, v, x_d)


@dataclass(frozen=True)
class Phantom:
    surface_height: float = 0.0  # m
    tissue_stiffness: float = 2000.0  # N/m
    vessel_depth: float = 0.015  # m below the surface
    vessel_radius: float = 0.003  # m
    vessel_collapse_force: float = 22.0  # N
    acoustic_noise_std: float = 0.08
    name: str = "custom"

    def __post_init__(self):
        for f in ("tissue_stiffness", "vessel_depth", "vessel_radius", "vessel_collapse_force"):
            if not getattr(self, f) > 0:
                raise ValueError(f"phantom {f} must be positive")
        if self.acoustic_noise_std < 0:
            raise ValueError("acoustic_noise_std must be >= 0")
        if self.vessel_depth <= self.vessel_radius:
            raise ValueError("vessel_depth must exceed vessel_radius")

    def to_dict(self) -> dict:
        return {"name": self.name, "surface_height": self.surface_height,
                "tissue_stiffness": self.tissue_stiffness, "vessel_depth": self.vessel_depth,
                "vessel_radius": self.vessel_radius, "vessel_collapse_force": self.vessel_collapse_force,
                "acoustic_noise_std": self.acoustic_noise_std}


# stiff plastinol box (B) with vessels at two depths and a softer silicone arm (C)
PHANTOM_PRESETS = {
    "phantom-b-deep": Phantom(0.0, 6000.0, 0.04, 0.005, 35.0, 0.06, "phantom-b-deep"),
    "phantom-b-superficial": Phantom(0.0, 6000.0, 0.02, 0.005, 30.0, 0.06, "phantom-b-superficial"),
    "phantom-c": Phantom(0.0, 2000.0, 0.015, 0.003, 22.0, 0.08, "phantom-c"),
}


def get_phantom(name: str) -> Phantom:
    try:
        return PHANTOM_PRESETS[name]
    except KeyError:
        raise DataError(f"unknown phantom preset {name!r}; choose from {sorted(PHANTOM_PRESETS)}") from None


def phantom_contact_force(phantom: Phantom, probe_position) -> np.ndarray:
    """Linear pushback along +z proportional to penetration; no friction."""
    z = float(np.asarray(probe_position, dtype=float)[2])
    return np.array([0.0, 0.0, phantom.tissue_stiffness * max(0.0, phantom.surface_height - z)])


_AXIS = (np.arange(IMAGE_SIZE) + 0.5) / IMAGE_SIZE * FIELD_OF_VIEW
_LATERAL = _AXIS - FIELD_OF_VIEW / 2  # y, m
_DEPTH = _AXIS  # below the probe face, m
# fixed spatial frequencies (rad/m) of the deterministic tissue texture
_TEXTURE = np.array([[310.0, 420.0, 150.0], [-260.0, 190.0, 470.0], [120.0, -380.0, 330.0],
                     [530.0, 90.0, -210.0]])
_PHASES = np.array([0.3, 1.7, 2.9, 4.4])


def _tissue_texture(scan_x: float) -> np.ndarray:
    y = _LATERAL[None, :]
    z = _DEPTH[:, None]
    acc = np.zeros((IMAGE_SIZE, IMAGE_SIZE))
    for (kx, ky, kz), ph in zip(_TEXTURE, _PHASES):
        acc += np.cos(kx * scan_x + ky * y + kz * z + ph)
    return acc / len(_TEXTURE)  # in [-1, 1]


def render_synthetic_image(phantom: Phantom, probe_position, contact_force, rng) -> np.ndarray:
    """128x128 transverse frame with values in [0, 1] on an 8-bit grid.

    A dark elliptical lumen sits at the vessel depth; its vertical semi-axis
    shrinks linearly to zero as the contact force reaches the collapse force.
    Brightness scales with acoustic coupling, so a probe without contact
    renders near-black. Speckle is multiplicative Gaussian noise drawn from
    ``rng``.
    """
    pos = np.asarray(probe_position, dtype=float)
    force = float(np.linalg.norm(contact_force))
    penetration = max(0.0, phantom.surface_height - pos[2])
    tissue = (0.6 + 0.15 * _tissue_texture(pos[0])) * np.exp(-_DEPTH / 0.2)[:, None]

    squeeze = min(force / phantom.vessel_collapse_force, 1.0)
    semi_v = phantom.vessel_radius * (1.0 - squeeze)
    semi_h = phantom.vessel_radius * (1.0 + 0.5 * squeeze)
    center = phantom.vessel_depth - penetration
    image = tissue
    if semi_v > 0:
        inside = ((_LATERAL[None, :] + pos[1]) / semi_h) ** 2 + ((_DEPTH[:, None] - center) / semi_v) ** 2 <= 1
        image = np.where(inside, LUMEN_INTENSITY, tissue)

    coupling = 1.0 - np.exp(-force / COUPLING_FORCE)
    image = DECOUPLED_INTENSITY + (image - DECOUPLED_INTENSITY) * coupling
    speckle = np.clip(rng.standard_normal((IMAGE_SIZE, IMAGE_SIZE)), -3.0, 3.0)
    image = image * (1.0 + phantom.acoustic_noise_std * speckle)
    return np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0


@dataclass(frozen=True)
class ScanPlan:
    """Straight scan from ``start`` to ``end`` (m) on the phantom surface."""

    start: tuple = (0.0, 0.0, 0.0)
    end: tuple = (0.2, 0.0, 0.0)
    speed: float = 0.01  # m/s
    approach_height: float = 0.005  # m above the surface at the start of the approach
    approach_speed: float = 0.005  # m/s
    settle_time: float = 1.5  # s of force build-up before the scan timer starts
    max_approach_time: float = 10.0

    @property
    def length(self) -> float:
        return float(np.linalg.norm(np.subtract(self.end, self.start)))

    def progress(self, x_d) -> float:
        """Scan progress of a desired position, clamped to [0, 1]."""
        length = self.length
        if length == 0:
            return 0.0
        direction = np.subtract(self.end, self.start) / length
        return float(np.clip(np.dot(np.subtract(x_d, self.start), direction) / length, 0.0, 1.0))

    def to_dict(self) -> dict:
        return {"start": list(self.start), "end": list(self.end), "speed": self.speed,
                "approach_height": self.approach_height, "approach_speed": self.approach_speed,
                "settle_time": self.settle_time, "max_approach_time": self.max_approach_time}

    @classmethod
    def from_dict(cls, doc: dict) -> "ScanPlan":
        doc = dict(doc)
        doc["start"] = tuple(doc["start"])
        doc["end"] = tuple(doc["end"])
        return cls(**doc)


def query_force_reference(model: KMPModel, x_d, plan: ScanPlan | None = None) -> tuple:
    """Mean and standard deviation (N) of the learned force.

    With a ``plan`` the desired pose ``x_d`` is mapped to clamped scan
    progress; otherwise ``x_d`` is the progress value itself.
    """
    s = plan.progress(x_d) if plan is not None else float(np.clip(x_d, 0.0, 1.0))
    mean, cov = model.predict([[s]])
    return float(mean[0, 0]), float(np.sqrt(max(cov[0, 0, 0], 0.0)))


@dataclass
class ScanLog:
    """Per-step records of a reproduction plus frames at 20 Hz.

    ``frame_times`` are relative to the start of the scan (``scan_start``,
    an absolute log time); control records cover approach, settling and scan.
    """

    t: np.ndarray
    x_c: np.ndarray
    x_d: np.ndarray
    f_meas: np.ndarray
    f_target_mean: np.ndarray
    f_target_std: np.ndarray
    frames: np.ndarray
    frame_times: np.ndarray
    scan_start: float
    plan: ScanPlan
    metadata: dict = field(default_factory=dict)

    def __len__(self):
        return self.t.shape[0]

    @property
    def dt(self) -> float:
        return float(self.metadata.get("dt", self.t[1] - self.t[0] if len(self) > 1 else 0.0))

    def scan_mask(self) -> np.ndarray:
        # the first scan record sits at scan_start; a step rounding error must not drop it
        return self.t >= self.scan_start - 0.5 * self.dt

    def force_profile(self):
        """(progress, measured force) over the scan phase, progress strictly increasing."""
        mask = self.scan_mask()
        s = np.array([self.plan.progress(x) for x in self.x_d[mask]])
        f = self.f_meas[mask]
        keep = np.concatenate([[True], np.diff(s) > 0]) if s.size else np.zeros(0, bool)
        return s[keep], f[keep]

    def table(self) -> np.ndarray:
        return np.column_stack([self.t, self.x_c, self.x_d, self.f_meas, self.f_target_mean,
                                self.f_target_std])

    def save(self, directory) -> Path:
        root = Path(directory)
        (root / "frames").mkdir(parents=True, exist_ok=True)
        lines = [",".join(LOG_COLUMNS)]
        lines += [",".join(repr(float(v)) for v in row) for row in self.table()]
        (root / "scan_log.csv").write_text("\n".join(lines) + "\n")
        names = []
        for k, frame in enumerate(self.frames):
            name = f"frame_{k:05d}.pgm"
            write_pgm(root / "frames" / name, frame)
            names.append(name)
        manifest = {"scan_start": self.scan_start, "plan": self.plan.to_dict(),
                    "frame_rate": FRAME_RATE, "frame_size": [IMAGE_SIZE, IMAGE_SIZE],
                    "frames": [{"file": n, "t": float(t)} for n, t in zip(names, self.frame_times)],
                    "metadata": self.metadata}
        (root / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
        return root

    @classmethod
    def load(cls, directory) -> "ScanLog":
        root = Path(directory)
        try:
            manifest = json.loads((root / "manifest.json").read_text())
            lines = (root / "scan_log.csv").read_text().splitlines()
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read scan log in {root}: {exc}") from exc
        if tuple(lines[0].split(",")) != LOG_COLUMNS:
            raise DataError(f"{root / 'scan_log.csv'}: unexpected header")
        a = np.array([[float(v) for v in line.split(",")] for line in lines[1:] if line], ndmin=2)
        frames = np.array([read_pgm(root / "frames" / f["file"]) for f in manifest["frames"]])
        times = np.array([f["t"] for f in manifest["frames"]], dtype=float)
        return cls(a[:, 0], a[:, 1:4], a[:, 4:7], a[:, 7], a[:, 8], a[:, 9],
                   frames.reshape(-1, IMAGE_SIZE, IMAGE_SIZE), times, float(manifest["scan_start"]),
                   ScanPlan.from_dict(manifest["plan"]), manifest.get("metadata", {}))


def write_pgm(path, image):
    data = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    header = f"P5\n{data.shape[1]} {data.shape[0]}\n255\n".encode("ascii")
    Path(path).write_bytes(header + data.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if len(parts) < 5 or parts[0] != b"P5" or parts[3] != b"255":
        raise DataError(f"{path}: not an 8-bit binary PGM")
    w, h = int(parts[1]), int(parts[2])
    data = np.frombuffer(parts[4][: w * h], dtype=np.uint8)
    if data.size != w * h:
        raise DataError(f"{path}: truncated image data")
    return data.reshape(h, w).astype(float) / 255.0


class _Recorder:
    def __init__(self):
        self.rows = []
        self.frames = []
        self.frame_times = []

    def log(self, t, state, f_meas, mean, std):
        self.rows.append((t, *state.x_c, *state.x_d, f_meas, mean, std))

    def build(self, scan_start, plan, metadata) -> ScanLog:
        a = np.array(self.rows, dtype=float).reshape(-1, len(LOG_COLUMNS))
        frames = np.array(self.frames).reshape(-1, IMAGE_SIZE, IMAGE_SIZE)
        return ScanLog(a[:, 0], a[:, 1:4], a[:, 4:7], a[:, 7], a[:, 8], a[:, 9], frames,
                       np.array(self.frame_times, dtype=float), scan_start, plan, metadata)


def apply_via_points(model: KMPModel, via_points, r_threshold: float = 5e-4) -> KMPModel:
    """Insert via-points into the model's reference database and retrain."""
    reference = model.reference
    for vp in via_points:
        reference = insert_via_point(reference, vp, r_threshold)
    meta = dict(model.metadata)
    meta["via_points"] = meta.get("via_points", []) + [
        {"input": vp.input.tolist(), "mean": vp.mean.tolist(), "covariance": vp.covariance.tolist()}
        for vp in via_points]
    return train_kmp(reference, model.params, meta)


def run_reproduction(model: KMPModel, plan: ScanPlan, phantom: Phantom,
                     params: ControllerParams = ControllerParams(), via_points=(), seed: int = 0,
                     r_threshold: float = 5e-4, feedforward_tau: float = 0.0) -> ScanLog:
    """Approach, settle and scan the phantom under KMP force feedforward.

    The desired position descends at ``approach_speed`` until first contact,
    holds for ``settle_time`` while the force builds up, then moves from
    ``start`` to ``end`` at ``speed``. Each control step queries the model at
    the desired position's progress and feeds the negated mean force forward
    on the contact axis. Frames are rendered at 20 Hz from the scan start.
    ``feedforward_tau > 0`` low-passes the feedforward force.
    """
    via_points = list(via_points)
    if via_points:
        model = apply_via_points(model, via_points, r_threshold)
    dt = params.dt
    rng = np.random.default_rng(seed)
    rec = _Recorder()
    start = np.asarray(plan.start, dtype=float)
    end = np.asarray(plan.end, dtype=float)
    length = plan.length
    direction = (end - start) / length if length > 0 else np.zeros(3)
    frame_every = int(round(1.0 / (FRAME_RATE * dt)))

    metadata = {"dt": dt, "seed": seed, "phantom": phantom.to_dict(), "controller": params.to_dict(),
                "training_ids": list(model.metadata.get("training_ids", [])),
                "via_points": model.metadata.get("via_points", []),
                "feedforward_tau": feedforward_tau}

    state = ProbeState.at_rest(start + np.array([0.0, 0.0, phantom.surface_height + plan.approach_height]))
    step = 0
    filtered = None

    def advance(x_d_next, s):
        nonlocal state, step, filtered
        h_e = phantom_contact_force(phantom, state.x_c)
        mean, std = query_force_reference(model, s)
        target = mean
        if feedforward_tau > 0:
            filtered = mean if filtered is None else filtered + dt / (feedforward_tau + dt) * (mean - filtered)
            target = filtered
        rec.log(step * dt, state, h_e[2], mean, std)
        mu_f = np.array([0.0, 0.0, -target]) if contact_made else np.zeros(3)
        state = controller_step(state, h_e, x_d_next, mu_f, params)
        step += 1
        if np.linalg.norm(state.error) > DIVERGENCE_LIMIT or not np.all(np.isfinite(state.x_c)):
            metadata["aborted"] = True
            raise DivergenceError(
                f"controller diverged at t = {step * dt:.3f} s (|x_e| = {np.linalg.norm(state.error):.3g} m)",
                rec.build(float("nan"), plan, metadata))

    contact_made = False
    while not contact_made:
        if step * dt > plan.max_approach_time:
            raise DivergenceError("no contact during the approach phase", rec.build(float("nan"), plan, metadata))
        x_d = state.x_d - np.array([0.0, 0.0, plan.approach_speed * dt])
        advance(x_d, 0.0)
        contact_made = phantom_contact_force(phantom, state.x_c)[2] > 0
    hold = state.x_d.copy()
    for _ in range(int(round(plan.settle_time / dt))):
        advance(hold, 0.0)

    scan_start = step * dt
    n_scan = int(np.ceil(length / (plan.speed * dt) - 1e-9)) if length > 0 else 0
    k = 0
    while True:
        if k % frame_every == 0:
            force = phantom_contact_force(phantom, state.x_c)
            rec.frames.append(render_synthetic_image(phantom, state.x_c, force, rng))
            rec.frame_times.append(k * dt)
        if k >= n_scan:
            break
        travelled = min((k + 1) * plan.speed * dt, length)
        x_d = hold + direction * travelled
        advance(x_d, plan.progress(state.x_d - hold + start))
        k += 1
    # final record at the end pose
    h_e = phantom_contact_force(phantom, state.x_c)
    mean, std = query_force_reference(model, plan.progress(state.x_d - hold + start))
    rec.log(step * dt, state, h_e[2], mean, std)
    metadata["aborted"] = False
    return rec.build(scan_start, plan, metadata)


def demonstration_frames(demo: Demonstration, phantom: Phantom, seed: int = 0):
    """Render 20 Hz frames along a recorded demonstration (times relative to its start)."""
    rng = np.random.default_rng([seed, zlib.crc32(demo.demo_id.encode())])
    t = demo.t - demo.t[0]
    times = np.arange(0.0, t[-1] + 1e-9, 1.0 / FRAME_RATE)
    x = np.interp(times, t, demo.position[:, 0]) / 1000.0
    y = np.interp(times, t, demo.position[:, 1]) / 1000.0
    force = np.maximum(np.interp(times, t, demo.normal_force()), 0.0)
    frames = []
    for xi, yi, fi in zip(x, y, force):
        z = phantom.surface_height - fi / phantom.tissue_stiffness
        frames.append(render_synthetic_image(phantom, (xi, yi, z), (0.0, 0.0, fi), rng))
    return np.array(frames).reshape(-1, IMAGE_SIZE, IMAGE_SIZE), times


def demonstration_from_log(log: ScanLog, demo_id: str = "executed", scenario: str = "constant") -> Demonstration:
    """The scan phase of a log as a demonstration (positions in mm from the scan start)."""
    mask = log.scan_mask()
    length_mm = max(log.plan.length, 1e-9) * 1000.0
    t = log.t[mask] - log.scan_start
    progress = np.array([log.plan.progress(x) for x in log.x_d[mask]])
    keep = np.concatenate([[True], np.diff(progress) > 0])
    n = int(keep.sum())
    position = np.column_stack([progress[keep] * length_mm, np.zeros(n), np.zeros(n)])
    force = np.column_stack([np.zeros(n), np.zeros(n), -log.f_meas[mask][keep]])
    return Demonstration(t[keep], position, np.tile([1.0, 0, 0, 0], (n, 1)), force, np.zeros((n, 3)),
                         length_mm, scenario, demo_id)


__all__ = [
    "ControllerParams", "ProbeState", "Phantom", "PHANTOM_PRESETS", "ScanPlan", "ScanLog",
    "controller_step", "phantom_contact_force", "render_synthetic_image", "query_force_reference",
    "run_reproduction", "apply_via_points", "demonstration_frames", "demonstration_from_log",
    "get_phantom",
]
