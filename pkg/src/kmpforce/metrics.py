"""Force-tracking and image-similarity metrics for executed scans."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from kmpforce.demo_data import Demonstration
from kmpforce.errors import DataError

PSNR_CAP = 100.0
ZERO_MSE = 1e-12


def _profile(progress, force, what):
    s = np.asarray(progress, dtype=float).reshape(-1)
    f = np.asarray(force, dtype=float).reshape(-1)
    if s.shape != f.shape or s.size == 0:
        raise DataError(f"{what}: progress and force must be nonempty and equally long")
    if s.size > 1 and np.any(np.diff(s) <= 0):
        raise DataError(f"{what}: progress must be strictly increasing")
    return s, f


def force_rmse(executed, reference) -> float:
    """RMSE between two (progress, force) profiles on the reference grid.

    The executed profile is linearly interpolated onto the reference
    progress values that fall inside both progress ranges.
    """
    se, fe = _profile(*executed, "executed profile")
    sr, fr = _profile(*reference, "reference profile")
    lo, hi = max(se[0], sr[0]), min(se[-1], sr[-1])
    keep = (sr >= lo) & (sr <= hi)
    if lo > hi or not keep.any():
        raise DataError("executed and reference progress ranges do not overlap")
    diff = np.interp(sr[keep], se, fe) - fr[keep]
    return float(np.sqrt(np.mean(diff * diff)))


def psnr(image, reference, max_value: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB, capped at 100 dB for identical images."""
    a = np.asarray(image, dtype=float)
    b = np.asarray(reference, dtype=float)
    if a.shape != b.shape:
        raise DataError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse < ZERO_MSE:
        return PSNR_CAP
    return float(min(10.0 * np.log10(max_value ** 2 / mse), PSNR_CAP))


def zncc(image, reference) -> float:
    """Zero-mean normalized cross-correlation in [-1, 1].

    Raises ``ValueError`` when either image has zero variance.
    """
    a = np.asarray(image, dtype=float)
    b = np.asarray(reference, dtype=float)
    if a.shape != b.shape:
        raise DataError(f"image shapes differ: {a.shape} vs {b.shape}")
    a = a - a.mean()
    b = b - b.mean()
    na, nb = np.sqrt((a * a).sum()), np.sqrt((b * b).sum())
    if na == 0 or nb == 0:
        raise ValueError("ZNCC is undefined for a constant image")
    return float(np.clip((a * b).sum() / (na * nb), -1.0, 1.0))


def pair_frames(times, reference_times) -> np.ndarray:
    """Index of the nearest reference frame for every time (ties go to the earlier frame)."""
    t = np.asarray(times, dtype=float)
    r = np.asarray(reference_times, dtype=float)
    if r.size == 0:
        raise DataError("no reference frames to pair with")
    if r.size > 1 and np.any(np.diff(r) <= 0):
        raise DataError("reference frame times must be strictly increasing")
    right = np.clip(np.searchsorted(r, t, side="left"), 0, r.size - 1)
    left = np.clip(right - 1, 0, r.size - 1)
    use_left = np.abs(t - r[left]) <= np.abs(r[right] - t)
    return np.where(use_left, left, right)


@dataclass
class FramedDemonstration:
    """A validation recording: force profile plus frames with times from its start."""

    demo: Demonstration
    frames: np.ndarray
    frame_times: np.ndarray

    @property
    def demo_id(self) -> str:
        return self.demo.demo_id


def _stats(values):
    v = np.asarray(values, dtype=float)
    v = v[np.isfinite(v)]
    if v.size == 0:
        return {"mean": None, "std": None}
    return {"mean": float(v.mean()), "std": float(v.std())}


@dataclass
class EvaluationReport:
    per_demo: list
    summary: dict
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"summary": self.summary, "per_demo": self.per_demo, "metadata": self.metadata}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def per_demo_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["demo_id", "force_rmse", "psnr", "zncc", "frame_pairs", "zncc_undefined"])
        for row in self.per_demo:
            w.writerow([row["demo_id"], _fmt(row["force_rmse"]), _fmt(row["psnr"]), _fmt(row["zncc"]),
                        row["frame_pairs"], row["zncc_undefined"]])
        return buf.getvalue()

    def summary_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "mean", "std"])
        for name in ("force_rmse", "psnr", "zncc"):
            w.writerow([name, _fmt(self.summary[name]["mean"]), _fmt(self.summary[name]["std"])])
        return buf.getvalue()


def _fmt(v):
    return "" if v is None else repr(float(v))


def evaluate_scan(log, validation, training_ids=None) -> EvaluationReport:
    """Score an executed scan against each held-out validation recording.

    ``log`` is a :class:`~kmpforce.control.ScanLog`. Force RMSE uses each
    validation demonstration's (progress, normal force) profile as the
    reference. Every executed frame is paired with the validation frame
    nearest in scan time. Per-demo values are averaged over frame pairs and
    the summary holds mean and std across validation demos. Validation ids
    that also appear among the training ids (by default those recorded in
    the log) are rejected.
    """
    if training_ids is None:
        training_ids = log.metadata.get("training_ids", [])
    training_ids = list(training_ids)
    executed_profile = log.force_profile()
    validation = list(validation)
    if not validation:
        raise DataError("evaluation needs at least one validation recording")
    leaked = sorted(set(training_ids) & {v.demo_id for v in validation})
    if leaked:
        raise DataError(f"validation demonstrations were used for training: {', '.join(leaked)}")
    frames = np.asarray(log.frames, dtype=float)
    times = np.asarray(log.frame_times, dtype=float)
    rows = []
    for v in validation:
        ref_profile = (v.demo.progress(), v.demo.normal_force())
        s, f = ref_profile
        keep = np.concatenate([[True], np.diff(s) > 0])
        rmse = force_rmse(executed_profile, (s[keep], f[keep]))
        p_vals, z_vals, undefined = [], [], 0
        if frames.shape[0] and len(v.frames):
            idx = pair_frames(times, v.frame_times)
            for img, j in zip(frames, idx):
                p_vals.append(psnr(img, v.frames[j]))
                try:
                    z_vals.append(zncc(img, v.frames[j]))
                except ValueError:
                    undefined += 1
        rows.append({"demo_id": v.demo_id, "force_rmse": rmse,
                     "psnr": float(np.mean(p_vals)) if p_vals else None,
                     "zncc": float(np.mean(z_vals)) if z_vals else None,
                     "frame_pairs": len(p_vals), "zncc_undefined": undefined})
    summary = {name: _stats([r[name] if r[name] is not None else np.nan for r in rows])
               for name in ("force_rmse", "psnr", "zncc")}
    metadata = {"validation_ids": [v.demo_id for v in validation], "training_ids": list(training_ids),
                "image_reference": "synthetic frames rendered along the validation demonstrations"}
    return EvaluationReport(rows, summary, metadata)
