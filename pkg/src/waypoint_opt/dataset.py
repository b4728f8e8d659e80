"""Task sampling, delay-shifted pair extraction, and the dataset file format.

Training pairs map the vehicle's situation at node ``k - d`` (relative
positions to both waypoints, velocity, Z-Y-X Euler attitude, commanded
thrust) to the optimal body rates and thrust at node ``k + 1``; the integer
delay ``d`` bakes the control latency into the data.  One converged
trajectory with N intervals yields exactly ``N - d`` pairs.

Binary dataset format (little-endian), version 1:

    magic   4 bytes  b"WNCD"
    u32     version
    u32     pair count P
    u32     input dim  (13, or 14 for the heading-feature variant)
    u32     target dim (4)
    f64     delay steps (nominal, at the reference control period)
    f64     dt (mean trajectory grid step)
    f64x6   sampling box (min xyz, max xyz)
    8 bytes config hash (first 8 bytes of the run's hash, raw)
    f64     P x (input+target) row-major pair rows
    f64     input-dim means, input-dim stds, target means, target stds

Readers reject bad magic/version and truncated payloads.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import dynamics as dyn
from .cpc import CpcSolution
from .errors import DatasetFormatError, InvalidInputError, SamplingError

log = logging.getLogger(__name__)

MAGIC = b"WNCD"
VERSION = 1
INPUT_DIM = 13
TARGET_DIM = 4


@dataclass
class TaskSpec:
    """Two-waypoint hover-to-hover task; wp2 is the terminal hover waypoint."""

    start: np.ndarray
    wp1: np.ndarray
    wp2: np.ndarray
    heading_wp1: Optional[float] = None
    heading_end: Optional[float] = None
    seed: int = 0

    def __post_init__(self):
        self.start = np.asarray(self.start, dtype=float)
        self.wp1 = np.asarray(self.wp1, dtype=float)
        self.wp2 = np.asarray(self.wp2, dtype=float)

    def to_dict(self) -> dict:
        return {
            "start": self.start.tolist(),
            "wp1": self.wp1.tolist(),
            "wp2": self.wp2.tolist(),
            "heading_wp1": self.heading_wp1,
            "heading_end": self.heading_end,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        return cls(**d)


@dataclass
class NormStats:
    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: np.ndarray
    y_std: np.ndarray


@dataclass
class DatasetMeta:
    delay_steps: float
    dt: float
    box_min: np.ndarray
    box_max: np.ndarray
    count: int
    config_hash: str = ""


@dataclass
class Dataset:
    X: np.ndarray               # (P, input_dim)
    Y: np.ndarray               # (P, 4)
    normalization: NormStats
    meta: DatasetMeta

    @property
    def n_pairs(self) -> int:
        return self.X.shape[0]


# ---------------------------------------------------------------------------
# Task sampling
# ---------------------------------------------------------------------------

def sample_tasks(
    box_min,
    box_max,
    n: int,
    seed: int,
    min_separation: float = 0.3,
    start: Optional[np.ndarray] = None,
    max_rejections: int = 1000,
) -> list[TaskSpec]:
    """Uniform i.i.d. tasks in an axis-aligned box, rejecting close triples.

    ``start`` pins all start points to one location (the box then only
    constrains the waypoints); by default starts are sampled uniformly too.
    """
    box_min = np.asarray(box_min, dtype=float)
    box_max = np.asarray(box_max, dtype=float)
    if n <= 0:
        raise InvalidInputError("task count must be positive")
    if np.any(box_max <= box_min):
        raise SamplingError("degenerate sampling box")

    rng = np.random.default_rng(seed)
    tasks = []
    for i in range(n):
        for attempt in range(max_rejections):
            if start is None:
                pts = rng.uniform(box_min, box_max, size=(3, 3))
            else:
                pts = np.vstack([np.asarray(start, float), rng.uniform(box_min, box_max, size=(2, 3))])
            d = (
                np.linalg.norm(pts[0] - pts[1]),
                np.linalg.norm(pts[0] - pts[2]),
                np.linalg.norm(pts[1] - pts[2]),
            )
            if min(d) >= min_separation:
                tasks.append(TaskSpec(pts[0], pts[1], pts[2], seed=int(seed) + i))
                break
        else:
            raise SamplingError(
                f"could not satisfy min separation {min_separation} m after {max_rejections} tries"
            )
    return tasks


# ---------------------------------------------------------------------------
# Pair extraction
# ---------------------------------------------------------------------------

def build_policy_input(p, v, q, thrust, wp1, wp2) -> np.ndarray:
    """13-dim policy feature vector; shared by dataset building and flight.

    Layout: [wp1 - p (3), wp2 - p (3), v (3), roll, pitch, yaw, thrust].
    """
    e = dyn.quat_to_euler(np.asarray(q, dtype=float))
    return np.concatenate(
        [
            np.asarray(wp1, float) - np.asarray(p, float),
            np.asarray(wp2, float) - np.asarray(p, float),
            np.asarray(v, float),
            [e.roll, e.pitch, e.yaw, float(thrust)],
        ]
    )


def build_policy_input_heading(p, v, q, thrust, wp1, wp2, psi_wp1, psi_end) -> np.ndarray:
    """14-dim heading-variant features.

    The absolute yaw entry is replaced by the wrapped yaw error to the first
    waypoint's target heading, and the wrapped error to the terminal heading
    is appended: [dp1, dp2, v, roll, pitch, dpsi1, thrust, dpsi2].
    """
    e = dyn.quat_to_euler(np.asarray(q, dtype=float))
    return np.concatenate(
        [
            np.asarray(wp1, float) - np.asarray(p, float),
            np.asarray(wp2, float) - np.asarray(p, float),
            np.asarray(v, float),
            [
                e.roll,
                e.pitch,
                dyn.wrap_angle(e.yaw - psi_wp1),
                float(thrust),
                dyn.wrap_angle(e.yaw - psi_end),
            ],
        ]
    )


def trajectory_to_pairs(solution: CpcSolution, d: int) -> tuple[np.ndarray, np.ndarray]:
    """Delay-shifted state-control pairs from one converged solution.

    Inputs come from node ``k - d``, targets (body rates and thrust) from
    node ``k + 1``, for k in [d, N-1]; exactly ``N - d`` pairs.
    """
    if not solution.converged:
        raise InvalidInputError("refusing to extract pairs from an unconverged solution")
    if d < 0:
        raise InvalidInputError("delay must be non-negative")
    N = solution.node_count
    if N <= d + 1:
        raise InvalidInputError(f"trajectory too short for delay {d}")
    if solution.waypoints.shape[0] != 2:
        raise InvalidInputError("pair extraction expects two-waypoint tasks")

    wp1, wp2 = solution.waypoints[0], solution.waypoints[1]
    S = solution.states
    U = solution.inputs

    src = np.arange(0, N - d)          # node k-d for k in [d, N-1]
    tgt = src + d + 1                  # node k+1

    p = S[src, dyn.SP]
    v = S[src, dyn.SV]
    q = S[src, dyn.SQ]
    e = dyn.quat_to_euler(q)
    X = np.column_stack(
        [
            wp1[None, :] - p,
            wp2[None, :] - p,
            v,
            e.roll,
            e.pitch,
            e.yaw,
            U[src, 0],
        ]
    )
    Y = np.column_stack([S[tgt, dyn.SW], U[tgt, 0]])
    return X, Y


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------

def compute_normalization(X: np.ndarray, Y: np.ndarray) -> NormStats:
    """Per-dimension z-score statistics; rejects constant dimensions."""
    if X.shape[0] < 2:
        raise InvalidInputError("need at least 2 pairs for normalization")
    x_mean, x_std = X.mean(axis=0), X.std(axis=0)
    y_mean, y_std = Y.mean(axis=0), Y.std(axis=0)
    for name, std in (("input", x_std), ("target", y_std)):
        bad = np.where(std < 1e-12)[0]
        if bad.size:
            raise InvalidInputError(f"zero-variance {name} dimension(s): {bad.tolist()}")
    return NormStats(x_mean, x_std, y_mean, y_std)


def normalize(stats: NormStats, X=None, Y=None):
    out = []
    if X is not None:
        out.append((np.asarray(X) - stats.x_mean) / stats.x_std)
    if Y is not None:
        out.append((np.asarray(Y) - stats.y_mean) / stats.y_std)
    return out[0] if len(out) == 1 else tuple(out)


def denormalize(stats: NormStats, Xn=None, Yn=None):
    out = []
    if Xn is not None:
        out.append(np.asarray(Xn) * stats.x_std + stats.x_mean)
    if Yn is not None:
        out.append(np.asarray(Yn) * stats.y_std + stats.y_mean)
    return out[0] if len(out) == 1 else tuple(out)


# ---------------------------------------------------------------------------
# Dataset assembly and file IO
# ---------------------------------------------------------------------------

def build_dataset(
    solutions: list[CpcSolution],
    delay_s: float,
    control_dt: float,
    box_min,
    box_max,
    config_hash: str = "",
) -> Dataset:
    """Aggregate pairs from converged solutions with a physical delay.

    The integer delay per trajectory is ``round(delay_s / dt)`` on that
    trajectory's own grid; unconverged solutions are skipped and logged.
    """
    xs, ys, dts = [], [], []
    skipped = 0
    for i, sol in enumerate(solutions):
        if not sol.converged:
            skipped += 1
            log.warning("skipping unconverged trajectory %d (residuals %s)", i, sol.residuals)
            continue
        d = int(round(delay_s / sol.dt))
        X, Y = trajectory_to_pairs(sol, d)
        xs.append(X)
        ys.append(Y)
        dts.append(sol.dt)
    if not xs:
        raise InvalidInputError("no converged trajectories to build a dataset from")
    X = np.vstack(xs)
    Y = np.vstack(ys)
    stats = compute_normalization(X, Y)
    meta = DatasetMeta(
        delay_steps=float(round(delay_s / control_dt)),
        dt=float(np.mean(dts)),
        box_min=np.asarray(box_min, float),
        box_max=np.asarray(box_max, float),
        count=X.shape[0],
        config_hash=config_hash,
    )
    if skipped:
        log.info("dataset built from %d trajectories (%d skipped)", len(xs), skipped)
    return Dataset(X=X, Y=Y, normalization=stats, meta=meta)


def write_dataset(dataset: Dataset, path: str) -> None:
    if dataset.n_pairs == 0:
        raise DatasetFormatError("refusing to write an empty dataset")
    X, Y = dataset.X, dataset.Y
    st = dataset.normalization
    meta = dataset.meta
    hash_bytes = bytes.fromhex((meta.config_hash or "0" * 16)[:16].ljust(16, "0"))
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IIII", VERSION, X.shape[0], X.shape[1], Y.shape[1]))
        f.write(struct.pack("<dd", meta.delay_steps, meta.dt))
        f.write(np.concatenate([meta.box_min, meta.box_max]).astype("<f8").tobytes())
        f.write(hash_bytes[:8])
        f.write(np.ascontiguousarray(np.hstack([X, Y]), dtype="<f8").tobytes())
        f.write(np.concatenate([st.x_mean, st.x_std, st.y_mean, st.y_std]).astype("<f8").tobytes())


def read_dataset(path: str) -> Dataset:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise DatasetFormatError("bad magic: not a dataset file")
    off = 4
    try:
        version, count, in_dim, out_dim = struct.unpack_from("<IIII", raw, off)
    except struct.error as exc:
        raise DatasetFormatError("truncated header") from exc
    if version != VERSION:
        raise DatasetFormatError(f"unsupported dataset version {version}")
    off += 16
    expected = off + 16 + 48 + 8 + 8 * count * (in_dim + out_dim) + 8 * 2 * (in_dim + out_dim)
    if len(raw) != expected:
        raise DatasetFormatError(f"corrupt dataset: expected {expected} bytes, got {len(raw)}")
    delay_steps, dt = struct.unpack_from("<dd", raw, off)
    off += 16
    box = np.frombuffer(raw, dtype="<f8", count=6, offset=off)
    off += 48
    hash_hex = raw[off:off + 8].hex()
    off += 8
    rows = np.frombuffer(raw, dtype="<f8", count=count * (in_dim + out_dim), offset=off)
    rows = rows.reshape(count, in_dim + out_dim).copy()
    off += 8 * count * (in_dim + out_dim)
    norm = np.frombuffer(raw, dtype="<f8", count=2 * (in_dim + out_dim), offset=off)
    stats = NormStats(
        x_mean=norm[:in_dim].copy(),
        x_std=norm[in_dim: 2 * in_dim].copy(),
        y_mean=norm[2 * in_dim: 2 * in_dim + out_dim].copy(),
        y_std=norm[2 * in_dim + out_dim:].copy(),
    )
    meta = DatasetMeta(
        delay_steps=delay_steps,
        dt=dt,
        box_min=box[:3].copy(),
        box_max=box[3:].copy(),
        count=count,
        config_hash=hash_hex,
    )
    return Dataset(X=rows[:, :in_dim], Y=rows[:, in_dim:], normalization=stats, meta=meta)
