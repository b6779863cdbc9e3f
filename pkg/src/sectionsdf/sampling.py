"""In-plane labeled sample bank and per-iteration volume samples."""

from __future__ import annotations

import enum
import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import (
    Contour2D,
    CrossSectionSet,
    Plane,
    contour_depths,
    plane_window,
    point_in_contours,
    points_in_convex,
    sdf2d_eval,
)

logger = logging.getLogger(__name__)

FAR_LABEL = 0.1
ATTEMPT_CAP = 1_000_000
_REJECTION_CHUNK = 8192


class Tag(enum.IntEnum):
    ON_CONTOUR = 0
    FIXED_RADIUS = 1
    UNIFORM = 2
    ADAPTIVE_INTERIOR = 3


@dataclass(frozen=True)
class SamplingSchedule:
    relabel_epochs: tuple[int, ...] = (0, 50, 100, 200, 300)
    epsilons: tuple[float, ...] = (2.0**-5, 2.0**-6, 2.0**-7, 2.0**-8, 2.0**-8)
    per_edge: int = 25
    uniform_per_plane: int = 10_000
    min_interior_per_contour: int = 50
    adaptive: bool = True

    def __post_init__(self):
        if len(self.relabel_epochs) != len(self.epsilons):
            raise ValueError("relabel_epochs and epsilons must have equal length")
        if any(b > a for a, b in zip(self.epsilons, self.epsilons[1:])):
            raise ValueError("epsilons must be non-increasing")
        if list(self.relabel_epochs) != sorted(set(self.relabel_epochs)):
            raise ValueError("relabel_epochs must be strictly increasing")

    def stage_for_epoch(self, epoch: int) -> int:
        return int(np.searchsorted(self.relabel_epochs, epoch, side="right")) - 1


@dataclass(frozen=True)
class LabeledSample:
    x: np.ndarray
    f2d: float
    tag: Tag
    plane_id: int


@dataclass
class SampleBank:
    """Structure-of-arrays view of the labeled in-plane samples."""

    x: np.ndarray
    f2d: np.ndarray
    tag: np.ndarray
    plane_id: np.ndarray
    stage: int = 0
    seed: int = 0
    epsilon: float = float("nan")
    warnings: list[str] = field(default_factory=list)

    def __len__(self):
        return len(self.f2d)

    def __getitem__(self, i) -> LabeledSample:
        return LabeledSample(self.x[i], float(self.f2d[i]), Tag(int(self.tag[i])), int(self.plane_id[i]))

    def counts(self) -> dict[Tag, int]:
        return {t: int(np.count_nonzero(self.tag == t)) for t in Tag}

    @classmethod
    def concat(cls, parts: list["SampleBank"], **kw) -> "SampleBank":
        if not parts:
            return cls(np.zeros((0, 3)), np.zeros(0), np.zeros(0, np.uint8), np.zeros(0, np.uint32), **kw)
        return cls(
            np.concatenate([p.x for p in parts]),
            np.concatenate([p.f2d for p in parts]),
            np.concatenate([p.tag for p in parts]).astype(np.uint8),
            np.concatenate([p.plane_id for p in parts]).astype(np.uint32),
            warnings=[w for p in parts for w in p.warnings],
            **kw,
        )


def _bank(x, f2d, tag: Tag, plane_id: int) -> SampleBank:
    n = len(f2d)
    return SampleBank(
        np.asarray(x, dtype=np.float64).reshape(n, 3),
        np.asarray(f2d, dtype=np.float64),
        np.full(n, int(tag), dtype=np.uint8),
        np.full(n, plane_id, dtype=np.uint32),
    )


def _on_contour_2d(contour: Contour2D, per_edge: int) -> tuple[np.ndarray, np.ndarray]:
    """Evenly spaced edge midpoints; returns points and their edge indices."""
    a, b = contour.edges
    t = (np.arange(per_edge) + 0.5) / per_edge
    pts = a[:, None, :] + t[None, :, None] * (b - a)[:, None, :]
    edge_id = np.repeat(np.arange(len(a)), per_edge)
    return pts.reshape(-1, 2), edge_id


def sample_on_contour(contour: Contour2D, plane: Plane, per_edge: int = 25, plane_id: int = 0) -> SampleBank:
    ab, _ = _on_contour_2d(contour, per_edge)
    return _bank(plane.to_world(ab), np.zeros(len(ab)), Tag.ON_CONTOUR, plane_id)


def sample_fixed_radius(
    contour: Contour2D,
    plane: Plane,
    contours: list[Contour2D],
    eps: float,
    per_edge: int = 25,
    plane_id: int = 0,
) -> SampleBank:
    """Two offsets (+eps outward, -eps inward) per on-contour sample.

    Labels are the true 2D SDF at the offset point, which differs from +-eps
    wherever the structure is thinner than eps.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    ab, edge_id = _on_contour_2d(contour, per_edge)
    a, b = contour.edges
    e = b - a
    # CCW contour: right-hand normal points outward
    n = np.stack([e[:, 1], -e[:, 0]], axis=1) / np.linalg.norm(e, axis=1, keepdims=True)
    off = n[edge_id] * eps
    pts = np.concatenate([ab + off, ab - off])
    return _bank(plane.to_world(pts), sdf2d_eval(pts, contours), Tag.FIXED_RADIUS, plane_id)


def sample_uniform_plane(
    plane: Plane,
    contours: list[Contour2D],
    rng: np.random.Generator,
    count: int = 10_000,
    plane_id: int = 0,
) -> SampleBank:
    """`count` points uniform over the plane's intersection with [-1, 1]^3."""
    window = plane_window(plane)
    if len(window) < 3:
        raise ValueError(f"plane {plane_id} does not intersect the domain")
    lo, hi = window.min(axis=0), window.max(axis=0)
    kept = []
    n_kept = 0
    while n_kept < count:
        cand = rng.uniform(lo, hi, size=(max(2 * (count - n_kept), 64), 2))
        cand = cand[points_in_convex(cand, window)]
        kept.append(cand)
        n_kept += len(cand)
    ab = np.concatenate(kept)[:count]
    labels = sdf2d_eval(ab, contours) if contours else np.full(count, FAR_LABEL)
    return _bank(plane.to_world(ab), labels, Tag.UNIFORM, plane_id)


def sample_adaptive_interior(
    contour: Contour2D,
    plane: Plane,
    contours: list[Contour2D],
    rng: np.random.Generator,
    threshold: int = 50,
    plane_id: int = 0,
    contour_id: str = "",
    attempt_cap: int = ATTEMPT_CAP,
) -> SampleBank:
    """Rejection-sample the contour's bounding box until `threshold` interior hits.

    A point is kept when it lies inside this contour and is interior under the
    plane's even-odd rule, so holes nested in the contour are never sampled.
    """
    lo, hi = contour.vertices.min(axis=0), contour.vertices.max(axis=0)
    kept = []
    n_kept = 0
    attempts = 0
    while n_kept < threshold and attempts < attempt_cap:
        n = min(_REJECTION_CHUNK, attempt_cap - attempts)
        cand = rng.uniform(lo, hi, size=(n, 2))
        attempts += n
        own = point_in_contours(cand, [contour])
        cand = cand[own]
        if len(cand):
            cand = cand[point_in_contours(cand, contours)]
        kept.append(cand)
        n_kept += len(cand)
    ab = np.concatenate(kept)[:threshold] if kept else np.zeros((0, 2))
    bank = _bank(plane.to_world(ab), sdf2d_eval(ab, contours) if len(ab) else np.zeros(0), Tag.ADAPTIVE_INTERIOR, plane_id)
    if len(ab) < threshold:
        msg = f"contour {contour_id}: only {len(ab)} interior samples after {attempts} attempts"
        logger.warning(msg)
        bank.warnings.append(msg)
    return bank


def _plane_rng(seed: int, stage: int, plane_id: int) -> np.random.Generator:
    return np.random.default_rng([seed, stage, plane_id, 0x5A4D])


def _plane_bank(sections: CrossSectionSet, i: int, schedule: SamplingSchedule, stage: int, seed: int) -> SampleBank:
    sec = sections.sections[i]
    eps = schedule.epsilons[stage]
    contours = list(sec.contours)
    rng = _plane_rng(seed, stage, i)
    on, fixed, interior = [], [], []
    depths = contour_depths(contours) if schedule.adaptive and len(contours) > 1 else [0] * len(contours)
    for j, c in enumerate(contours):
        on.append(sample_on_contour(c, sec.plane, schedule.per_edge, i))
        fixed.append(sample_fixed_radius(c, sec.plane, contours, eps, schedule.per_edge, i))
        # holes (odd depth) bound exterior regions; their material side is sampled via the enclosing contour
        if schedule.adaptive and depths[j] % 2 == 0:
            interior.append(
                sample_adaptive_interior(
                    c, sec.plane, contours, rng, schedule.min_interior_per_contour, i, f"{i}:{j}"
                )
            )
    uniform = sample_uniform_plane(sec.plane, contours, rng, schedule.uniform_per_plane, i)
    return SampleBank.concat(on + fixed + [uniform] + interior)


def build_sample_bank(
    sections: CrossSectionSet,
    schedule: SamplingSchedule = SamplingSchedule(),
    stage: int = 0,
    seed: int = 0,
    threads: int = 1,
) -> SampleBank:
    """All sample families for every plane, in plane order then family order."""
    if not 0 <= stage < len(schedule.relabel_epochs):
        raise ValueError(f"stage {stage} outside schedule")
    idx = range(len(sections.sections))
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(lambda i: _plane_bank(sections, i, schedule, stage, seed), idx))
    else:
        parts = [_plane_bank(sections, i, schedule, stage, seed) for i in idx]
    return SampleBank.concat(parts, stage=stage, seed=seed, epsilon=schedule.epsilons[stage])


def sample_regularization_batch(count: int, seed: int, iteration: int) -> np.ndarray:
    """i.i.d. uniform points in [-1, 1]^3, reproducible from (seed, iteration)."""
    if count <= 0:
        raise ValueError("count must be positive")
    rng = np.random.default_rng([seed, iteration, 0x3E6])
    return rng.uniform(-1.0, 1.0, size=(count, 3))


# bank cache: little-endian header then packed records
_BANK_MAGIC = b"CSBK"
_BANK_VERSION = 1
_BANK_HEADER = struct.Struct("<4sHBQ")
_BANK_RECORD = np.dtype([("x", "<f8", (3,)), ("f2d", "<f8"), ("tag", "u1"), ("plane_id", "<u4")])


def save_bank(bank: SampleBank, path) -> None:
    rec = np.empty(len(bank), dtype=_BANK_RECORD)
    rec["x"] = bank.x
    rec["f2d"] = bank.f2d
    rec["tag"] = bank.tag
    rec["plane_id"] = bank.plane_id
    header = _BANK_HEADER.pack(_BANK_MAGIC, _BANK_VERSION, bank.stage, bank.seed)
    Path(path).write_bytes(header + rec.tobytes())


def load_bank(path, schedule: SamplingSchedule | None = None) -> SampleBank:
    data = Path(path).read_bytes()
    if len(data) < _BANK_HEADER.size:
        raise ValueError("bank file truncated")
    magic, version, stage, seed = _BANK_HEADER.unpack_from(data)
    if magic != _BANK_MAGIC:
        raise ValueError("bad magic")
    if version != _BANK_VERSION:
        raise ValueError(f"unsupported bank version {version}")
    body = data[_BANK_HEADER.size :]
    if len(body) % _BANK_RECORD.itemsize:
        raise ValueError("bank file truncated")
    rec = np.frombuffer(body, dtype=_BANK_RECORD)
    eps = (schedule or SamplingSchedule()).epsilons[stage]
    return SampleBank(
        rec["x"].astype(np.float64),
        rec["f2d"].astype(np.float64),
        rec["tag"].copy(),
        rec["plane_id"].astype(np.uint32),
        stage=stage,
        seed=seed,
        epsilon=eps,
    )
