"""Synthetic eye-image corpus with controllable class-conditional cues.

Each identity gets a rendered eye (sclera ellipse, iris, pupil on a skin
background) photographed from the five protocol gaze angles. Cohorts differ
by where their cue lives, scaled by a single signal knob s:

* COVID     - redness concentrated at the medial and lateral conjunctiva
              plus small secretion specks near the corners
* OCULAR    - diffuse redness over the whole sclera plus lid droop
* PULMONARY - slight global pallor, no conjunctival cue
* HEALTHY   - baseline

At s=0 every cue amplitude is zero and the cohorts are statistically
indistinguishable. Cue parameters are drawn once per identity and shared by
all five views, so recovery tests can check both classification and
cell-level attribution against ground truth. This is a verification
scaffold, not a clinical simulation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .capture_protocol import (
    CLASS_ORDER,
    MANIFEST_VERSION,
    PROTOCOL_ORDER,
    CaptureSession,
    CohortLabel,
    DatasetManifest,
    GazeAngle,
    ImageRecord,
    QualityPolicy,
    save_manifest,
)
from .errors import UnknownIdentityError
from .imgio import save_image
from .preprocess import grid_masks, GridSpec, bilinear_resize

DEFAULT_COHORT_COUNTS: Mapping[CohortLabel, int] = {
    CohortLabel.COVID: 104,
    CohortLabel.PULMONARY: 131,
    CohortLabel.OCULAR: 68,
    CohortLabel.HEALTHY: 136,
}

# Recommended collection ratio preset: equal-size negative control groups.
PROTOCOL_RATIO_COUNTS: Mapping[CohortLabel, int] = {
    CohortLabel.COVID: 300,
    CohortLabel.PULMONARY: 100,
    CohortLabel.OCULAR: 100,
    CohortLabel.HEALTHY: 100,
}

_GAZE_SHIFT = {
    GazeAngle.DOWN: (0.0, 0.45),
    GazeAngle.HORIZONTAL: (0.0, 0.0),
    GazeAngle.LEFT: (-0.18, 0.0),
    GazeAngle.RIGHT: (0.18, 0.0),
    GazeAngle.UP: (0.0, -0.45),
}

_DEVICES = ("ccd-a", "cmos-b", "phone-c")
_PALE = np.array([0.95, 0.94, 0.92])
_PUPIL = np.array([0.05, 0.04, 0.04])
_SPECK = np.array([1.0, 0.95, 0.72])


@dataclass(frozen=True)
class SynthConfig:
    n_per_cohort: Mapping[CohortLabel, int] = field(
        default_factory=lambda: dict(DEFAULT_COHORT_COUNTS)
    )
    signal: float = 1.0
    noise_sigma: float = 0.05
    image_w: int = 192
    image_h: int = 96
    seed: int = 0
    grid: GridSpec = field(default_factory=GridSpec)
    crop_h: int = 32
    crop_w: int = 64
    female_rate: float = 0.3269
    age_mean: float = 34.0
    age_std: float = 12.0
    age_min: int = 5
    age_max: int = 66

    def __post_init__(self):
        if not 0.0 <= self.signal <= 1.0:
            raise ValueError("signal strength must lie in [0, 1]")
        if any(n < 0 for n in self.n_per_cohort.values()):
            raise ValueError("cohort counts must be non-negative")


@dataclass
class SynthIdentity:
    """Latent parameters of one rendered person, fixed across all views."""

    identity_id: str
    cohort: CohortLabel
    index: int
    skin: np.ndarray
    sclera: np.ndarray
    iris_color: np.ndarray
    iris_radius: float
    center: tuple[float, float]
    axes: tuple[float, float]  # sclera ellipse semi-axes (a, b)
    openness: float
    side: str
    age: int
    sex: str
    device_id: str
    # Cue latents, already scaled by the signal knob.
    redness_amp: float = 0.0
    diffuse_amp: float = 0.0
    lid_droop: float = 0.0
    pallor: float = 0.0
    speck_count: int = 0
    speck_pos: tuple = ()
    cue_cells: tuple[int, ...] = ()

    def cue_dict(self) -> dict:
        return {
            "identity_id": self.identity_id,
            "cohort": self.cohort.value,
            "redness_amp": self.redness_amp,
            "diffuse_amp": self.diffuse_amp,
            "lid_droop": self.lid_droop,
            "pallor": self.pallor,
            "speck_count": self.speck_count,
            "cue_cells": list(self.cue_cells),
        }


def _identity_order(cfg: SynthConfig) -> list[tuple[CohortLabel, int]]:
    out = []
    for cohort in CLASS_ORDER:
        for j in range(int(cfg.n_per_cohort.get(cohort, 0))):
            out.append((cohort, j))
    return out


def identity_params(cfg: SynthConfig, index: int) -> SynthIdentity:
    """Draw one identity's latents, deterministic from (seed, index).

    Cue amplitudes are base draws multiplied by cfg.signal, so the same
    identity at half signal carries exactly half the amplitude.
    """
    order = _identity_order(cfg)
    if not 0 <= index < len(order):
        raise UnknownIdentityError(f"identity index {index} outside the corpus")
    cohort, within = order[index]
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(index,)))
    w, h = cfg.image_w, cfg.image_h
    s = cfg.signal

    skin = np.array([0.87, 0.74, 0.66]) + rng.uniform(-0.035, 0.035, 3)
    sclera = np.array([0.97, 0.96, 0.95]) + rng.uniform(-0.015, 0.005, 3)
    iris_color = np.clip(np.array([0.35, 0.22, 0.12]) + rng.uniform(-0.08, 0.08, 3), 0, 1)
    center = (
        w / 2.0 + rng.uniform(-5, 5),
        h / 2.0 + rng.uniform(-3, 3),
    )
    a = w * 0.32 + rng.uniform(-4, 4)
    b = h * 0.23 + rng.uniform(-2, 2)
    ident = SynthIdentity(
        identity_id=f"synth-{cohort.value.lower()}-{within:04d}",
        cohort=cohort,
        index=index,
        skin=skin,
        sclera=sclera,
        iris_color=iris_color,
        iris_radius=b * 0.82 + rng.uniform(-1.5, 1.5),
        center=center,
        axes=(a, b),
        openness=0.93 + rng.uniform(-0.05, 0.05),
        side="LEFT_EYE" if rng.random() < 0.5 else "RIGHT_EYE",
        age=int(np.clip(round(rng.normal(cfg.age_mean, cfg.age_std)), cfg.age_min, cfg.age_max)),
        sex="F" if rng.random() < cfg.female_rate else "M",
        device_id=_DEVICES[int(rng.integers(len(_DEVICES)))],
    )

    if cohort is CohortLabel.COVID:
        ident.redness_amp = s * (0.30 + 0.15 * rng.random())
        ident.speck_count = int(2 + rng.integers(0, 4))
        positions = []
        for _ in range(ident.speck_count):
            corner = -1.0 if rng.random() < 0.5 else 1.0
            positions.append(
                (
                    corner * (0.72 + 0.16 * rng.random()),  # fraction of a
                    rng.uniform(-0.45, 0.45),  # fraction of b
                )
            )
        ident.speck_pos = tuple(positions)
    elif cohort is CohortLabel.OCULAR:
        ident.diffuse_amp = s * (0.20 + 0.10 * rng.random())
        ident.lid_droop = s * (0.25 + 0.15 * rng.random())
    elif cohort is CohortLabel.PULMONARY:
        ident.pallor = s * (0.14 + 0.06 * rng.random())

    ident.cue_cells = _cue_cells(cfg, ident)
    return ident


def _grids(w: int, h: int):
    yy, xx = np.mgrid[0:h, 0:w]
    return xx.astype(np.float64), yy.astype(np.float64)


def _corner_redness_map(ident: SynthIdentity, w: int, h: int) -> np.ndarray:
    """Unit-amplitude medial+lateral redness profile (before scaling)."""
    cx, cy = ident.center
    a, b = ident.axes
    xx, yy = _grids(w, h)
    out = np.zeros((h, w))
    for corner in (-1.0, 1.0):
        bx = cx + corner * 0.85 * a
        out += np.exp(
            -((xx - bx) ** 2) / (2 * (0.20 * a) ** 2) - ((yy - cy) ** 2) / (2 * (0.9 * b) ** 2)
        )
    return np.clip(out, 0.0, 1.0)


def _eye_masks(ident: SynthIdentity, angle: GazeAngle, w: int, h: int):
    cx, cy = ident.center
    a, b = ident.axes
    xx, yy = _grids(w, h)
    nx = (xx - cx) / a
    open_b = b * ident.openness * (1.0 - 0.45 * ident.lid_droop)
    lid = open_b * np.sqrt(np.clip(1.0 - nx**2, 0.0, None))
    opening = np.abs(yy - cy) <= lid

    shift_x, shift_y = _GAZE_SHIFT[angle]
    icx = cx + shift_x * a
    icy = cy + shift_y * open_b
    iris = ((xx - icx) ** 2 + (yy - icy) ** 2) <= ident.iris_radius**2
    pupil = ((xx - icx) ** 2 + (yy - icy) ** 2) <= (0.42 * ident.iris_radius) ** 2
    return opening, iris & opening, pupil & opening


def render_view(cfg: SynthConfig, ident: SynthIdentity, angle: GazeAngle) -> np.ndarray:
    """Render one gaze angle of one identity as a float [0,1] image."""
    w, h = cfg.image_w, cfg.image_h
    img = np.empty((h, w, 3))
    img[:] = ident.skin

    opening, iris, pupil = _eye_masks(ident, angle, w, h)
    img[opening] = ident.sclera
    img[iris] = ident.iris_color
    img[pupil] = _PUPIL

    sclera_only = opening & ~iris
    red = np.zeros((h, w))
    if ident.redness_amp > 0:
        red += ident.redness_amp * _corner_redness_map(ident, w, h)
    if ident.diffuse_amp > 0:
        red += ident.diffuse_amp
    if ident.redness_amp > 0 or ident.diffuse_amp > 0:
        amp = np.where(sclera_only, red, 0.0)
        img[..., 0] += amp
        img[..., 1] -= 0.55 * amp
        img[..., 2] -= 0.55 * amp

    if ident.speck_count and cfg.signal > 0:
        cx, cy = ident.center
        a, b = ident.axes
        xx, yy = _grids(w, h)
        for fx, fy in ident.speck_pos:
            sx, sy = cx + fx * a, cy + fy * b * ident.openness
            spot = ((xx - sx) ** 2 + (yy - sy) ** 2) <= 1.6**2
            blend = 0.85 * cfg.signal
            img[spot] = (1 - blend) * img[spot] + blend * _SPECK

    if ident.pallor > 0:
        img += ident.pallor * (_PALE - img)

    view_rng = np.random.default_rng(
        np.random.SeedSequence(cfg.seed, spawn_key=(ident.index, _view_index(angle)))
    )
    img *= 1.0 + view_rng.uniform(-0.015, 0.015)
    if cfg.noise_sigma > 0:
        img += view_rng.normal(0.0, cfg.noise_sigma, img.shape)
    return np.clip(img, 0.0, 1.0)


def _view_index(angle: GazeAngle) -> int:
    return PROTOCOL_ORDER.index(angle)


def ground_truth_box(cfg: SynthConfig, ident: SynthIdentity) -> tuple[int, int, int, int]:
    """Eye bounding box written into the manifest as a detection hint."""
    cx, cy = ident.center
    a, b = ident.axes
    margin = 6.0
    x0 = max(0, int(np.floor(cx - a - margin)))
    y0 = max(0, int(np.floor(cy - b - margin)))
    x1 = min(cfg.image_w, int(np.ceil(cx + a + margin)))
    y1 = min(cfg.image_h, int(np.ceil(cy + b + margin)))
    return (x0, y0, x1 - x0, y1 - y0)


def _cue_cells(cfg: SynthConfig, ident: SynthIdentity) -> tuple[int, ...]:
    """Grid cells carrying the localized cue, from the rendered profile."""
    if ident.cohort is not CohortLabel.COVID:
        return ()
    profile = _corner_redness_map(ident, cfg.image_w, cfg.image_h)
    x, y, w, h = ground_truth_box(cfg, ident)
    crop = bilinear_resize(profile[y : y + h, x : x + w], cfg.crop_h, cfg.crop_w)
    masks = grid_masks(cfg.grid, cfg.crop_h, cfg.crop_w)
    cell_mass = np.array([crop[m].mean() for m in masks])
    keep = cell_mass >= 0.30 * cell_mass.max()
    return tuple(int(i) for i in np.flatnonzero(keep))


def _base_timestamp(index: int) -> str:
    minutes = index * 7
    return f"2020-07-01T{(minutes // 60) % 24:02d}:{minutes % 60:02d}:00Z"


def generate_corpus(cfg: SynthConfig, out_dir: str | Path) -> DatasetManifest:
    """Render the corpus, write images + manifest + cue sidecar, return the
    manifest (with root set to out_dir)."""
    out = Path(out_dir)
    images_dir = out / "images"
    images_dir.mkdir(parents=True, exist_ok=True)

    n_total = len(_identity_order(cfg))
    sessions = []
    cues = {}
    for index in range(n_total):
        ident = identity_params(cfg, index)
        box = ground_truth_box(cfg, ident)
        records: dict[GazeAngle, ImageRecord] = {}
        for angle in PROTOCOL_ORDER:
            img = render_view(cfg, ident, angle)
            rel = f"images/{ident.identity_id}_{angle.value}.png"
            save_image(img, out / rel)
            records[angle] = ImageRecord(
                path=rel,
                angle=angle,
                width=cfg.image_w,
                height=cfg.image_h,
                device_id=ident.device_id,
                boxes=((box[0], box[1], box[2], box[3], ident.side),),
            )
        sessions.append(
            CaptureSession(
                session_id=f"sess-{ident.identity_id}",
                identity_id=ident.identity_id,
                consent=True,
                images=records,
                cohort=ident.cohort,
                created_at=_base_timestamp(index),
                metadata={"age": ident.age, "sex": ident.sex},
            )
        )
        cues[ident.identity_id] = ident.cue_dict()

    policy = QualityPolicy(
        min_width=cfg.image_w,
        min_height=cfg.image_h,
        min_mean_luma=40.0,
        allow_override=True,
    )
    manifest = DatasetManifest(
        version=MANIFEST_VERSION,
        sessions=sessions,
        quality_policy=policy,
        root=out,
    )
    save_manifest(manifest, out / "manifest.json")
    (out / "cues.json").write_text(json.dumps(cues, indent=2, sort_keys=True) + "\n")
    return manifest


def describe_cues(corpus_dir: str | Path, identity_id: str) -> dict:
    """Ground-truth cue parameters and cell indices for one identity."""
    path = Path(corpus_dir) / "cues.json"
    cues = json.loads(path.read_text())
    if identity_id not in cues:
        raise UnknownIdentityError(identity_id)
    return cues[identity_id]
