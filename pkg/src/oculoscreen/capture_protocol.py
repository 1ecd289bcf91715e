"""Data-collection contract: gaze angles, cohort labels, image quality gates,
and the on-disk dataset manifest.

A complete capture session holds one photo per required gaze angle, all of
which must clear the configured resolution and brightness floors, and the
subject's consent flag must be set before anything downstream may touch the
images.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import (
    DuplicateIdentityError,
    ParseError,
    PolicyOverrideError,
    UnreadableImageError,
)
from .imgio import load_image


class GazeAngle(Enum):
    DOWN = "DOWN"
    HORIZONTAL = "HORIZONTAL"
    LEFT = "LEFT"
    RIGHT = "RIGHT"
    UP = "UP"


#: Capture-protocol order; also the fixed feature-block order downstream.
PROTOCOL_ORDER = (
    GazeAngle.DOWN,
    GazeAngle.HORIZONTAL,
    GazeAngle.LEFT,
    GazeAngle.RIGHT,
    GazeAngle.UP,
)


class CohortLabel(Enum):
    HEALTHY = "HEALTHY"
    COVID = "COVID"
    PULMONARY = "PULMONARY"
    OCULAR = "OCULAR"


#: Fixed class order used by the classifier head and every serialized report.
CLASS_ORDER = (
    CohortLabel.HEALTHY,
    CohortLabel.COVID,
    CohortLabel.PULMONARY,
    CohortLabel.OCULAR,
)


class ScreeningClass(Enum):
    """Coarse result taxonomy: negative, COVID, or some other disease."""

    NEGATIVE = "NEGATIVE"
    COVID = "COVID"
    OTHER = "OTHER"


def taxonomy_of(cohort: CohortLabel) -> ScreeningClass:
    if cohort is CohortLabel.HEALTHY:
        return ScreeningClass.NEGATIVE
    if cohort is CohortLabel.COVID:
        return ScreeningClass.COVID
    return ScreeningClass.OTHER


# Production floors for capture hardware. Synthetic desk-scale corpora relax
# them via allow_override.
DEFAULT_MIN_WIDTH = 1900
DEFAULT_MIN_HEIGHT = 500
DEFAULT_MIN_MEAN_LUMA = 60.0


@dataclass(frozen=True)
class QualityPolicy:
    min_width: int = DEFAULT_MIN_WIDTH
    min_height: int = DEFAULT_MIN_HEIGHT
    min_mean_luma: float = DEFAULT_MIN_MEAN_LUMA
    allow_override: bool = False

    def __post_init__(self):
        if self.min_width <= 0 or self.min_height <= 0:
            raise ValueError("quality floors must be positive")
        relaxed = (
            self.min_width < DEFAULT_MIN_WIDTH or self.min_height < DEFAULT_MIN_HEIGHT
        )
        if relaxed and not self.allow_override:
            raise PolicyOverrideError(
                "resolution floor below the capture default requires allow_override"
            )

    def to_dict(self) -> dict:
        return {
            "min_width": self.min_width,
            "min_height": self.min_height,
            "min_mean_luma": self.min_mean_luma,
            "allow_override": self.allow_override,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QualityPolicy":
        return cls(
            min_width=int(d.get("min_width", DEFAULT_MIN_WIDTH)),
            min_height=int(d.get("min_height", DEFAULT_MIN_HEIGHT)),
            min_mean_luma=float(d.get("min_mean_luma", DEFAULT_MIN_MEAN_LUMA)),
            allow_override=bool(d.get("allow_override", False)),
        )


@dataclass(frozen=True)
class QualityReport:
    resolution_ok: bool
    brightness_ok: bool
    messages: tuple[str, ...] = ()

    @property
    def passes(self) -> bool:
        return self.resolution_ok and self.brightness_ok

    def to_dict(self) -> dict:
        return {
            "resolution_ok": self.resolution_ok,
            "brightness_ok": self.brightness_ok,
            "passes": self.passes,
            "messages": list(self.messages),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QualityReport":
        return cls(
            resolution_ok=bool(d["resolution_ok"]),
            brightness_ok=bool(d["brightness_ok"]),
            messages=tuple(d.get("messages", ())),
        )


@dataclass
class ImageRecord:
    """One captured photo: where it lives plus capture metadata.

    ``boxes`` optionally carries eye bounding boxes as (x, y, w, h, side)
    tuples, side being "LEFT_EYE"/"RIGHT_EYE"; detection passes them through
    instead of running the heuristic scan.
    """

    path: str
    angle: GazeAngle
    width: int
    height: int
    device_id: str = ""
    boxes: tuple[tuple, ...] | None = None
    quality: QualityReport | None = None

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("image dimensions must be at least 1 px")

    def resolve_path(self, root: Path | None) -> Path:
        p = Path(self.path)
        if p.is_absolute() or root is None:
            return p
        return Path(root) / p


@dataclass
class CaptureSession:
    session_id: str
    identity_id: str
    consent: bool
    images: dict[GazeAngle, ImageRecord] = field(default_factory=dict)
    cohort: CohortLabel | None = None
    created_at: str = ""
    metadata: dict = field(default_factory=dict)


@dataclass
class DatasetManifest:
    version: str
    sessions: list[CaptureSession]
    quality_policy: QualityPolicy
    # Directory the image paths are relative to; set on load, never serialized.
    root: Path | None = field(default=None, compare=False)


@dataclass(frozen=True)
class Violation:
    code: str
    angle: GazeAngle | None = None
    message: str = ""

    def __str__(self) -> str:
        if self.angle is not None:
            return f"{self.code}({self.angle.value})"
        return self.code

    def to_dict(self) -> dict:
        return {
            "code": self.code,
            "angle": self.angle.value if self.angle else None,
            "message": self.message,
        }


def mean_luma(image: np.ndarray) -> float:
    """Mean Rec.601 luminance on the 0-255 scale of a float [0,1] image."""
    r, g, b = image[..., 0], image[..., 1], image[..., 2]
    return float((0.299 * r + 0.587 * g + 0.114 * b).mean() * 255.0)


def validate_image(
    record: ImageRecord,
    policy: QualityPolicy,
    *,
    root: Path | None = None,
) -> QualityReport:
    """Run the resolution and brightness gates on one captured photo.

    Decodes the file (raising UnreadableImageError if that fails), checks the
    decoded dimensions against the policy floors and the mean luminance
    against the brightness floor, and names each failed gate in the report
    messages. Pure: the same bytes always produce the same report.
    """
    image = load_image(record.resolve_path(root))
    height, width = image.shape[:2]
    resolution_ok = width >= policy.min_width and height >= policy.min_height
    luma = mean_luma(image)
    brightness_ok = luma >= policy.min_mean_luma

    messages = []
    if not resolution_ok:
        messages.append(
            f"resolution {width}x{height} below floor "
            f"{policy.min_width}x{policy.min_height}"
        )
    if not brightness_ok:
        messages.append(
            f"mean luminance {luma:.1f} below floor {policy.min_mean_luma:.1f}"
        )
    return QualityReport(
        resolution_ok=resolution_ok,
        brightness_ok=brightness_ok,
        messages=tuple(messages),
    )


def validate_session(
    session: CaptureSession,
    policy: QualityPolicy,
    *,
    root: Path | None = None,
) -> list[Violation]:
    """Check one session against the capture protocol.

    Returns one violation per defect (missing angle, unreadable or failing
    image, missing consent); an empty list means the session is COMPLETE.
    Violations are data, not exceptions.
    """
    violations: list[Violation] = []
    for angle in PROTOCOL_ORDER:
        record = session.images.get(angle)
        if record is None:
            violations.append(
                Violation("MISSING_ANGLE", angle, f"no photo for gaze angle {angle.value}")
            )
            continue
        try:
            report = validate_image(record, policy, root=root)
        except UnreadableImageError as exc:
            violations.append(Violation("UNREADABLE_IMAGE", angle, exc.message))
            continue
        if not report.passes:
            violations.append(
                Violation("QUALITY_FAILED", angle, "; ".join(report.messages))
            )
    if not session.consent:
        violations.append(
            Violation("CONSENT_MISSING", None, "informed consent not recorded")
        )
    return violations


def is_complete(
    session: CaptureSession, policy: QualityPolicy, *, root: Path | None = None
) -> bool:
    return not validate_session(session, policy, root=root)


# ---------------------------------------------------------------------------
# Manifest serialization (canonical JSON, round-trip lossless)

MANIFEST_VERSION = "1"


def _session_to_dict(session: CaptureSession) -> dict:
    images = {}
    for angle, rec in session.images.items():
        entry: dict = {
            "path": rec.path,
            "width": rec.width,
            "height": rec.height,
            "device_id": rec.device_id,
        }
        if rec.boxes is not None:
            entry["boxes"] = [list(b) for b in rec.boxes]
        if rec.quality is not None:
            entry["quality"] = rec.quality.to_dict()
        images[angle.value] = entry
    return {
        "session_id": session.session_id,
        "identity_id": session.identity_id,
        "consent": session.consent,
        "cohort": session.cohort.value if session.cohort else None,
        "created_at": session.created_at,
        "metadata": session.metadata,
        "images": images,
    }


def manifest_to_dict(manifest: DatasetManifest) -> dict:
    return {
        "version": manifest.version,
        "quality_policy": manifest.quality_policy.to_dict(),
        "sessions": [_session_to_dict(s) for s in manifest.sessions],
    }


def canonical_json(obj) -> str:
    """Stable serialization so byte comparison works after a round trip."""
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(canonical_json(manifest_to_dict(manifest)), encoding="utf-8")
    tmp.replace(path)


def _parse_session(d: dict, ctx: str) -> CaptureSession:
    for key in ("session_id", "identity_id", "consent", "images"):
        if key not in d:
            raise ParseError(f"{ctx}: missing field '{key}'")
    images: dict[GazeAngle, ImageRecord] = {}
    for angle_name, entry in d["images"].items():
        ictx = f"{ctx}.images.{angle_name}"
        try:
            angle = GazeAngle(angle_name)
        except ValueError:
            raise ParseError(f"{ictx}: unknown gaze angle") from None
        for key in ("path", "width", "height"):
            if key not in entry:
                raise ParseError(f"{ictx}: missing field '{key}'")
        boxes = entry.get("boxes")
        quality = entry.get("quality")
        try:
            images[angle] = ImageRecord(
                path=str(entry["path"]),
                angle=angle,
                width=int(entry["width"]),
                height=int(entry["height"]),
                device_id=str(entry.get("device_id", "")),
                boxes=tuple(tuple(b) for b in boxes) if boxes is not None else None,
                quality=QualityReport.from_dict(quality) if quality else None,
            )
        except (TypeError, ValueError, KeyError) as exc:
            raise ParseError(f"{ictx}: {exc}") from None
    cohort = d.get("cohort")
    try:
        cohort_label = CohortLabel(cohort) if cohort is not None else None
    except ValueError:
        raise ParseError(f"{ctx}: unknown cohort '{cohort}'") from None
    return CaptureSession(
        session_id=str(d["session_id"]),
        identity_id=str(d["identity_id"]),
        consent=bool(d["consent"]),
        images=images,
        cohort=cohort_label,
        created_at=str(d.get("created_at", "")),
        metadata=dict(d.get("metadata", {})),
    )


def manifest_from_dict(data: dict, *, root: Path | None = None) -> DatasetManifest:
    if "version" not in data:
        raise ParseError("manifest: missing top-level 'version' field")
    if "sessions" not in data:
        raise ParseError("manifest: missing top-level 'sessions' field")
    sessions = [
        _parse_session(s, f"sessions[{i}]") for i, s in enumerate(data["sessions"])
    ]

    seen_sessions: set[str] = set()
    cohort_by_identity: dict[str, CohortLabel | None] = {}
    for i, s in enumerate(sessions):
        if s.session_id in seen_sessions:
            raise ParseError(f"sessions[{i}]: duplicate session_id '{s.session_id}'")
        seen_sessions.add(s.session_id)
        if s.identity_id in cohort_by_identity:
            if cohort_by_identity[s.identity_id] != s.cohort:
                raise DuplicateIdentityError(
                    f"identity '{s.identity_id}' appears under two cohort labels"
                )
        else:
            cohort_by_identity[s.identity_id] = s.cohort

    policy = QualityPolicy.from_dict(data.get("quality_policy", {}))
    return DatasetManifest(
        version=str(data["version"]),
        sessions=sessions,
        quality_policy=policy,
        root=root,
    )


def load_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ParseError(f"{path}: {exc}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: line {exc.lineno} col {exc.colno}: {exc.msg}") from None
    return manifest_from_dict(data, root=path.parent)


def identities_of(manifest: DatasetManifest) -> list[tuple[str, CohortLabel]]:
    """Unique (identity, cohort) pairs for labeled sessions, in session order."""
    seen: set[str] = set()
    out: list[tuple[str, CohortLabel]] = []
    for s in manifest.sessions:
        if s.identity_id in seen or s.cohort is None:
            continue
        seen.add(s.identity_id)
        out.append((s.identity_id, s.cohort))
    return out


def sessions_by_identity(
    manifest: DatasetManifest, identity_ids: Iterable[str]
) -> list[CaptureSession]:
    wanted = set(identity_ids)
    return [s for s in manifest.sessions if s.identity_id in wanted]
