"""Sparse softmax classification over person-level feature vectors.

The linear head on top of the shared cell encoder is trained end-to-end by
minimizing cross-entropy plus an L1 penalty on the head matrix. The penalty
is applied through a proximal (soft-threshold) step after each Adam update,
so irrelevant head weights are driven to exact zeros. Everything is
deterministic given the seeds: weight init, shuffling, and batching all draw
from fixed generators.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .capture_protocol import (
    CLASS_ORDER,
    PROTOCOL_ORDER,
    CaptureSession,
    CohortLabel,
    QualityPolicy,
    ScreeningClass,
    Violation,
    taxonomy_of,
    validate_session,
)
from .errors import (
    EmptySplitError,
    MissingAngleError,
    SessionInvalidError,
    SingleClassSplitError,
)
from .features import (
    EncoderConfig,
    EncoderParams,
    encoder_backward,
    encoder_forward,
    init_encoder,
)
from .imgio import load_image
from .preprocess import (
    DEFAULT_CELL_SIZE,
    DEFAULT_CROP_H,
    DEFAULT_CROP_W,
    BoundingBox,
    GridSpec,
    crop_normalize,
    detect_eyes,
    partition_grid,
)

N_CLASSES = len(CLASS_ORDER)
_CLASS_INDEX = {c: i for i, c in enumerate(CLASS_ORDER)}


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 32
    lr: float = 3e-3
    lr_decay: float = 1.0  # multiplicative, per epoch
    l1_lambda: float = 1e-4
    seed: int = 0
    patience: int = 10

    def __post_init__(self):
        if self.l1_lambda < 0:
            raise ValueError("l1_lambda must be non-negative")

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "lr_decay": self.lr_decay,
            "l1_lambda": self.l1_lambda,
            "seed": self.seed,
            "patience": self.patience,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


@dataclass
class ModelBundle:
    encoder: EncoderParams
    head_w: np.ndarray  # (5*G*d, 4) float32
    head_b: np.ndarray  # (4,) float32
    grid: GridSpec
    encoder_cfg: EncoderConfig
    crop_h: int = DEFAULT_CROP_H
    crop_w: int = DEFAULT_CROP_W
    cell_size: int = DEFAULT_CELL_SIZE
    class_order: tuple[CohortLabel, ...] = CLASS_ORDER
    training_meta: dict = field(default_factory=dict)

    @property
    def version(self) -> str:
        """Short content hash of the weights; used as the served model id."""
        h = hashlib.sha256()
        for name, tensor in self._tensors().items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(tensor, dtype="<f4").tobytes())
        return h.hexdigest()[:12]

    def _tensors(self) -> dict[str, np.ndarray]:
        tensors = dict(self.encoder.tensors())
        tensors["head.w"] = self.head_w
        tensors["head.b"] = self.head_b
        return tensors


@dataclass
class Prediction:
    probs: np.ndarray  # (4,) over CLASS_ORDER, sums to 1
    class_order: tuple[CohortLabel, ...] = CLASS_ORDER

    @property
    def predicted_cohort(self) -> CohortLabel:
        # np.argmax returns the first maximum, i.e. the lowest class index.
        return self.class_order[int(np.argmax(self.probs))]

    @property
    def taxonomy(self) -> ScreeningClass:
        return taxonomy_of(self.predicted_cohort)

    def prob_of(self, cohort: CohortLabel) -> float:
        return float(self.probs[self.class_order.index(cohort)])

    def to_dict(self) -> dict:
        return {
            "probs": {c.value: float(p) for c, p in zip(self.class_order, self.probs)},
            "predicted_cohort": self.predicted_cohort.value,
            "taxonomy": self.taxonomy.value,
        }


# ---------------------------------------------------------------------------
# Session -> cell tensors

@dataclass
class SessionCells:
    """Flattened cell images of one session plus their feature-block index.

    block[i] = view_index * G + cell_index for cells[i]; eye_count[b] is how
    many eyes contribute to block b (mean pooling divides by it).
    """

    cells: np.ndarray  # (C, cell, cell, 3) float32
    block: np.ndarray  # (C,) int32
    eye_count: np.ndarray  # (5*G,) int32
    label: int | None
    session_id: str
    identity_id: str


def prepare_session_cells(
    session: CaptureSession,
    *,
    root: Path | None,
    grid: GridSpec,
    crop_h: int = DEFAULT_CROP_H,
    crop_w: int = DEFAULT_CROP_W,
    cell_size: int = DEFAULT_CELL_SIZE,
) -> SessionCells:
    """Run detection, cropping, and grid partitioning for all five views."""
    g = grid.g
    cells_list: list[np.ndarray] = []
    block_list: list[np.ndarray] = []
    eye_count = np.zeros(len(PROTOCOL_ORDER) * g, dtype=np.int32)
    for vi, angle in enumerate(PROTOCOL_ORDER):
        record = session.images.get(angle)
        if record is None:
            raise MissingAngleError(f"session {session.session_id}: {angle.value} missing")
        image = load_image(record.resolve_path(root))
        hints = None
        if record.boxes:
            hints = [
                (BoundingBox(int(x), int(y), int(w), int(h)), str(side))
                for x, y, w, h, side in record.boxes
            ]
        detections = detect_eyes(image, hints)
        for box, side in detections:
            crop = crop_normalize(
                image, box, out_h=crop_h, out_w=crop_w, side=side, angle=angle
            )
            sector_grid = partition_grid(crop, grid, cell_size=cell_size)
            cells_list.append(sector_grid.cells)
            block_list.append(vi * g + np.arange(g, dtype=np.int32))
            eye_count[vi * g : (vi + 1) * g] += 1
    label = _CLASS_INDEX[session.cohort] if session.cohort is not None else None
    return SessionCells(
        cells=np.concatenate(cells_list, axis=0),
        block=np.concatenate(block_list),
        eye_count=eye_count,
        label=label,
        session_id=session.session_id,
        identity_id=session.identity_id,
    )


def _batch_features(
    samples: Sequence[SessionCells], params: EncoderParams, *, want_cache: bool = False
):
    """Embed every cell of a batch and pool into (B, 5*G*d) person features."""
    n_blocks = samples[0].eye_count.shape[0]
    d = params.embed_dim
    all_cells = np.concatenate([s.cells for s in samples], axis=0)
    offsets = []
    pos = 0
    for i, s in enumerate(samples):
        offsets.append(s.block + i * n_blocks)
        pos += s.cells.shape[0]
    global_block = np.concatenate(offsets)
    inv_eyes = np.concatenate([1.0 / s.eye_count[s.block] for s in samples]).astype(
        params.w1.dtype
    )

    if want_cache:
        emb, cache = encoder_forward(all_cells, params, want_cache=True)
    else:
        emb = encoder_forward(all_cells, params)
        cache = None

    pooled = np.zeros((len(samples) * n_blocks, d), dtype=emb.dtype)
    np.add.at(pooled, global_block, emb * inv_eyes[:, None])
    feats = pooled.reshape(len(samples), n_blocks * d)
    if want_cache:
        return feats, {"cache": cache, "global_block": global_block, "inv_eyes": inv_eyes}
    return feats


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _cross_entropy(probs: np.ndarray, labels: np.ndarray) -> float:
    eps = np.finfo(probs.dtype).tiny
    return float(-np.log(probs[np.arange(len(labels)), labels] + eps).mean())


class _Adam:
    """Plain Adam over a dict of named tensors."""

    def __init__(self, tensors: dict[str, np.ndarray], beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in tensors.items()}
        self.v = {k: np.zeros_like(v) for k, v in tensors.items()}

    def step(self, tensors: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float):
        self.t += 1
        b1t = 1.0 - self.beta1**self.t
        b2t = 1.0 - self.beta2**self.t
        for k, g in grads.items():
            m = self.m[k]
            v = self.v[k]
            m += (1.0 - self.beta1) * (g - m)
            v += (1.0 - self.beta2) * (g * g - v)
            tensors[k] -= lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)

    def vhat(self, name: str) -> np.ndarray:
        return self.v[name] / (1.0 - self.beta2**self.t)


def _l1_prox(w: np.ndarray, threshold: np.ndarray | float) -> np.ndarray:
    """Soft-threshold in place; produces exact zeros."""
    np.copysign(np.maximum(np.abs(w) - threshold, 0.0), w, out=w)
    return w


def train_on_cells(
    train_samples: Sequence[SessionCells],
    val_samples: Sequence[SessionCells],
    cfg: TrainConfig,
    *,
    grid: GridSpec,
    encoder_cfg: EncoderConfig,
    crop_h: int = DEFAULT_CROP_H,
    crop_w: int = DEFAULT_CROP_W,
    cell_size: int = DEFAULT_CELL_SIZE,
) -> ModelBundle:
    """Train encoder + head on pre-extracted cells; returns the bundle with
    the best validation loss seen during the run."""
    if not train_samples or not val_samples:
        raise EmptySplitError("both train and validation splits must be non-empty")
    labels = np.array([s.label for s in train_samples])
    if any(s.label is None for s in train_samples) or any(
        s.label is None for s in val_samples
    ):
        raise EmptySplitError("training requires cohort-labeled sessions")
    if len(np.unique(labels)) < 2:
        raise SingleClassSplitError("training labels are all identical")

    dtype = np.float32
    params = init_encoder(encoder_cfg, dtype=dtype)
    n_blocks = len(PROTOCOL_ORDER) * grid.g
    dim = n_blocks * encoder_cfg.embed_dim
    head_w = np.zeros((dim, N_CLASSES), dtype=dtype)
    head_b = np.zeros(N_CLASSES, dtype=dtype)

    tensors = dict(params.tensors())
    tensors["head.w"] = head_w
    tensors["head.b"] = head_b
    opt = _Adam(tensors)
    rng = np.random.default_rng(cfg.seed)
    val_labels = np.array([s.label for s in val_samples])

    def val_loss() -> float:
        feats = _eval_features(val_samples, params)
        probs = _softmax(feats @ head_w + head_b)
        return _cross_entropy(probs, val_labels)

    best = np.inf
    best_state: dict[str, np.ndarray] | None = None
    best_epoch = -1
    history: list[float] = []
    bad_epochs = 0

    for epoch in range(cfg.epochs):
        lr = cfg.lr * cfg.lr_decay**epoch
        order = rng.permutation(len(train_samples))
        for start in range(0, len(order), cfg.batch_size):
            batch = [train_samples[i] for i in order[start : start + cfg.batch_size]]
            ylab = np.array([s.label for s in batch])
            feats, fcache = _batch_features(batch, params, want_cache=True)
            logits = feats @ head_w + head_b
            probs = _softmax(logits)

            dlogits = probs
            dlogits[np.arange(len(batch)), ylab] -= 1.0
            dlogits /= len(batch)
            grads = {
                "head.w": feats.T @ dlogits,
                "head.b": dlogits.sum(axis=0),
            }
            dfeats = dlogits @ head_w.T
            dpooled = dfeats.reshape(-1, encoder_cfg.embed_dim)
            demb = dpooled[fcache["global_block"]] * fcache["inv_eyes"][:, None]
            enc_grads = encoder_backward(demb, fcache["cache"], params)
            grads.update(enc_grads.tensors())

            opt.step(tensors, grads, lr)
            if cfg.l1_lambda > 0:
                # Proximal step in the Adam metric: per-coordinate threshold.
                thr = lr * cfg.l1_lambda / (np.sqrt(opt.vhat("head.w")) + opt.eps)
                _l1_prox(head_w, thr.astype(dtype))

        loss = val_loss()
        history.append(loss)
        if loss < best - 1e-7:
            best = loss
            best_epoch = epoch
            best_state = {k: v.copy() for k, v in tensors.items()}
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs > cfg.patience:
                break

    assert best_state is not None
    final = EncoderParams(
        w1=best_state["encoder.w1"],
        b1=best_state["encoder.b1"],
        w2=best_state["encoder.w2"],
        b2=best_state["encoder.b2"],
        wp=best_state["encoder.wp"],
        bp=best_state["encoder.bp"],
    )
    return ModelBundle(
        encoder=final,
        head_w=best_state["head.w"],
        head_b=best_state["head.b"],
        grid=grid,
        encoder_cfg=encoder_cfg,
        crop_h=crop_h,
        crop_w=crop_w,
        cell_size=cell_size,
        training_meta={
            "seed": cfg.seed,
            "epochs_run": len(history),
            "best_epoch": best_epoch,
            "l1_lambda": cfg.l1_lambda,
            "val_loss_history": [float(x) for x in history],
            "best_val_loss": float(best),
        },
    )


def _eval_features(
    samples: Sequence[SessionCells], params: EncoderParams, batch: int = 64
) -> np.ndarray:
    chunks = [
        _batch_features(samples[i : i + batch], params)
        for i in range(0, len(samples), batch)
    ]
    return np.concatenate(chunks, axis=0)


def train(
    train_sessions: Sequence[CaptureSession],
    val_sessions: Sequence[CaptureSession],
    cfg: TrainConfig,
    *,
    root: Path | None = None,
    grid: GridSpec | None = None,
    encoder_cfg: EncoderConfig | None = None,
    crop_h: int = DEFAULT_CROP_H,
    crop_w: int = DEFAULT_CROP_W,
    cell_size: int = DEFAULT_CELL_SIZE,
) -> ModelBundle:
    """Train from raw sessions (images on disk); see :func:`train_on_cells`."""
    if not train_sessions or not val_sessions:
        raise EmptySplitError("both train and validation splits must be non-empty")
    train_ids = {s.identity_id for s in train_sessions}
    overlap = train_ids & {s.identity_id for s in val_sessions}
    if overlap:
        raise ValueError(f"train/val identity overlap: {sorted(overlap)[:3]}")
    grid = grid or GridSpec()
    encoder_cfg = encoder_cfg or EncoderConfig(seed=cfg.seed)
    prep = lambda s: prepare_session_cells(
        s, root=root, grid=grid, crop_h=crop_h, crop_w=crop_w, cell_size=cell_size
    )
    return train_on_cells(
        [prep(s) for s in train_sessions],
        [prep(s) for s in val_sessions],
        cfg,
        grid=grid,
        encoder_cfg=encoder_cfg,
        crop_h=crop_h,
        crop_w=crop_w,
        cell_size=cell_size,
    )


def predict_cells(bundle: ModelBundle, sample: SessionCells) -> Prediction:
    """Predict from pre-extracted cells (float64 head for stable attribution)."""
    feats = _batch_features([sample], bundle.encoder)[0].astype(np.float64)
    logits = feats @ bundle.head_w.astype(np.float64) + bundle.head_b.astype(np.float64)
    return Prediction(probs=_softmax(logits))


def _validated_cells(
    bundle: ModelBundle,
    session: CaptureSession,
    *,
    root: Path | None,
    policy: QualityPolicy | None,
) -> SessionCells:
    if policy is not None:
        violations = validate_session(session, policy, root=root)
    else:
        # Structural gate only: all five angles present, consent recorded.
        violations = [
            Violation("MISSING_ANGLE", a, f"no photo for gaze angle {a.value}")
            for a in PROTOCOL_ORDER
            if a not in session.images
        ]
        if not session.consent:
            violations.append(Violation("CONSENT_MISSING", None, "consent not recorded"))
    if violations:
        missing = [v for v in violations if v.code == "MISSING_ANGLE"]
        if missing:
            raise MissingAngleError(", ".join(str(v) for v in missing))
        raise SessionInvalidError(violations)
    return prepare_session_cells(
        session,
        root=root,
        grid=bundle.grid,
        crop_h=bundle.crop_h,
        crop_w=bundle.crop_w,
        cell_size=bundle.cell_size,
    )


def predict(
    bundle: ModelBundle,
    session: CaptureSession,
    *,
    root: Path | None = None,
    policy: QualityPolicy | None = None,
) -> Prediction:
    """Run the full pipeline on one session: detect, crop, grid, embed,
    classify. With a policy the full quality gates run first; without one
    only protocol completeness and consent are enforced."""
    return predict_cells(bundle, _validated_cells(bundle, session, root=root, policy=policy))


@dataclass
class Attribution:
    """Per-(view, cell) contribution to the predicted class logit."""

    scores: np.ndarray  # (5, G) float64
    predicted_cohort: CohortLabel
    logit: float
    bias: float
    prediction: Prediction

    def top_cells(self, view: int, k: int = 3) -> list[int]:
        order = np.argsort(-self.scores[view])
        return [int(i) for i in order[:k]]


def attribution_from_cells(bundle: ModelBundle, sample: SessionCells) -> Attribution:
    feats = _batch_features([sample], bundle.encoder)[0].astype(np.float64)
    w = bundle.head_w.astype(np.float64)
    b = bundle.head_b.astype(np.float64)
    logits = feats @ w + b
    prediction = Prediction(probs=_softmax(logits))
    ci = int(np.argmax(logits))

    d = bundle.encoder_cfg.embed_dim
    g = bundle.grid.g
    n_views = len(PROTOCOL_ORDER)
    blocks = feats.reshape(n_views * g, d)
    w_blocks = w[:, ci].reshape(n_views * g, d)
    scores = (blocks * w_blocks).sum(axis=1).reshape(n_views, g)
    return Attribution(
        scores=scores,
        predicted_cohort=CLASS_ORDER[ci],
        logit=float(logits[ci]),
        bias=float(b[ci]),
        prediction=prediction,
    )


def grid_attribution(
    bundle: ModelBundle,
    session: CaptureSession,
    *,
    root: Path | None = None,
    policy: QualityPolicy | None = None,
) -> Attribution:
    """Score each (view, cell) block's contribution to the predicted logit.

    Block scores plus the class bias reconstruct the logit exactly (linear
    head), which is asserted downstream to 1e-6.
    """
    return attribution_from_cells(
        bundle, _validated_cells(bundle, session, root=root, policy=policy)
    )


# ---------------------------------------------------------------------------
# Bundle persistence: flat little-endian float32 container + JSON manifests.

_WEIGHTS_BIN = "weights.bin"
_WEIGHTS_INDEX = "weights.json"
_CONFIG_FILE = "config.json"


def save_bundle(bundle: ModelBundle, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    index = []
    blobs = []
    offset = 0
    for name, tensor in bundle._tensors().items():
        data = np.ascontiguousarray(tensor, dtype="<f4")
        index.append(
            {
                "name": name,
                "shape": list(data.shape),
                "dtype": "float32",
                "offset": offset,
                "nbytes": data.nbytes,
            }
        )
        blobs.append(data.tobytes())
        offset += data.nbytes
    (out / _WEIGHTS_BIN).write_bytes(b"".join(blobs))
    (out / _WEIGHTS_INDEX).write_text(
        json.dumps({"tensors": index, "total_bytes": offset}, indent=2, sort_keys=True) + "\n"
    )
    config = {
        "format_version": 1,
        "grid": bundle.grid.to_dict(),
        "encoder": bundle.encoder_cfg.to_dict(),
        "crop_h": bundle.crop_h,
        "crop_w": bundle.crop_w,
        "cell_size": bundle.cell_size,
        "class_order": [c.value for c in bundle.class_order],
        "training_meta": bundle.training_meta,
    }
    (out / _CONFIG_FILE).write_text(json.dumps(config, indent=2, sort_keys=True) + "\n")


def load_bundle(bundle_dir: str | Path) -> ModelBundle:
    src = Path(bundle_dir)
    raw = (src / _WEIGHTS_BIN).read_bytes()
    index = json.loads((src / _WEIGHTS_INDEX).read_text())
    tensors: dict[str, np.ndarray] = {}
    for entry in index["tensors"]:
        start = entry["offset"]
        data = np.frombuffer(raw, dtype="<f4", count=entry["nbytes"] // 4, offset=start)
        tensors[entry["name"]] = data.reshape(entry["shape"]).copy()
    config = json.loads((src / _CONFIG_FILE).read_text())
    encoder = EncoderParams(
        w1=tensors["encoder.w1"],
        b1=tensors["encoder.b1"],
        w2=tensors["encoder.w2"],
        b2=tensors["encoder.b2"],
        wp=tensors["encoder.wp"],
        bp=tensors["encoder.bp"],
    )
    return ModelBundle(
        encoder=encoder,
        head_w=tensors["head.w"],
        head_b=tensors["head.b"],
        grid=GridSpec.from_dict(config["grid"]),
        encoder_cfg=EncoderConfig.from_dict(config["encoder"]),
        crop_h=int(config["crop_h"]),
        crop_w=int(config["crop_w"]),
        cell_size=int(config["cell_size"]),
        class_order=tuple(CohortLabel(c) for c in config["class_order"]),
        training_meta=config.get("training_meta", {}),
    )


def head_sparsity(bundle: ModelBundle) -> float:
    """Fraction of exactly-zero entries in the head matrix."""
    return float((bundle.head_w == 0.0).mean())
