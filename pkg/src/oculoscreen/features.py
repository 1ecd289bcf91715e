"""Per-cell convolutional embeddings and person-level feature assembly.

One small shared encoder (two 3x3 conv layers, rectifier activations, global
average pooling, linear projection) maps every grid cell to a d-vector.
Cells are embedded for each eye, mean-pooled across eyes per view, and the
five view blocks are concatenated in the fixed protocol order into a single
person vector of length 5*G*d. Forward and backward passes are written
against plain numpy so gradients can be checked against finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .capture_protocol import PROTOCOL_ORDER, GazeAngle
from .errors import MissingAngleError, ShapeMismatchError
from .preprocess import EyeSide, SectorGrid

# Conv strides: the first layer downsamples, the second refines.
_STRIDE1 = 2
_STRIDE2 = 1


@dataclass(frozen=True)
class EncoderConfig:
    embed_dim: int = 16
    conv_channels: tuple[int, int] = (8, 16)
    kernel: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.embed_dim < 1:
            raise ValueError("embed_dim must be at least 1")

    def to_dict(self) -> dict:
        return {
            "embed_dim": self.embed_dim,
            "conv_channels": list(self.conv_channels),
            "kernel": self.kernel,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(
            embed_dim=int(d.get("embed_dim", 16)),
            conv_channels=tuple(d.get("conv_channels", (8, 16))),
            kernel=int(d.get("kernel", 3)),
            seed=int(d.get("seed", 0)),
        )


@dataclass
class EncoderParams:
    """Weights of the shared cell encoder, in serialization order."""

    w1: np.ndarray  # (k, k, 3, c1)
    b1: np.ndarray  # (c1,)
    w2: np.ndarray  # (k, k, c1, c2)
    b2: np.ndarray  # (c2,)
    wp: np.ndarray  # (c2, d)
    bp: np.ndarray  # (d,)

    def tensors(self) -> dict[str, np.ndarray]:
        return {
            "encoder.w1": self.w1,
            "encoder.b1": self.b1,
            "encoder.w2": self.w2,
            "encoder.b2": self.b2,
            "encoder.wp": self.wp,
            "encoder.bp": self.bp,
        }

    def astype(self, dtype) -> "EncoderParams":
        return EncoderParams(
            *(t.astype(dtype) for t in (self.w1, self.b1, self.w2, self.b2, self.wp, self.bp))
        )

    @property
    def embed_dim(self) -> int:
        return self.wp.shape[1]


def init_encoder(cfg: EncoderConfig, dtype=np.float32) -> EncoderParams:
    """He-initialized weights, deterministic from cfg.seed."""
    rng = np.random.default_rng(cfg.seed)
    k = cfg.kernel
    c1, c2 = cfg.conv_channels
    d = cfg.embed_dim

    def he(shape, fan_in):
        return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)

    return EncoderParams(
        w1=he((k, k, 3, c1), k * k * 3),
        b1=np.zeros(c1, dtype=dtype),
        w2=he((k, k, c1, c2), k * k * c1),
        b2=np.zeros(c2, dtype=dtype),
        wp=he((c2, d), c2),
        bp=np.zeros(d, dtype=dtype),
    )


def _im2col(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    """(N, H, W, C) -> (N, OH, OW, k*k*C) patch matrix."""
    n, h, w, c = x.shape
    oh = (h - k) // stride + 1
    ow = (w - k) // stride + 1
    cols = np.empty((n, oh, ow, k, k, c), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j, :] = x[:, i : i + stride * oh : stride, j : j + stride * ow : stride, :]
    return cols.reshape(n, oh, ow, k * k * c)


def _col2im(dcols: np.ndarray, x_shape: tuple, k: int, stride: int) -> np.ndarray:
    """Scatter-add patch gradients back to the input layout."""
    n, h, w, c = x_shape
    oh = (h - k) // stride + 1
    ow = (w - k) // stride + 1
    d6 = dcols.reshape(n, oh, ow, k, k, c)
    dx = np.zeros(x_shape, dtype=dcols.dtype)
    for i in range(k):
        for j in range(k):
            dx[:, i : i + stride * oh : stride, j : j + stride * ow : stride, :] += d6[:, :, :, i, j, :]
    return dx


def _check_cells(cells: np.ndarray, k: int) -> None:
    if cells.ndim != 4 or cells.shape[-1] != 3:
        raise ShapeMismatchError(f"expected (N, H, W, 3) cells, got {cells.shape}")
    h, w = cells.shape[1], cells.shape[2]
    min_side = k + _STRIDE1 * (k - 1) + (k - 1)  # two valid convs must fit
    if h < min_side or w < min_side:
        raise ShapeMismatchError(f"cell {h}x{w} too small for the encoder")


def encoder_forward(
    cells: np.ndarray, params: EncoderParams, *, want_cache: bool = False
):
    """Embed a batch of cells: (N, H, W, 3) -> (N, d).

    With want_cache=True also returns the intermediates needed by
    :func:`encoder_backward`.
    """
    k = params.w1.shape[0]
    _check_cells(cells, k)
    x = cells.astype(params.w1.dtype, copy=False)
    c1 = params.w1.shape[3]
    c2 = params.w2.shape[3]

    cols1 = _im2col(x, k, _STRIDE1)
    pre1 = cols1 @ params.w1.reshape(-1, c1) + params.b1
    act1 = np.maximum(pre1, 0.0)

    cols2 = _im2col(act1, k, _STRIDE2)
    pre2 = cols2 @ params.w2.reshape(-1, c2) + params.b2
    act2 = np.maximum(pre2, 0.0)

    pooled = act2.mean(axis=(1, 2))
    out = pooled @ params.wp + params.bp
    if not want_cache:
        return out
    cache = {
        "x_shape": x.shape,
        "cols1": cols1,
        "pre1_pos": pre1 > 0,
        "act1_shape": act1.shape,
        "cols2": cols2,
        "pre2_pos": pre2 > 0,
        "act2_hw": act2.shape[1] * act2.shape[2],
        "pooled": pooled,
    }
    return out, cache


@dataclass
class EncoderGrads:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    wp: np.ndarray
    bp: np.ndarray
    cells: np.ndarray | None = None

    def tensors(self) -> dict[str, np.ndarray]:
        return {
            "encoder.w1": self.w1,
            "encoder.b1": self.b1,
            "encoder.w2": self.w2,
            "encoder.b2": self.b2,
            "encoder.wp": self.wp,
            "encoder.bp": self.bp,
        }


def encoder_backward(
    dout: np.ndarray, cache: dict, params: EncoderParams
) -> EncoderGrads:
    """Backpropagate d(loss)/d(embeddings) to parameter gradients."""
    k = params.w1.shape[0]
    c1 = params.w1.shape[3]
    c2 = params.w2.shape[3]

    pooled = cache["pooled"]
    dwp = pooled.T @ dout
    dbp = dout.sum(axis=0)
    dpooled = dout @ params.wp.T

    n_hw = cache["act2_hw"]
    n, oh2, ow2, _ = cache["cols2"].shape
    dact2 = np.broadcast_to(dpooled[:, None, None, :] / n_hw, (n, oh2, ow2, c2))
    dpre2 = np.where(cache["pre2_pos"], dact2, 0.0)

    dpre2_flat = dpre2.reshape(-1, c2)
    cols2_flat = cache["cols2"].reshape(-1, k * k * c1)
    dw2 = (cols2_flat.T @ dpre2_flat).reshape(params.w2.shape)
    db2 = dpre2_flat.sum(axis=0)
    dcols2 = (dpre2_flat @ params.w2.reshape(-1, c2).T).reshape(n, oh2, ow2, -1)
    dact1 = _col2im(dcols2, cache["act1_shape"], k, _STRIDE2)

    dpre1 = np.where(cache["pre1_pos"], dact1, 0.0)
    dpre1_flat = dpre1.reshape(-1, c1)
    cols1_flat = cache["cols1"].reshape(-1, k * k * 3)
    dw1 = (cols1_flat.T @ dpre1_flat).reshape(params.w1.shape)
    db1 = dpre1_flat.sum(axis=0)

    return EncoderGrads(w1=dw1, b1=db1, w2=dw2, b2=db2, wp=dwp, bp=dbp)


def encode_cell(cell: np.ndarray, params: EncoderParams) -> np.ndarray:
    """Embed one cell image into a d-vector."""
    if cell.ndim != 3 or cell.shape[-1] != 3:
        raise ShapeMismatchError(f"expected (H, W, 3) cell, got {cell.shape}")
    return encoder_forward(cell[None], params)[0]


@dataclass
class FeatureVector:
    values: np.ndarray  # (V * G * d,)
    n_views: int
    g: int
    d: int
    identity_id: str | None = None

    def block(self, view: int, cell: int) -> np.ndarray:
        start = (view * self.g + cell) * self.d
        return self.values[start : start + self.d]


def assemble_person_vector(
    session_grids: Mapping[tuple[GazeAngle, EyeSide], SectorGrid],
    params: EncoderParams,
    *,
    identity_id: str | None = None,
) -> FeatureVector:
    """Concatenate per-view, per-cell embeddings into one person vector.

    For each gaze angle every available eye's G cells are embedded with the
    shared encoder, the eyes are mean-pooled per cell, and the five view
    blocks are concatenated in protocol order. Missing angles are an error;
    a single eye is fine (the mean of one grid is itself).
    """
    by_angle: dict[GazeAngle, list[SectorGrid]] = {a: [] for a in PROTOCOL_ORDER}
    for (angle, _side), grid in session_grids.items():
        by_angle[angle].append(grid)

    d = params.embed_dim
    blocks = []
    g_cells = None
    for angle in PROTOCOL_ORDER:
        grids = by_angle[angle]
        if not grids:
            raise MissingAngleError(f"no grids for gaze angle {angle.value}")
        per_eye = np.stack([encoder_forward(grid.cells, params) for grid in grids])
        if g_cells is None:
            g_cells = per_eye.shape[1]
        pooled = per_eye.mean(axis=0)  # (G, d)
        blocks.append(pooled.reshape(-1))
    values = np.concatenate(blocks)
    return FeatureVector(
        values=values,
        n_views=len(PROTOCOL_ORDER),
        g=int(g_cells),
        d=d,
        identity_id=identity_id,
    )
