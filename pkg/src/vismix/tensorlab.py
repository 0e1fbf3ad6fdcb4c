"""Deterministic numeric building blocks on feature grids.

A :class:`FeatureMap` is an H x W x C float64 grid. The three public grid
ops (bilinear resize, continuous bilinear sampling, pixel shuffle) all have
analytic backward passes in :mod:`vismix.kernels`; this module adds the
domain types, validation, and a finite-difference gradient checker with a
registry so every hand-written backward pass in the package can be audited
from one place.
"""

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import kernels


@dataclass(frozen=True)
class FeatureMap:
    """One spatial feature grid, shape (height, width, channels)."""

    data: np.ndarray
    source_resolution: Optional[int] = None

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 3:
            raise ValueError(f"feature map must be 3-d (H, W, C), got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise ValueError(f"feature map dims must be positive, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("feature map contains non-finite entries")
        object.__setattr__(self, "data", np.ascontiguousarray(arr))

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def channels(self):
        return self.data.shape[2]


def bilinear_resize(fmap: FeatureMap, out_h: int, out_w: int) -> FeatureMap:
    """Resize a feature map with align-corners bilinear interpolation.

    Same-shape targets return the input values exactly; constants stay
    constant. The map is linear in the input data, with the backward pass
    available as :func:`vismix.kernels.resize_bwd`.
    """
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target dims must be positive, got {out_h}x{out_w}")
    out = kernels.resize_fwd(fmap.data[None], out_h, out_w)[0]
    return FeatureMap(out, source_resolution=fmap.source_resolution)


def bilinear_sample(fmap: FeatureMap, points) -> np.ndarray:
    """Sample continuous (row, col) locations, clamping to the grid border.

    Returns a (P, channels) array. Gradients flow to both the map data and
    the coordinates (zero once a coordinate is clamped); see
    :func:`vismix.kernels.sample_bwd`.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if pts.shape[0] == 0:
        return np.zeros((0, fmap.channels))
    rows = np.ascontiguousarray(pts[:, 0])[None]
    cols = np.ascontiguousarray(pts[:, 1])[None]
    return kernels.sample_fwd(fmap.data[None], rows, cols)[0]


def pixel_shuffle(fmap: FeatureMap, r: int, direction: str) -> FeatureMap:
    """Trade spatial resolution against channels by factor r (lossless).

    ``shuffle``: (H, W, C) -> (rH, rW, C/r^2); ``unshuffle`` is the exact
    inverse. Within one r x r output sub-block the input channel index
    varies fastest, row-major over the block.
    """
    if r < 1:
        raise ValueError(f"shuffle factor must be positive, got {r}")
    h, w, c = fmap.data.shape
    if direction == "shuffle":
        if c % (r * r) != 0:
            raise ValueError(
                f"channels={c} not divisible by r^2={r * r} for pixel shuffle")
        out = (fmap.data.reshape(h, w, c // (r * r), r, r)
               .transpose(0, 3, 1, 4, 2)
               .reshape(h * r, w * r, c // (r * r)))
    elif direction == "unshuffle":
        if h % r != 0:
            raise ValueError(f"height={h} not divisible by r={r} for pixel unshuffle")
        if w % r != 0:
            raise ValueError(f"width={w} not divisible by r={r} for pixel unshuffle")
        out = (fmap.data.reshape(h // r, r, w // r, r, c)
               .transpose(0, 2, 4, 1, 3)
               .reshape(h // r, w // r, c * r * r))
    else:
        raise ValueError(f"direction must be 'shuffle' or 'unshuffle', got {direction!r}")
    return FeatureMap(np.ascontiguousarray(out),
                      source_resolution=fmap.source_resolution)


def pixel_shuffle_vjp(grad_out: np.ndarray, r: int, direction: str) -> np.ndarray:
    """Backward pass of pixel_shuffle: apply the inverse permutation."""
    inverse = "unshuffle" if direction == "shuffle" else "shuffle"
    return pixel_shuffle(FeatureMap(grad_out), r, inverse).data


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradReport:
    """Outcome of one finite-difference audit of a registered op."""

    op_name: str
    max_rel_error: float
    per_parameter_errors: list


@dataclass
class GradCase:
    """A seeded instance of a differentiable op reduced to a scalar.

    ``arrays`` maps parameter-group / input names to float64 arrays;
    ``loss`` evaluates the scalar on any such dict; ``analytic`` returns the
    hand-written gradient for every entry of ``arrays``.
    """

    arrays: dict
    loss: Callable[[dict], float]
    analytic: Callable[[dict], dict]
    max_probes: int = 24


_REGISTRY: dict = {}


def register_op(op_id: str, builder: Callable[[int], GradCase]) -> None:
    _REGISTRY[op_id] = builder


def registered_ops() -> list:
    return sorted(_REGISTRY)


def grad_check(op_id: str, seed: int, eps: float = 1e-5) -> GradReport:
    """Compare analytic gradients against central finite differences.

    Probes up to ``max_probes`` seeded coordinates per parameter group;
    relative error uses an absolute floor of 1e-6 so identically-zero
    gradients do not divide by noise.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    try:
        builder = _REGISTRY[op_id]
    except KeyError:
        raise KeyError(
            f"unknown op {op_id!r}; registered: {registered_ops()}") from None
    case = builder(seed)
    arrays = {k: np.array(v, dtype=np.float64) for k, v in case.arrays.items()}
    analytic = case.analytic(arrays)
    rng = np.random.default_rng([seed, 0x9E3779B9])
    per_param = []
    for name in sorted(arrays):
        arr = arrays[name]
        grad = np.asarray(analytic[name], dtype=np.float64)
        if grad.shape != arr.shape:
            raise ValueError(
                f"{op_id}: analytic grad for {name!r} has shape {grad.shape}, "
                f"expected {arr.shape}")
        n_probe = min(arr.size, case.max_probes)
        idxs = rng.choice(arr.size, size=n_probe, replace=False)
        worst = 0.0
        flat = arr.reshape(-1)
        for idx in idxs:
            keep = flat[idx]
            flat[idx] = keep + eps
            f_plus = case.loss(arrays)
            flat[idx] = keep - eps
            f_minus = case.loss(arrays)
            flat[idx] = keep
            fd = (f_plus - f_minus) / (2.0 * eps)
            a = grad.reshape(-1)[idx]
            rel = abs(a - fd) / max(abs(a), abs(fd), 1e-6)
            worst = max(worst, rel)
        per_param.append((name, worst))
    max_rel = max((e for _, e in per_param), default=0.0)
    return GradReport(op_name=op_id, max_rel_error=max_rel,
                      per_parameter_errors=per_param)


def contract(out: np.ndarray, probe: np.ndarray) -> float:
    """Reduce an op output to a scalar with a fixed random functional."""
    return float(np.sum(out * probe))


# -- cases for the ops owned by this module --------------------------------


def _linear_case(seed):
    rng = np.random.default_rng([seed, 1])
    w = rng.normal(size=(6, 4))
    x = rng.normal(size=4)
    probe = rng.normal(size=6)

    def loss(a):
        return contract(a["w"] @ a["x"], probe)

    def analytic(a):
        return {"w": np.outer(probe, a["x"]), "x": a["w"].T @ probe}

    return GradCase({"w": w, "x": x}, loss, analytic)


def _resize_case(seed):
    rng = np.random.default_rng([seed, 2])
    src = rng.normal(size=(5, 7, 3))
    out_h, out_w = 9, 4
    probe = rng.normal(size=(out_h, out_w, 3))

    def loss(a):
        return contract(kernels.resize_fwd(a["map"][None], out_h, out_w)[0], probe)

    def analytic(a):
        return {"map": kernels.resize_bwd(probe[None], 5, 7)[0]}

    return GradCase({"map": src}, loss, analytic)


def interior_points(rng, h, w, n):
    """Random sample coordinates strictly inside the grid, away from the
    integer lattice, so central differences never straddle a kink."""
    rows = rng.integers(0, h - 1, size=n) + rng.uniform(0.25, 0.75, size=n)
    cols = rng.integers(0, w - 1, size=n) + rng.uniform(0.25, 0.75, size=n)
    return rows, cols


def _sample_case(seed):
    rng = np.random.default_rng([seed, 3])
    src = rng.normal(size=(6, 5, 2))
    rows, cols = interior_points(rng, 6, 5, 8)
    probe = rng.normal(size=(8, 2))

    def loss(a):
        return contract(
            kernels.sample_fwd(a["map"][None], a["rows"][None], a["cols"][None])[0],
            probe)

    def analytic(a):
        gm, gr, gc = kernels.sample_bwd(
            a["map"][None], a["rows"][None], a["cols"][None], probe[None])
        return {"map": gm[0], "rows": gr[0], "cols": gc[0]}

    return GradCase({"map": src, "rows": rows, "cols": cols}, loss, analytic)


def _shuffle_case(seed):
    rng = np.random.default_rng([seed, 4])
    src = rng.normal(size=(4, 6, 8))
    probe = rng.normal(size=(8, 12, 2))

    def loss(a):
        return contract(pixel_shuffle(FeatureMap(a["map"]), 2, "shuffle").data, probe)

    def analytic(a):
        return {"map": pixel_shuffle_vjp(probe, 2, "shuffle")}

    return GradCase({"map": src}, loss, analytic)


register_op("linear", _linear_case)
register_op("bilinear_resize", _resize_case)
register_op("bilinear_sample", _sample_case)
register_op("pixel_shuffle", _shuffle_case)
