"""Dense 2D flow between consecutive frames.

Flow lives on the current frame's grid: the current pixel `x` was at
`x - d(x)` in the previous frame.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Protocol, Tuple

import cv2
import numpy as np

from ..core.errors import DimensionMismatch, MultiMotionError, ProviderFailure
from .frame_frontend import FramePair

logger = logging.getLogger(__name__)

TEXTURE_MIN_STD = 2e-3
MAX_MEAN_SSD = 0.01


@dataclass(frozen=True, eq=False)
class FlowField:
    displacement: np.ndarray
    validity: np.ndarray

    def __post_init__(self):
        displacement = np.asarray(self.displacement, dtype=np.float64)
        validity = np.asarray(self.validity, dtype=bool)
        if displacement.shape[:2] != validity.shape or displacement.shape[-1] != 2:
            raise DimensionMismatch("flow displacement and validity grids differ")
        object.__setattr__(self, "displacement", displacement)
        object.__setattr__(self, "validity", validity)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.validity.shape

    def magnitude(self) -> np.ndarray:
        return np.linalg.norm(self.displacement, axis=-1)

    @classmethod
    def zeros(cls, shape) -> "FlowField":
        return cls(np.zeros(tuple(shape) + (2,)), np.zeros(shape, dtype=bool))


class FlowProvider(Protocol):
    def flow(self, prev: FramePair, curr: FramePair) -> FlowField: ...


class GroundTruthFlow:
    """Flow rendered by the simulator alongside the current frame."""

    def flow(self, prev: FramePair, curr: FramePair) -> FlowField:
        gt = curr.ground_truth
        if gt is None or gt.flow is None:
            raise ProviderFailure(f"no ground-truth flow attached to frame t={curr.timestamp:.6f}")
        return FlowField(gt.flow, gt.flow_valid)


def _pad_to_blocks(image: np.ndarray, block: int) -> np.ndarray:
    h, w = image.shape
    ph, pw = (-h) % block, (-w) % block
    if ph or pw:
        image = np.pad(image, ((0, ph), (0, pw)), mode="edge")
    return image


def _block_sum(values: np.ndarray, block: int) -> np.ndarray:
    h, w = values.shape
    return values.reshape(h // block, block, w // block, block).sum(axis=(1, 3))


class BlockMatchingFlow:
    """Coarse-to-fine SSD block matching with parabolic sub-pixel refinement."""

    def __init__(self, block_size: int = 8, search_radius: int = 8, levels: int = 3):
        self.block_size = block_size
        self.search_radius = search_radius
        self.levels = levels
        r = search_radius
        shifts = [(sx, sy) for sy in range(-r, r + 1) for sx in range(-r, r + 1)]
        # zero shift first so ties resolve to the smallest displacement
        shifts.sort(key=lambda s: (s[0] ** 2 + s[1] ** 2, s[1], s[0]))
        self.shifts = np.array(shifts, dtype=np.int64)
        self.shift_index = np.full((2 * r + 1, 2 * r + 1), -1, dtype=np.int64)
        for i, (sx, sy) in enumerate(shifts):
            self.shift_index[sy + r, sx + r] = i

    def _pyramid(self, image: np.ndarray):
        levels = [image.astype(np.float32)]
        for _ in range(self.levels - 1):
            h, w = levels[-1].shape
            if min(h, w) < 4 * self.block_size:
                break
            levels.append(cv2.pyrDown(levels[-1]))
        return levels

    def _warp_previous(self, prev: np.ndarray, init_px: np.ndarray) -> np.ndarray:
        """prev(x - init(x)), NaN where the sample falls outside."""
        if not np.any(init_px):
            return prev.astype(np.float64)
        h, w = prev.shape
        rows, cols = np.mgrid[0:h, 0:w].astype(np.float32)
        map_x = cols - init_px[..., 0].astype(np.float32)
        map_y = rows - init_px[..., 1].astype(np.float32)
        warped = cv2.remap(prev, map_x, map_y, cv2.INTER_LINEAR, borderMode=cv2.BORDER_CONSTANT, borderValue=0)
        inside = cv2.remap(np.ones_like(prev), map_x, map_y, cv2.INTER_LINEAR, borderMode=cv2.BORDER_CONSTANT, borderValue=0)
        warped = warped.astype(np.float64)
        warped[inside < 0.999] = np.nan
        return warped

    def _search(self, curr: np.ndarray, warped: np.ndarray) -> np.ndarray:
        """(S, bh, bw) mean SSD per block and shift; inf where the block mostly leaves the image."""
        bs, r = self.block_size, self.search_radius
        curr = _pad_to_blocks(curr.astype(np.float64), bs)
        h, w = curr.shape
        padded = np.full((h + 2 * r, w + 2 * r), np.nan)
        wh, ww = warped.shape
        padded[r:r + wh, r:r + ww] = warped
        costs = np.empty((len(self.shifts), h // bs, w // bs))
        min_count = bs * bs / 2.0
        for i, (sx, sy) in enumerate(self.shifts):
            shifted = padded[r - sy:r - sy + h, r - sx:r - sx + w]
            diff = curr - shifted
            valid = np.isfinite(diff)
            total = _block_sum(np.where(valid, diff * diff, 0.0), bs)
            count = _block_sum(valid.astype(np.float64), bs)
            with np.errstate(invalid="ignore", divide="ignore"):
                costs[i] = np.where(count >= min_count, total / count, np.inf)
        return costs

    def _refine(self, costs: np.ndarray, best: np.ndarray) -> np.ndarray:
        r = self.search_radius
        bh, bw = best.shape
        rows, cols = np.mgrid[0:bh, 0:bw]
        c0 = costs[best, rows, cols]
        sx, sy = self.shifts[best, 0], self.shifts[best, 1]
        offsets = np.zeros((bh, bw, 2))
        for axis, (dx, dy) in enumerate(((1, 0), (0, 1))):
            minus_x, minus_y = sx - dx, sy - dy
            plus_x, plus_y = sx + dx, sy + dy
            inside = (
                (np.abs(minus_x) <= r) & (np.abs(minus_y) <= r)
                & (np.abs(plus_x) <= r) & (np.abs(plus_y) <= r)
            )
            i_minus = self.shift_index[np.clip(minus_y + r, 0, 2 * r), np.clip(minus_x + r, 0, 2 * r)]
            i_plus = self.shift_index[np.clip(plus_y + r, 0, 2 * r), np.clip(plus_x + r, 0, 2 * r)]
            cm = costs[i_minus, rows, cols]
            cp = costs[i_plus, rows, cols]
            denom = cm - 2.0 * c0 + cp
            ok = inside & np.isfinite(cm) & np.isfinite(cp) & (denom > 0) & (c0 > 0)
            with np.errstate(invalid="ignore", divide="ignore"):
                off = np.where(ok, (cm - cp) / (2.0 * denom), 0.0)
            offsets[..., axis] = np.clip(off, -0.5, 0.5)
        return offsets

    def flow(self, prev: FramePair, curr: FramePair) -> FlowField:
        bs = self.block_size
        prev_levels = self._pyramid(prev.intensity)
        curr_levels = self._pyramid(curr.intensity)
        block_flow = None
        block_valid = None
        for level in reversed(range(len(curr_levels))):
            P, C = prev_levels[level], curr_levels[level]
            h, w = C.shape
            bh, bw = math.ceil(h / bs), math.ceil(w / bs)
            if block_flow is None:
                init = np.zeros((bh, bw, 2))
            else:
                init = cv2.resize(2.0 * block_flow, (bw, bh), interpolation=cv2.INTER_NEAREST)
            init_px = np.repeat(np.repeat(init, bs, axis=0), bs, axis=1)[:h, :w]
            warped = self._warp_previous(P, init_px)
            costs = self._search(C, warped)
            best = np.argmin(costs, axis=0)
            best_cost = np.take_along_axis(costs, best[None], axis=0)[0]
            block_flow = init + self.shifts[best].astype(np.float64) + self._refine(costs, best)
            texture = _block_sum(_pad_to_blocks(C.astype(np.float64), bs) ** 2, bs) / bs**2 - (
                _block_sum(_pad_to_blocks(C.astype(np.float64), bs), bs) / bs**2
            ) ** 2
            block_valid = (
                np.isfinite(best_cost)
                & (best_cost <= MAX_MEAN_SSD)
                & (np.sqrt(np.maximum(texture, 0.0)) > TEXTURE_MIN_STD)
            )
        h, w = curr.shape
        displacement = np.repeat(np.repeat(block_flow, bs, axis=0), bs, axis=1)[:h, :w]
        validity = np.repeat(np.repeat(block_valid, bs, axis=0), bs, axis=1)[:h, :w]
        return FlowField(displacement, validity)


def compute_flow(prev: FramePair, curr: FramePair, provider: FlowProvider) -> FlowField:
    if prev.shape != curr.shape:
        raise DimensionMismatch(f"frames differ in size: {prev.shape} vs {curr.shape}")
    try:
        field = provider.flow(prev, curr)
    except MultiMotionError:
        raise
    except Exception as e:
        raise ProviderFailure(f"flow provider failed at t={curr.timestamp:.6f}: {e}") from e
    if field.shape != curr.shape:
        raise DimensionMismatch(f"flow grid {field.shape} does not match frame {curr.shape}")
    return field
