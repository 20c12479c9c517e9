"""Sub-level sets from cumulative ray histograms, and layer-cake assembly.

The cumulative histogram of a ray up to ``y`` is the length of the ray
inside ``{f <= y}``, i.e. the Radon transform of that set's indicator.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .core import ScalarGrid, read_grid, write_grid
from .radon import HistogramSinogram, Sinogram, backproject, fbp, fbp_stack

THRESHOLD = 0.5


class NestingWarning(UserWarning):
    pass


@dataclass(frozen=True, eq=False)
class LevelStack:
    """Levels ``y_k`` (ascending) and indicators ``chi_k = [f <= y_k]``."""

    levels: np.ndarray
    masks: np.ndarray
    geometry: ScalarGrid

    def __post_init__(self):
        levels = np.asarray(self.levels, dtype=float)
        masks = np.asarray(self.masks, dtype=bool)
        if masks.shape != (len(levels),) + self.geometry.dims:
            raise ValueError("one mask per level, shaped like the grid")
        if np.any(np.diff(levels) <= 0):
            raise ValueError("levels must be strictly increasing")
        object.__setattr__(self, "levels", levels)
        object.__setattr__(self, "masks", masks)


def cumulative_sinograms(hs: HistogramSinogram) -> np.ndarray:
    """Per-ray cumulative mass at every upper bin edge, shape ``(angles, offsets, bins)``.

    Prefix sums of non-negative masses never decrease, so each ray's row is
    monotone exactly.
    """
    return hs.underflow[..., None] + np.cumsum(hs.mass, axis=-1)


def sublevel_sinogram(hs: HistogramSinogram, k: int) -> Sinogram:
    """Radon transform of ``{f <= edges[k + 1]}``: cumulative mass through bin ``k``."""
    nbins = hs.mass.shape[-1]
    if not 0 <= k < nbins:
        raise IndexError(f"level index {k} outside 0..{nbins - 1}")
    return Sinogram(hs.thetas, hs.ps, cumulative_sinograms(hs)[..., k])


def superlevel_sinogram(hs: HistogramSinogram, k: int) -> Sinogram:
    """Radon transform of ``{f > edges[k + 1]}`` inside the sampled box."""
    low = sublevel_sinogram(hs, k)
    return Sinogram(hs.thetas, hs.ps, hs.total() - low.values)


def reconstruct_level(sino: Sinogram, geometry: ScalarGrid | None = None) -> ScalarGrid:
    """Indicator recovered by FBP and thresholding at one half."""
    img = fbp(sino, geometry)
    return img.like((img.values >= THRESHOLD).astype(float))


def enforce_nesting(masks: np.ndarray) -> np.ndarray:
    """Make ``masks[k] <= masks[k + 1]`` by a running OR; warns on changes."""
    masks = np.asarray(masks, dtype=bool)
    nested = np.logical_or.accumulate(masks, axis=0)
    changed = int(np.count_nonzero(nested != masks))
    if changed:
        warnings.warn(f"level sets not nested; {changed} pixels fixed", NestingWarning, stacklevel=2)
    return nested


def level_stack(hs: HistogramSinogram, indices, geometry: ScalarGrid) -> LevelStack:
    """Sub-level sets at ``edges[k + 1]`` for each ``k`` in ``indices``.

    The superlevel sets are reconstructed and complemented: they sit inside
    the object, while sub-level sets of a phantom on a zero background fill
    the whole box and pick up edge artifacts from its corners.
    """
    indices = np.asarray(indices, dtype=int)
    nbins = hs.mass.shape[-1]
    if np.any(indices < 0) or np.any(indices >= nbins):
        raise IndexError("level index out of range")
    cum = cumulative_sinograms(hs)
    upper = hs.total()[..., None] - cum[..., indices]
    imgs = fbp_stack(np.moveaxis(upper, -1, 0), hs.thetas, hs.ps, geometry)
    masks = enforce_nesting(imgs < THRESHOLD)
    return LevelStack(hs.edges[indices + 1], masks, geometry)


def band_values(levels, y_min: float, y_max: float) -> np.ndarray:
    """Value assigned to each band between levels.

    The band below the first level gets ``y_min`` and the one above the last
    gets ``y_max``; interior bands take their midpoint.
    """
    levels = np.asarray(levels, dtype=float)
    mids = 0.5 * (levels[1:] + levels[:-1])
    return np.concatenate([[y_min], mids, [y_max]])


def assemble(stack: LevelStack, y_min: float, y_max: float | None = None) -> ScalarGrid:
    """Layer-cake reconstruction ``y_min + sum_k (b_k - b_{k-1}) (1 - chi_k)``.

    ``b_k`` are the :func:`band_values`. Exact for a piecewise-constant
    ``f`` whose values are ``y_min``, the interior band midpoints and
    ``y_max``. ``y_max`` defaults to half a level step above the top level.
    """
    masks = enforce_nesting(stack.masks)
    levels = stack.levels
    if y_max is None:
        step = levels[-1] - levels[-2] if len(levels) > 1 else levels[-1] - y_min
        y_max = levels[-1] + 0.5 * step
    b = band_values(levels, y_min, y_max)
    jumps = np.diff(b)
    out = y_min + np.tensordot(jumps, (~masks).astype(float), axes=1)
    return stack.geometry.like(out)


def peak_rays(hs: HistogramSinogram, y_c: float, ratio: float = 3.0) -> np.ndarray:
    """Rays whose histogram spikes within one bin of ``y_c``.

    A spike means the mass near ``y_c`` exceeds ``ratio`` times the median
    over the ray's occupied bins.
    """
    b = int(np.clip(np.searchsorted(hs.edges, y_c, side="right") - 1, 0, hs.mass.shape[-1] - 1))
    lo, hi = max(0, b - 1), min(hs.mass.shape[-1], b + 2)
    near = hs.mass[..., lo:hi].max(axis=-1)
    occupied = np.where(hs.mass > 0, hs.mass, np.nan)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        typical = np.nanmedian(occupied, axis=-1)
    typical = np.nan_to_num(typical, nan=np.inf)
    return near > ratio * typical


def locate_critical_points(
    hs: HistogramSinogram, y_c: float, geometry: ScalarGrid, fraction: float = 0.5, ratio: float = 3.0
) -> list[tuple]:
    """Candidate positions of a critical point with value ``y_c``.

    Every line through the point sees a density singularity at ``y_c``;
    the unfiltered backprojection of the spike indicator therefore peaks
    there. Returns physical coordinates of local maxima reaching
    ``fraction`` of the angle count, strongest first; a plateau of equal
    maxima is reported once, at its centroid. Ray histograms need enough
    samples per bin for the spike to stand out (ray step well below the
    grid spacing, a hundred or so bins).
    """
    flags = peak_rays(hs, y_c, ratio).astype(float)
    bp = backproject(flags, hs.thetas, hs.ps, geometry)
    peak = ndimage.maximum_filter(bp, size=3, mode="constant", cval=-np.inf)
    hit = (bp >= peak - 1e-9) & (bp >= fraction * len(hs.thetas))
    labels, count = ndimage.label(hit, structure=np.ones((3,) * bp.ndim))
    if count == 0:
        return []
    idx = np.arange(1, count + 1)
    centres = np.array(ndimage.center_of_mass(hit, labels, idx)).reshape(count, bp.ndim)
    strength = ndimage.maximum(bp, labels, idx)
    coords = np.asarray(geometry.origin) + centres * geometry.spacing
    order = np.argsort(-np.asarray(strength), kind="stable")
    return [tuple(float(c) for c in coords[i]) for i in order]


def write_stack(stack: LevelStack, directory) -> None:
    """One HTGD grid per level (``level_000.htgd`` ...) plus ``levels.csv``."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "levels.csv", "w") as fh:
        fh.write("index,level\n")
        for k, y in enumerate(stack.levels):
            fh.write(f"{k},{y:.17g}\n")
    for k, m in enumerate(stack.masks):
        write_grid(stack.geometry.like(m.astype(float)), out / f"level_{k:03d}.htgd")


def read_stack(directory) -> LevelStack:
    src = Path(directory)
    levels = np.loadtxt(src / "levels.csv", delimiter=",", skiprows=1, ndmin=2)[:, 1]
    grids = [read_grid(src / f"level_{k:03d}.htgd") for k in range(len(levels))]
    masks = np.stack([g.values > 0.5 for g in grids])
    return LevelStack(levels, masks, grids[0].like(np.zeros(grids[0].dims)))
