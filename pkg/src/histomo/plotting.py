"""File output for figures: PNG through matplotlib, PGM graymaps and CSV tables.

All writers give byte-identical files for identical input.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# matplotlib stamps its version into PNG metadata unless told otherwise
PNG_META = {"Software": None}


def _checked(path) -> Path:
    path = Path(path)
    if not path.parent.exists():
        raise OSError(f"cannot write {path}: directory does not exist")
    return path


def write_csv(path, header, rows) -> None:
    """Plain CSV; floats keep 17 significant digits. No rows gives just the header."""
    path = _checked(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([f"{v:.17g}" if isinstance(v, (float, np.floating)) else v for v in row])


def write_pgm(image, path, lo: float | None = None, hi: float | None = None) -> None:
    """8-bit binary graymap. Rows run top to bottom with the first array axis as x.

    Values are scaled linearly from ``[lo, hi]`` (default: data range) to 0..255.
    """
    path = _checked(path)
    a = np.asarray(getattr(image, "values", image), dtype=float)
    if a.ndim != 2:
        raise ValueError("graymap needs a 2D image")
    lo = float(np.min(a)) if lo is None else lo
    hi = float(np.max(a)) if hi is None else hi
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    pix = np.clip(np.rint((a - lo) * scale), 0, 255).astype(np.uint8)
    pix = np.flipud(pix.T)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{pix.shape[1]} {pix.shape[0]}\n255\n".encode("ascii"))
        fh.write(pix.tobytes())


def read_pgm(path) -> np.ndarray:
    """Inverse of :func:`write_pgm` up to the 8-bit scaling."""
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError("not a binary graymap")
    w, h = int(parts[1]), int(parts[2])
    pix = np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)
    return np.flipud(pix).T.copy()


def _save(fig, path) -> None:
    fig.savefig(_checked(path), dpi=100, metadata=PNG_META)
    plt.close(fig)


def image_png(path, image, title: str = "", extent=None, cmap: str = "viridis") -> None:
    """Heat map of a 2D array (first axis horizontal) or :class:`ScalarGrid`."""
    a = np.asarray(getattr(image, "values", image), dtype=float)
    if extent is None and hasattr(image, "origin"):
        lo, hi = image.origin, image.upper
        extent = (lo[0], hi[0], lo[1], hi[1])
    fig, ax = plt.subplots(figsize=(5, 4.2))
    im = ax.imshow(a.T, origin="lower", extent=extent, cmap=cmap, aspect="auto")
    fig.colorbar(im, ax=ax)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    _save(fig, path)


def panels_png(path, images, titles, extent=None, cmap: str = "viridis") -> None:
    """Row of heat maps sharing a colour scale."""
    arrs = [np.asarray(getattr(im, "values", im), dtype=float) for im in images]
    vmin = min(a.min() for a in arrs)
    vmax = max(a.max() for a in arrs)
    fig, axes = plt.subplots(1, len(arrs), figsize=(4 * len(arrs), 3.8), squeeze=False)
    for ax, a, t in zip(axes[0], arrs, titles):
        im = ax.imshow(a.T, origin="lower", extent=extent, cmap=cmap, vmin=vmin, vmax=vmax)
        ax.set_title(t)
    fig.colorbar(im, ax=list(axes[0]))
    _save(fig, path)


def lines_png(path, x, series: dict, xlabel: str = "", ylabel: str = "", title: str = "",
              logy: bool = False, steps: bool = False) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, y in series.items():
        if steps:
            ax.step(x, y, where="mid", label=label, lw=1)
        else:
            ax.plot(x, y, label=label, lw=1)
    if logy:
        ax.set_yscale("log")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    if len(series) > 1:
        ax.legend(frameon=False)
    fig.tight_layout()
    _save(fig, path)
