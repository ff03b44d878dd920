"""Plain-text grayscale image export (PGM "P2" format).

P2 is the portable graymap text variant: a `P2` magic line, optional
`#` comments, width/height, the maximum gray value, then row-major
ASCII samples. Any image viewer or netpbm tool renders these, which
keeps heatmap output dependency-free and byte-deterministic.
"""

from __future__ import annotations

import numpy as np


def write_pgm(stream, gray: np.ndarray, comments: tuple[str, ...] = ()) -> None:
    """Write a 2-D uint8 array as plain PGM."""
    arr = np.asarray(gray)
    if arr.ndim != 2:
        raise ValueError(f"need a 2-D gray image, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        raise ValueError(f"need uint8 samples, got {arr.dtype}")
    stream.write("P2\n")
    for comment in comments:
        stream.write(f"# {comment}\n")
    stream.write(f"{arr.shape[1]} {arr.shape[0]}\n255\n")
    for row in arr:
        stream.write(" ".join(str(int(v)) for v in row) + "\n")


def cells_to_gray(values: np.ndarray, cell_px: int = 48) -> np.ndarray:
    """Upscale a small matrix of [0, 1] intensities into pixel blocks.
    Higher intensity renders darker, heatmap-style."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    gray = np.round(255.0 * (1.0 - v)).astype(np.uint8)
    return np.kron(gray, np.ones((cell_px, cell_px), dtype=np.uint8))


def confusion_pixmap(stream, counts: np.ndarray, comments: tuple[str, ...] = ()) -> None:
    """2x2 confusion counts as a cell grid shaded by count/max."""
    counts = np.asarray(counts, dtype=np.float64)
    peak = counts.max()
    intensity = counts / peak if peak > 0 else counts
    write_pgm(stream, cells_to_gray(intensity), comments)


def correlation_pixmap(stream, values: np.ndarray, comments: tuple[str, ...] = ()) -> None:
    """Correlation heatmap: r in [-1, 1] maps linearly to gray, with
    r = +1 darkest and r = -1 lightest."""
    intensity = (np.asarray(values, dtype=np.float64) + 1.0) / 2.0
    write_pgm(stream, cells_to_gray(intensity, cell_px=24), comments)
