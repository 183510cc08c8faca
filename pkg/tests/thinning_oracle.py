"""Independent binary thinning oracle and ribbon builders for skeleton tests.

Classic two-subiteration thinning (Zhang-Suen): a foreground pixel is
deleted when it has 2..6 neighbors, exactly one 0->1 transition around its
8-neighborhood, and passes the step's directional conditions. Pure pixel
loops, shares nothing with the library under test.
"""

import numpy as np


def zhang_suen_thin(mask: np.ndarray) -> np.ndarray:
    img = mask.astype(bool).copy()
    changed = True
    while changed:
        changed = False
        for step in (0, 1):
            to_del = []
            for y in range(1, img.shape[0] - 1):
                for x in range(1, img.shape[1] - 1):
                    if not img[y, x]:
                        continue
                    p = [img[y - 1, x], img[y - 1, x + 1], img[y, x + 1],
                         img[y + 1, x + 1], img[y + 1, x], img[y + 1, x - 1],
                         img[y, x - 1], img[y - 1, x - 1]]
                    b = sum(p)
                    if not 2 <= b <= 6:
                        continue
                    a = sum(1 for i in range(8) if not p[i] and p[(i + 1) % 8])
                    if a != 1:
                        continue
                    if step == 0:
                        if (p[0] and p[2] and p[4]) or (p[2] and p[4] and p[6]):
                            continue
                    else:
                        if (p[0] and p[2] and p[6]) or (p[0] and p[4] and p[6]):
                            continue
                    to_del.append((y, x))
            if to_del:
                changed = True
                for y, x in to_del:
                    img[y, x] = False
    return img


def band_mask(shape: tuple[int, int], theta: float, width: float = 5.0) -> np.ndarray:
    """Anti-aliased straight band through the image center at angle theta,
    spanning the full frame (no end caps)."""
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w]
    dy, dx = yy - h / 2.0, xx - w / 2.0
    across = -dx * np.sin(theta) + dy * np.cos(theta)
    return np.clip(width / 2 + 0.5 - np.abs(across), 0.0, 1.0).astype(np.float32)


def cheb_dilate(mask: np.ndarray) -> np.ndarray:
    """8-neighborhood binary dilation (radius-1 Chebyshev ball)."""
    out = mask.astype(bool).copy()
    m = mask.astype(bool)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            out |= np.roll(np.roll(m, dy, axis=0), dx, axis=1)
    return out


def interior_window(shape: tuple[int, int], margin: int = 4) -> np.ndarray:
    """True away from the image border, where neither algorithm sees edge
    truncation effects."""
    win = np.zeros(shape, dtype=bool)
    win[margin:-margin, margin:-margin] = True
    return win
