"""From probability maps to head circumference and transcerebellar diameter.

Skull channel: threshold, keep the largest blob, trace its outline, fit an
ellipse (in millimetre space) and take its perimeter.  Extreme-point
channels: global argmax per channel, then the Euclidean distance in mm.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage
from skimage import measure

from .validation import check_probmap, check_spacing


class BiometryError(RuntimeError):
    """A measurement could not be extracted from a probability map."""


class NoSkullError(BiometryError):
    pass


class NoPeakError(BiometryError):
    pass


class EllipseFitError(BiometryError):
    pass


@dataclass(frozen=True)
class EllipseParams:
    cx: float
    cy: float
    a: float
    b: float
    rotation: float

    def __post_init__(self):
        if not (self.a >= self.b > 0):
            raise ValueError(f"ellipse needs a >= b > 0, got a={self.a}, b={self.b}")

    def points(self, n: int = 100) -> np.ndarray:
        t = np.linspace(0.0, 2.0 * np.pi, n, endpoint=False)
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        x = self.cx + self.a * np.cos(t) * c - self.b * np.sin(t) * s
        y = self.cy + self.a * np.cos(t) * s + self.b * np.sin(t) * c
        return np.stack([x, y], axis=1)


@dataclass(frozen=True)
class Biometry:
    hc_mm: float
    tcd_mm: float
    ellipse: EllipseParams  # fitted in mm coordinates
    uep_px: tuple[float, float]
    lep_px: tuple[float, float]
    spacing: tuple[float, float]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["uep_px"] = list(self.uep_px)
        d["lep_px"] = list(self.lep_px)
        d["spacing"] = list(self.spacing)
        return d


def gaussian_target(points, sigma: float, shape: tuple[int, int]) -> np.ndarray:
    """Render one unit-peak Gaussian heatmap per ``(x, y)`` point."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    h, w = shape
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if np.any(pts[:, 0] < 0) or np.any(pts[:, 0] > w - 1) or np.any(pts[:, 1] < 0) or np.any(pts[:, 1] > h - 1):
        raise ValueError(f"keypoints {pts.tolist()} fall outside a {h}x{w} image")
    yy = np.arange(h, dtype=np.float64)[:, None]
    xx = np.arange(w, dtype=np.float64)[None, :]
    maps = [np.exp(-((xx - x) ** 2 + (yy - y) ** 2) / (2.0 * sigma**2)) for x, y in pts]
    return np.stack(maps).astype(np.float32)


def extract_skull_contour(skull_prob, threshold: float = 0.5) -> np.ndarray:
    """Outer boundary of the largest above-threshold component, as ``(x, y)`` rows.

    Boundary points sit half-way between inside and outside pixel centres,
    which removes the half-pixel inward bias of tracing pixel centres.
    """
    prob = np.asarray(skull_prob, dtype=np.float64)
    mask = prob > threshold
    labels, n = ndimage.label(mask)
    if n == 0:
        raise NoSkullError("no skull detected")
    sizes = ndimage.sum_labels(mask, labels, index=np.arange(1, n + 1))
    blob = labels == (int(np.argmax(sizes)) + 1)
    blob = ndimage.binary_fill_holes(blob)
    padded = np.pad(blob.astype(np.float64), 1)
    contours = measure.find_contours(padded, 0.5)
    outer = max(contours, key=len)
    # drop the duplicated closing vertex; (row, col) -> (x, y), undo padding
    if np.allclose(outer[0], outer[-1]):
        outer = outer[:-1]
    return outer[:, ::-1] - 1.0


def _conic_from_points(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    # Numerically stable split of the constrained least-squares problem
    # (Halir & Flusser 1998).
    d1 = np.column_stack([x * x, x * y, y * y])
    d2 = np.column_stack([x, y, np.ones_like(x)])
    if np.linalg.matrix_rank(np.hstack([d1, d2]), tol=1e-10) < 5:
        raise EllipseFitError("degenerate point set (collinear or repeated points)")
    s1 = d1.T @ d1
    s2 = d1.T @ d2
    s3 = d2.T @ d2
    try:
        t = -np.linalg.solve(s3, s2.T)
    except np.linalg.LinAlgError as exc:
        raise EllipseFitError("degenerate point set") from exc
    m = s1 + s2 @ t
    m = np.array([m[2] / 2.0, -m[1], m[0] / 2.0])
    _, vecs = np.linalg.eig(m)
    vecs = np.real(vecs)
    cond = 4.0 * vecs[0] * vecs[2] - vecs[1] ** 2
    ok = np.flatnonzero(cond > 0)
    if ok.size == 0:
        raise EllipseFitError("no elliptical solution for these points")
    a1 = vecs[:, ok[np.argmax(cond[ok])]]
    return np.concatenate([a1, t @ a1])


def _conic_to_params(coef: np.ndarray) -> EllipseParams:
    A, B, C, D, E, F = coef
    M = np.array([[2 * A, B], [B, 2 * C]])
    cx, cy = np.linalg.solve(M, [-D, -E])
    f0 = F + 0.5 * (D * cx + E * cy)
    lam, vec = np.linalg.eigh(np.array([[A, B / 2], [B / 2, C]]))
    axes_sq = -f0 / lam
    if np.any(axes_sq <= 0):
        raise EllipseFitError("fitted conic is not a real ellipse")
    axes = np.sqrt(axes_sq)
    major = int(np.argmax(axes))
    vx, vy = vec[:, major]
    rot = math.atan2(vy, vx)
    if rot <= -math.pi / 2:
        rot += math.pi
    elif rot > math.pi / 2:
        rot -= math.pi
    return EllipseParams(float(cx), float(cy), float(axes[major]), float(axes[1 - major]), rot)


def fit_ellipse(points) -> EllipseParams:
    """Direct least-squares ellipse fit (ellipse-specific conic constraint)."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise EllipseFitError(f"expected (n, 2) points, got shape {pts.shape}")
    if len(pts) < 6:
        raise EllipseFitError(f"need at least 6 points, got {len(pts)}")
    center = pts.mean(axis=0)
    scale = np.sqrt(((pts - center) ** 2).sum(axis=1).mean())
    if scale == 0:
        raise EllipseFitError("all points coincide")
    q = (pts - center) / scale
    e = _conic_to_params(_conic_from_points(q[:, 0], q[:, 1]))
    return EllipseParams(
        e.cx * scale + center[0], e.cy * scale + center[1], e.a * scale, e.b * scale, e.rotation
    )


def ellipse_circumference(e: EllipseParams) -> float:
    """Ramanujan's second perimeter approximation."""
    a, b = e.a, e.b
    h = ((a - b) / (a + b)) ** 2
    return math.pi * (a + b) * (1.0 + 3.0 * h / (10.0 + math.sqrt(4.0 - 3.0 * h)))


def _refine(prob: np.ndarray, r: int, c: int, half: int = 2) -> tuple[float, float]:
    r0, r1 = max(r - half, 0), min(r + half + 1, prob.shape[0])
    c0, c1 = max(c - half, 0), min(c + half + 1, prob.shape[1])
    win = prob[r0:r1, c0:c1]
    rr, cc = np.mgrid[r0:r1, c0:c1]
    total = win.sum()
    return float((cc * win).sum() / total), float((rr * win).sum() / total)


def _peak(prob: np.ndarray, name: str, refine: bool):
    if prob.max() == prob.min():
        raise NoPeakError(f"no peak in the {name} map (constant)")
    # row-major argmax: ties go to the smallest row, then the smallest column
    r, c = np.unravel_index(int(np.argmax(prob)), prob.shape)
    if refine:
        return _refine(prob, r, c)
    return (int(c), int(r))


def detect_extreme_points(uep_prob, lep_prob, *, refine: bool = False):
    """Return ``(uep_xy, lep_xy)`` at the global maximum of each map."""
    uep = _peak(np.asarray(uep_prob, dtype=np.float64), "UEP", refine)
    lep = _peak(np.asarray(lep_prob, dtype=np.float64), "LEP", refine)
    return uep, lep


def tcd_mm(uep, lep, spacing) -> float:
    sx, sy = check_spacing(spacing)
    return math.hypot((lep[0] - uep[0]) * sx, (lep[1] - uep[1]) * sy)


def compute_biometry(p, spacing, *, threshold: float = 0.5, refine: bool = False) -> Biometry:
    p = check_probmap(p)
    sx, sy = check_spacing(spacing)
    contour = extract_skull_contour(p[0], threshold)
    ellipse = fit_ellipse(contour * np.array([sx, sy]))
    uep, lep = detect_extreme_points(p[1], p[2], refine=refine)
    return Biometry(
        hc_mm=ellipse_circumference(ellipse),
        tcd_mm=tcd_mm(uep, lep, (sx, sy)),
        ellipse=ellipse,
        uep_px=tuple(uep),
        lep_px=tuple(lep),
        spacing=(sx, sy),
    )
