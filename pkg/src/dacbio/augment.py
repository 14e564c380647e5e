"""Asymmetric domain augmentation.

Weak augmentation (applied to low-cost scans) is purely geometric: horizontal
flip, a small affine warp and a smooth control-grid distortion.  Strong
augmentation (applied to high-end scans) is the weak draw followed by image-only
photometric corruption: gamma, brightness/contrast, JPEG compression and
multiplicative speckle.

All randomness comes from an explicit ``numpy.random.Generator``.  Strong
augmentation consumes the generator exactly like weak augmentation before
drawing its photometric extras, so both produce identical label channels for
the same seed.
"""

from __future__ import annotations

import io
import math
from dataclasses import asdict, dataclass, replace

import numpy as np
from PIL import Image
from scipy import ndimage

from .phantom import Sample


@dataclass(frozen=True)
class AugmentConfig:
    flip_p: float = 0.5
    affine_p: float = 0.5
    rotation_deg: float = 10.0
    scale: tuple[float, float] = (0.9, 1.1)
    translate: float = 0.05  # fraction of image size
    grid_p: float = 0.5
    grid_size: int = 4
    grid_max: float = 0.05  # max control-point displacement, fraction of image size
    gamma_p: float = 0.5
    gamma: tuple[float, float] = (0.7, 1.5)
    bc_p: float = 0.5
    brightness: tuple[float, float] = (-0.2, 0.2)
    contrast: tuple[float, float] = (0.8, 1.2)
    compression_p: float = 0.5
    quality: tuple[int, int] = (30, 70)
    speckle_p: float = 0.5
    speckle_var: tuple[float, float] = (0.01, 0.1)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict | None) -> "AugmentConfig":
        d = {k: (tuple(v) if isinstance(v, list) else v) for k, v in (d or {}).items()}
        return cls(**d)


@dataclass(frozen=True)
class GeometricDraw:
    """Backward map ``src = flip(M @ dst + offset + grid(dst))``."""

    flip: bool = False
    matrix: np.ndarray | None = None  # 2x2, acts on (x, y)
    offset: np.ndarray | None = None
    grid: np.ndarray | None = None  # (2, g, g) control displacements in px (dx, dy)
    scale: float = 1.0

    @property
    def is_identity(self) -> bool:
        return not self.flip and self.matrix is None and self.grid is None


@dataclass(frozen=True)
class PhotometricDraw:
    gamma: float = 1.0
    brightness: float = 0.0
    contrast: float = 1.0
    quality: int | None = None
    speckle_var: float = 0.0
    noise_seed: int = 0


def draw_geometric(rng: np.random.Generator, cfg: AugmentConfig, shape: tuple[int, int]) -> GeometricDraw:
    h, w = shape
    flip = bool(rng.random() < cfg.flip_p)
    matrix = offset = grid = None
    scale = 1.0
    if rng.random() < cfg.affine_p:
        theta = math.radians(rng.uniform(-cfg.rotation_deg, cfg.rotation_deg))
        scale = float(rng.uniform(*cfg.scale))
        c, s = math.cos(theta), math.sin(theta)
        matrix = scale * np.array([[c, -s], [s, c]])
        centre = np.array([(w - 1) / 2, (h - 1) / 2])
        shift = rng.uniform(-cfg.translate, cfg.translate, size=2) * np.array([w, h])
        offset = centre - matrix @ centre + shift
    if rng.random() < cfg.grid_p:
        amp = cfg.grid_max * np.array([w, h])[:, None, None]
        grid = rng.uniform(-1.0, 1.0, size=(2, cfg.grid_size, cfg.grid_size)) * amp
    return GeometricDraw(flip=flip, matrix=matrix, offset=offset, grid=grid, scale=scale)


def draw_photometric(rng: np.random.Generator, cfg: AugmentConfig) -> PhotometricDraw:
    gamma = rng.uniform(*cfg.gamma) if rng.random() < cfg.gamma_p else 1.0
    if rng.random() < cfg.bc_p:
        brightness, contrast = rng.uniform(*cfg.brightness), rng.uniform(*cfg.contrast)
    else:
        brightness, contrast = 0.0, 1.0
    quality = int(rng.integers(cfg.quality[0], cfg.quality[1] + 1)) if rng.random() < cfg.compression_p else None
    speckle = rng.uniform(*cfg.speckle_var) if rng.random() < cfg.speckle_p else 0.0
    return PhotometricDraw(float(gamma), float(brightness), float(contrast), quality, float(speckle),
                           int(rng.integers(2**31)))


def _dense_grid(grid: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    g = grid.shape[-1]
    h, w = shape
    rows = np.linspace(0, g - 1, h)
    cols = np.linspace(0, g - 1, w)
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    return np.stack([ndimage.map_coordinates(grid[k], [rr, cc], order=3, mode="nearest") for k in range(2)])


def _source_coords(draw: GeometricDraw, shape: tuple[int, int], dense: np.ndarray | None):
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    sx, sy = xx, yy
    if draw.matrix is not None:
        m, o = draw.matrix, draw.offset
        sx, sy = m[0, 0] * xx + m[0, 1] * yy + o[0], m[1, 0] * xx + m[1, 1] * yy + o[1]
    if dense is not None:
        sx, sy = sx + dense[0], sy + dense[1]
    if draw.flip:
        sx = (w - 1) - sx
    return sy, sx


def _forward_points(draw: GeometricDraw, pts: np.ndarray, shape: tuple[int, int],
                    dense: np.ndarray | None, steps: int = 10, tol: float = 0.1) -> np.ndarray:
    """Map source points to output coordinates by inverting the backward map."""
    h, w = shape
    target = np.array(pts, dtype=np.float64)
    if draw.flip:
        target[:, 0] = (w - 1) - target[:, 0]
    m = draw.matrix if draw.matrix is not None else np.eye(2)
    o = draw.offset if draw.offset is not None else np.zeros(2)
    minv = np.linalg.inv(m)
    q = (target - o) @ minv.T
    if dense is None:
        return q
    for _ in range(steps):
        d = np.stack([ndimage.map_coordinates(dense[k], [q[:, 1], q[:, 0]], order=1, mode="nearest")
                      for k in range(2)], axis=1)
        q_new = (target - o - d) @ minv.T
        done = np.max(np.abs(q_new - q)) < tol
        q = q_new
        if done:
            break
    return q


def apply_geometric(sample: Sample, draw: GeometricDraw) -> Sample:
    if draw.is_identity:
        return sample
    shape = sample.shape
    dense = _dense_grid(draw.grid, shape) if draw.grid is not None else None
    coords = _source_coords(draw, shape, dense)

    def warp(a, order):
        return ndimage.map_coordinates(a, coords, order=order, mode="constant", cval=0.0)

    out = replace(sample, image=np.clip(warp(sample.image, 1), 0, 1).astype(np.float32))
    if draw.scale != 1.0:
        out.spacing = (sample.spacing[0] * draw.scale, sample.spacing[1] * draw.scale)
    if sample.labels is not None:
        mask = warp(sample.labels[0], 0)
        heat = [np.clip(warp(c, 1), 0, 1) for c in sample.labels[1:]]
        out.labels = np.stack([mask, *heat]).astype(np.float32)
    if sample.keypoints is not None:
        out.keypoints = _forward_points(draw, sample.keypoints, shape, dense)
    return out


def _jpeg(image: np.ndarray, quality: int) -> np.ndarray:
    buf = io.BytesIO()
    Image.fromarray(np.round(image * 255).astype(np.uint8)).save(buf, format="JPEG", quality=quality)
    buf.seek(0)
    return np.asarray(Image.open(buf), dtype=np.float32) / 255.0


def apply_photometric(image: np.ndarray, draw: PhotometricDraw) -> np.ndarray:
    img = np.asarray(image, dtype=np.float32)
    if draw.gamma != 1.0:
        img = np.power(img, draw.gamma)
    if draw.contrast != 1.0 or draw.brightness != 0.0:
        img = np.clip((img - img.mean()) * draw.contrast + img.mean() + draw.brightness, 0, 1)
    if draw.quality is not None:
        img = _jpeg(img, draw.quality)
    if draw.speckle_var > 0:
        noise = np.random.default_rng(draw.noise_seed).standard_normal(img.shape)
        img = img * (1.0 + math.sqrt(draw.speckle_var) * noise)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def weak_augment(s: Sample, rng: np.random.Generator, cfg: AugmentConfig | None = None) -> Sample:
    cfg = cfg or AugmentConfig()
    return apply_geometric(s, draw_geometric(rng, cfg, s.shape))


def strong_augment(s: Sample, rng: np.random.Generator, cfg: AugmentConfig | None = None) -> Sample:
    cfg = cfg or AugmentConfig()
    out = weak_augment(s, rng, cfg)
    out = replace(out, image=apply_photometric(out.image, draw_photometric(rng, cfg)))
    return out


class AugmentPipeline:
    """Callable wrapper selecting weak or strong augmentation."""

    def __init__(self, mode: str = "weak", config: AugmentConfig | None = None):
        if mode not in ("weak", "strong", "none"):
            raise ValueError(f"unknown augmentation mode {mode!r}")
        self.mode = mode
        self.config = config or AugmentConfig()

    def __call__(self, s: Sample, rng: np.random.Generator) -> Sample:
        if self.mode == "none":
            return s
        if self.mode == "weak":
            return weak_augment(s, rng, self.config)
        return strong_augment(s, rng, self.config)

    def __repr__(self):
        return f"AugmentPipeline(mode={self.mode!r})"
