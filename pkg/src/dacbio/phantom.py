"""Synthetic transcerebellar-plane phantoms rendered as high-end or low-cost scans.

Every phantom index maps to one head geometry (skull ellipse plus a
two-lobed cerebellum).  The same geometry can be rendered in either domain;
the low-cost rendering adds contrast compression, blur, heavy speckle, a
shadow band and resolution loss on top of the clean anatomy.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np
import tifffile
from PIL import Image
from scipy import integrate, ndimage
from skimage.transform import resize

from .biometry import gaussian_target
from .validation import check_spacing

H, W = 448, 576
DOMAINS = ("HE", "LC")
SPLITS = ("he_train", "lc_train", "lc_test", "he_test")
_SPLIT_DOMAIN = {"he_train": "HE", "lc_train": "LC", "lc_test": "LC", "he_test": "HE"}
_DOMAIN_CODE = {"HE": 0, "LC": 1}


class PhantomConfigError(ValueError):
    """Invalid phantom ranges or geometry."""


@dataclass(frozen=True)
class PhantomSpec:
    skull_center: tuple[float, float]
    skull_axes: tuple[float, float]
    skull_rotation: float
    cerebellum_center: tuple[float, float]
    cerebellum_half_length: float
    cerebellum_lobe_radius: float
    cerebellum_rotation: float
    tissue_texture_seed: int
    pixel_spacing: tuple[float, float]

    def __post_init__(self):
        a, b = self.skull_axes
        if not (a >= b > 0):
            raise PhantomConfigError(f"skull axes need a >= b > 0, got {self.skull_axes}")
        try:
            check_spacing(self.pixel_spacing)
        except ValueError as exc:
            raise PhantomConfigError(str(exc)) from exc
        if self.cerebellum_half_length <= 0 or self.cerebellum_lobe_radius <= 0:
            raise PhantomConfigError("cerebellum sizes must be positive")
        if self.cerebellum_lobe_radius > self.cerebellum_half_length:
            raise PhantomConfigError("cerebellum lobe radius exceeds its half length")
        # sample the cerebellum outline: it must sit strictly inside the skull
        if np.max(self._skull_rho(*self._cerebellum_outline().T)) >= 1.0:
            raise PhantomConfigError("cerebellum is not strictly inside the skull ellipse")
        ex, ey = self.skull_extent()
        cx, cy = self.skull_center
        if cx - ex < 2 or cy - ey < 2 or cx + ex > W - 3 or cy + ey > H - 3:
            raise PhantomConfigError("skull ellipse does not fit inside the image")

    @property
    def axis(self) -> np.ndarray:
        return np.array([math.cos(self.cerebellum_rotation), math.sin(self.cerebellum_rotation)])

    def keypoints(self) -> np.ndarray:
        """UEP and LEP as rows of ``(x, y)``; UEP is the one nearer the top."""
        c = np.asarray(self.cerebellum_center)
        p, q = c - self.cerebellum_half_length * self.axis, c + self.cerebellum_half_length * self.axis
        return np.array([p, q]) if p[1] <= q[1] else np.array([q, p])

    def _lobe_centers(self) -> np.ndarray:
        c = np.asarray(self.cerebellum_center)
        off = (self.cerebellum_half_length - self.cerebellum_lobe_radius) * self.axis
        return np.array([c - off, c + off])

    def _cerebellum_outline(self) -> np.ndarray:
        t = np.linspace(0, 2 * np.pi, 64, endpoint=False)
        ring = np.stack([np.cos(t), np.sin(t)], axis=1) * self.cerebellum_lobe_radius
        return np.concatenate([lc + ring for lc in self._lobe_centers()])

    def _skull_uv(self, x, y):
        cx, cy = self.skull_center
        c, s = math.cos(self.skull_rotation), math.sin(self.skull_rotation)
        return (x - cx) * c + (y - cy) * s, -(x - cx) * s + (y - cy) * c

    def _skull_rho(self, x, y):
        a, b = self.skull_axes
        u, v = self._skull_uv(x, y)
        return np.sqrt((u / a) ** 2 + (v / b) ** 2)

    def _skull_distance(self, x, y):
        """Normalised radius and first-order signed distance (px) to the skull ellipse."""
        a, b = self.skull_axes
        u, v = self._skull_uv(x, y)
        rho = np.sqrt((u / a) ** 2 + (v / b) ** 2)
        grad = np.sqrt((u / a**2) ** 2 + (v / b**2) ** 2) / np.maximum(rho, 1e-12)
        return rho, (rho - 1.0) / np.maximum(grad, 1e-12)

    def skull_extent(self) -> tuple[float, float]:
        """Half width and half height of the skull's bounding box."""
        a, b = self.skull_axes
        c, s = math.cos(self.skull_rotation), math.sin(self.skull_rotation)
        return math.hypot(a * c, b * s), math.hypot(a * s, b * c)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        d = dict(d)
        for k in ("skull_center", "skull_axes", "cerebellum_center", "pixel_spacing"):
            d[k] = tuple(d[k])
        return cls(**d)


@dataclass(frozen=True)
class PhantomRanges:
    skull_major: tuple[float, float] = (150.0, 190.0)
    axis_ratio: tuple[float, float] = (0.74, 0.88)
    skull_rotation: tuple[float, float] = (-0.35, 0.35)
    center_jitter: float = 20.0
    cerebellum_offset: tuple[float, float] = (0.42, 0.55)  # along the major axis, fraction of a
    cerebellum_half_length: tuple[float, float] = (0.17, 0.24)  # fraction of a
    lobe_ratio: tuple[float, float] = (0.38, 0.5)  # lobe radius / half length
    spacing: tuple[float, float] = (0.17, 0.23)  # mm/px along x
    anisotropy: tuple[float, float] = (0.92, 1.08)  # sy / sx
    sigma: float = 5.0  # Gaussian keypoint target width, px

    def validate(self) -> "PhantomRanges":
        for name in ("skull_major", "axis_ratio", "cerebellum_offset", "cerebellum_half_length",
                     "lobe_ratio", "spacing", "anisotropy"):
            lo, hi = getattr(self, name)
            if not (0 < lo <= hi):
                raise PhantomConfigError(f"range {name}={getattr(self, name)} must satisfy 0 < lo <= hi")
        if self.axis_ratio[1] > 1 or self.lobe_ratio[1] > 1:
            raise PhantomConfigError("ratios must not exceed 1")
        if self.cerebellum_offset[1] + self.cerebellum_half_length[1] >= 1:
            raise PhantomConfigError("cerebellum would reach outside the skull")
        if self.center_jitter < 0 or self.sigma <= 0:
            raise PhantomConfigError("center_jitter must be >= 0 and sigma > 0")
        if self.skull_major[1] + self.center_jitter >= W / 2:
            raise PhantomConfigError("skull would not fit in the image")
        return self

    @classmethod
    def from_dict(cls, d: dict | None) -> "PhantomRanges":
        d = {k: (tuple(v) if isinstance(v, list) else v) for k, v in (d or {}).items()}
        return cls(**d).validate()


@dataclass
class Sample:
    image: np.ndarray  # (H, W) float32 in [0, 1]
    spacing: tuple[float, float]
    domain: str
    labels: np.ndarray | None = None  # (3, H, W): skull mask, UEP heatmap, LEP heatmap
    keypoints: np.ndarray | None = None  # rows (x, y): UEP, LEP
    gt_biometry: tuple[float, float] | None = None  # (HC mm, TCD mm)
    sample_id: str = ""
    spec: PhantomSpec | None = field(default=None, repr=False)

    @property
    def shape(self) -> tuple[int, int]:
        return self.image.shape


@dataclass
class DatasetManifest:
    root: Path
    seed: int
    splits: dict[str, list[str]]
    config: dict = field(default_factory=dict)
    checksums: dict[str, str] = field(default_factory=dict)

    @classmethod
    def load(cls, root) -> "DatasetManifest":
        root = Path(root)
        path = root / "manifest.json"
        if not path.is_file():
            raise FileNotFoundError(f"no manifest.json under {root}")
        d = json.loads(path.read_text())
        return cls(root=root, seed=d["seed"], splits=d["splits"], config=d.get("config", {}),
                   checksums=d.get("checksums", {}))

    def __len__(self) -> int:
        return sum(len(v) for v in self.splits.values())

    def iter_split(self, split: str) -> Iterator[Sample]:
        if split not in self.splits:
            raise KeyError(f"unknown split {split!r}; have {sorted(self.splits)}")
        for sid in self.splits[split]:
            yield load_sample(self.root / split, sid)

    def load_split(self, split: str) -> list[Sample]:
        return list(self.iter_split(split))


# -- geometry ---------------------------------------------------------------

def sample_spec(rng: np.random.Generator, ranges: PhantomRanges) -> PhantomSpec:
    u = rng.uniform
    a = u(*ranges.skull_major)
    b = a * u(*ranges.axis_ratio)
    rot = u(*ranges.skull_rotation)
    j = ranges.center_jitter
    cx, cy = W / 2 + u(-j, j), H / 2 + u(-j, j)
    side = 1.0 if rng.random() < 0.5 else -1.0
    off = side * a * u(*ranges.cerebellum_offset)
    ccx, ccy = cx + off * math.cos(rot), cy + off * math.sin(rot)
    half = a * u(*ranges.cerebellum_half_length)
    # snap both extreme points to pixel centres so targets and TCD agree exactly
    axis = np.array([-math.sin(rot), math.cos(rot)])
    p = np.round(np.array([ccx, ccy]) - half * axis)
    q = np.round(np.array([ccx, ccy]) + half * axis)
    center = (p + q) / 2
    half = float(np.linalg.norm(q - p) / 2)
    crot = math.atan2(q[1] - p[1], q[0] - p[0])
    sx = u(*ranges.spacing)
    sy = sx * u(*ranges.anisotropy)
    return PhantomSpec(
        skull_center=(cx, cy),
        skull_axes=(a, b),
        skull_rotation=rot,
        cerebellum_center=(float(center[0]), float(center[1])),
        cerebellum_half_length=half,
        cerebellum_lobe_radius=half * u(*ranges.lobe_ratio),
        cerebellum_rotation=crot,
        tissue_texture_seed=int(rng.integers(2**31)),
        pixel_spacing=(sx, sy),
    )


def ellipse_perimeter_mm(center, axes, rotation, spacing) -> float:
    """Arc length of the skull ellipse after scaling x and y to millimetres."""
    a, b = axes
    sx, sy = spacing
    c, s = math.cos(rotation), math.sin(rotation)

    def speed(t):
        dx = -a * math.sin(t) * c - b * math.cos(t) * s
        dy = -a * math.sin(t) * s + b * math.cos(t) * c
        return math.hypot(sx * dx, sy * dy)

    value, _ = integrate.quad(speed, 0.0, 2.0 * math.pi, epsabs=1e-10, epsrel=1e-12, limit=200)
    return value


def analytic_biometry(spec: PhantomSpec) -> tuple[float, float]:
    hc = ellipse_perimeter_mm(spec.skull_center, spec.skull_axes, spec.skull_rotation, spec.pixel_spacing)
    uep, lep = spec.keypoints()
    sx, sy = spec.pixel_spacing
    tcd = math.hypot((lep[0] - uep[0]) * sx, (lep[1] - uep[1]) * sy)
    return hc, tcd


# -- rendering --------------------------------------------------------------

def _texture(rng, sigma: float) -> np.ndarray:
    t = ndimage.gaussian_filter(rng.standard_normal((H, W)), sigma)
    return t / (t.std() + 1e-12)


def _rayleigh_field(rng, grain: float) -> np.ndarray:
    # magnitude of correlated circular Gaussian noise, normalised to unit mean
    re = ndimage.gaussian_filter(rng.standard_normal((H, W)), grain)
    im = ndimage.gaussian_filter(rng.standard_normal((H, W)), grain)
    mag = np.hypot(re, im)
    return mag / mag.mean()


def skull_mask(spec: PhantomSpec, shape=(H, W)) -> np.ndarray:
    yy, xx = np.mgrid[0:shape[0], 0:shape[1]].astype(np.float64)
    return (spec._skull_rho(xx, yy) <= 1.0).astype(np.float32)


def render_anatomy(spec: PhantomSpec) -> np.ndarray:
    """Noise-free echogenicity map in [0, 1]."""
    rng = np.random.default_rng(spec.tissue_texture_seed)
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    rho, dist = spec._skull_distance(xx, yy)
    a, b = spec.skull_axes
    thickness = rng.uniform(3.0, 5.0)

    img = 0.14 + 0.05 * _texture(rng, 6.0)  # maternal tissue
    fluid = (rho > 1.0) & (rho < 1.0 + rng.uniform(0.08, 0.15))
    img = np.where(fluid, 0.04, img)
    brain = rho < 1.0
    img = np.where(brain, 0.24 + 0.06 * _texture(rng, 4.0), img)

    # midline echo along the major axis
    cx, cy = spec.skull_center
    c, s = math.cos(spec.skull_rotation), math.sin(spec.skull_rotation)
    v = -(xx - cx) * s + (yy - cy) * c
    img += brain * 0.22 * np.exp(-(v**2) / (2 * 1.5**2)) * (rho < 0.85)

    # paired hypoechoic thalami near the centre
    u = (xx - cx) * c + (yy - cy) * s
    for sgn in (-1.0, 1.0):
        d2 = ((u + 0.05 * a * sgn) / (0.16 * a)) ** 2 + ((v - sgn * 0.12 * b) / (0.1 * b)) ** 2
        img = np.where(d2 < 1.0, 0.12, img)

    # cerebellum: two hypoechoic lobes with an echogenic rim plus a bright vermis
    r = spec.cerebellum_lobe_radius
    for lc in spec._lobe_centers():
        d = np.hypot(xx - lc[0], yy - lc[1])
        img = np.where(d < r, 0.16, img)
        img += 0.55 * np.exp(-((d - r) ** 2) / (2 * 2.0**2))
    ccx, ccy = spec.cerebellum_center
    along = (xx - ccx) * spec.axis[0] + (yy - ccy) * spec.axis[1]
    across = -(xx - ccx) * spec.axis[1] + (yy - ccy) * spec.axis[0]
    vermis = (along / (0.35 * spec.cerebellum_half_length)) ** 2 + (across / (0.9 * r)) ** 2
    img += 0.3 * np.exp(-vermis * 2.0)

    img += 0.78 * np.exp(-(dist**2) / (2 * thickness**2))
    return np.clip(img, 0.0, 1.0)


def render_he(anatomy: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    img = ndimage.gaussian_filter(anatomy, 0.7)
    img = img * (1.0 + 0.35 * (_rayleigh_field(rng, 1.0) - 1.0))
    return np.clip(img, 0.0, 1.0)


def render_lc(anatomy: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    # contrast compression towards a raised, hazy mean plus depth attenuation
    c = rng.uniform(0.4, 0.55)
    img = anatomy.mean() + c * (anatomy - anatomy.mean()) + rng.uniform(0.05, 0.12)
    depth = np.linspace(0.0, 1.0, H)[:, None]
    img = img * np.exp(-rng.uniform(0.3, 0.8) * depth)
    img = ndimage.gaussian_filter(img, rng.uniform(2.0, 3.0))
    img = img * (1.0 + rng.uniform(0.6, 0.8) * (_rayleigh_field(rng, rng.uniform(1.5, 2.5)) - 1.0))
    # acoustic shadow: angular sector from a virtual apex above the image
    apex_x, apex_y = rng.uniform(0.2 * W, 0.8 * W), -0.6 * H
    yy, xx = np.mgrid[0:H, 0:W]
    ang = np.arctan2(xx - apex_x, yy - apex_y)
    centre = rng.uniform(ang.min(), ang.max())
    width = np.deg2rad(rng.uniform(6.0, 12.0))
    img = np.where(np.abs(ang - centre) < width / 2, img * rng.uniform(0.3, 0.6), img)
    # resolution loss
    f = rng.uniform(2.5, 3.5)
    small = resize(img, (int(H / f), int(W / f)), order=1, anti_aliasing=True, preserve_range=True)
    img = resize(small, (H, W), order=1, anti_aliasing=False, preserve_range=True)
    return np.clip(img, 0.0, 1.0)


def _rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, keys)]))


def generate_phantom(seed: int, domain: str, ranges: PhantomRanges | None = None, *,
                     with_labels: bool = True) -> Sample:
    """Deterministically render phantom ``seed`` in the given domain."""
    if domain not in DOMAINS:
        raise ValueError(f"domain must be one of {DOMAINS}, got {domain!r}")
    ranges = (ranges or PhantomRanges()).validate()
    spec = sample_spec(_rng(seed, 0), ranges)
    return render_sample(spec, domain, _rng(seed, 1, _DOMAIN_CODE[domain]), sigma=ranges.sigma,
                         with_labels=with_labels)


def render_sample(spec: PhantomSpec, domain: str, rng: np.random.Generator, *, sigma: float = 5.0,
                  with_labels: bool = True, sample_id: str = "") -> Sample:
    anatomy = render_anatomy(spec)
    image = render_he(anatomy, rng) if domain == "HE" else render_lc(anatomy, rng)
    s = Sample(image=image.astype(np.float32), spacing=tuple(spec.pixel_spacing), domain=domain,
               sample_id=sample_id, spec=spec)
    if with_labels:
        kp = spec.keypoints()
        s.keypoints = kp
        s.labels = np.concatenate([skull_mask(spec)[None], gaussian_target(kp, sigma, (H, W))])
        s.gt_biometry = analytic_biometry(spec)
    return s


# -- preprocessing ----------------------------------------------------------

def resize_sample(sample: Sample, shape: tuple[int, int], sigma: float | None = None) -> Sample:
    """Resample a sample to ``shape``, updating spacing and keypoints per axis.

    Heatmaps are re-rendered at the new resolution from the rescaled
    keypoints (width ``sigma`` px) when keypoints are available.
    """
    h0, w0 = sample.shape
    h1, w1 = shape
    if (h0, w0) == (h1, w1):
        return sample
    fx, fy = w1 / w0, h1 / h0
    image = resize(sample.image, shape, order=1, anti_aliasing=True, preserve_range=True)
    out = replace(sample, image=np.clip(image, 0, 1).astype(np.float32),
                  spacing=(sample.spacing[0] / fx, sample.spacing[1] / fy))
    if sample.keypoints is not None:
        # pixel-centre convention: x' + 0.5 = (x + 0.5) * fx
        out.keypoints = (sample.keypoints + 0.5) * np.array([fx, fy]) - 0.5
    if sample.labels is not None:
        mask = resize(sample.labels[0], shape, order=1, anti_aliasing=True, preserve_range=True) >= 0.5
        if out.keypoints is not None and sigma is not None:
            heat = gaussian_target(out.keypoints, sigma, shape)
        else:
            heat = np.stack([resize(c, shape, order=1, anti_aliasing=True, preserve_range=True)
                             for c in sample.labels[1:]])
        out.labels = np.concatenate([mask[None].astype(np.float32), heat.astype(np.float32)])
    return out


# -- on-disk dataset --------------------------------------------------------

def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def save_sample(sample: Sample, directory: Path) -> list[Path]:
    directory.mkdir(parents=True, exist_ok=True)
    sid = sample.sample_id
    img_path = directory / f"{sid}.png"
    arr = np.round(np.clip(sample.image, 0, 1) * 65535).astype(np.uint16)
    Image.fromarray(arr).save(img_path)
    written = [img_path]
    side = {"id": sid, "domain": sample.domain, "spacing": list(sample.spacing), "shape": list(sample.shape)}
    if sample.labels is not None:
        lab_path = directory / f"{sid}_labels.tif"
        lab = np.round(np.clip(sample.labels, 0, 1) * 65535).astype(np.uint16)
        tifffile.imwrite(lab_path, lab, compression="zlib", photometric="minisblack", metadata=None)
        written.append(lab_path)
    if sample.keypoints is not None:
        side["keypoints"] = {"uep": sample.keypoints[0].tolist(), "lep": sample.keypoints[1].tolist()}
    if sample.gt_biometry is not None:
        side["gt_biometry"] = {"hc_mm": sample.gt_biometry[0], "tcd_mm": sample.gt_biometry[1]}
    if sample.spec is not None and sample.labels is not None:
        side["phantom"] = sample.spec.to_dict()
    meta_path = directory / f"{sid}.json"
    meta_path.write_text(json.dumps(side, indent=1, sort_keys=True))
    written.append(meta_path)
    return written


def read_image(path) -> np.ndarray:
    arr = np.asarray(Image.open(path))
    if arr.dtype == np.uint16 or arr.max() > 255:
        return (arr.astype(np.float32) / 65535.0)
    return arr.astype(np.float32) / 255.0


def load_sample(directory, sample_id: str) -> Sample:
    directory = Path(directory)
    meta = json.loads((directory / f"{sample_id}.json").read_text())
    s = Sample(image=read_image(directory / f"{sample_id}.png"), spacing=tuple(meta["spacing"]),
               domain=meta["domain"], sample_id=sample_id)
    lab = directory / f"{sample_id}_labels.tif"
    if lab.is_file():
        s.labels = tifffile.imread(lab).astype(np.float32) / 65535.0
    if "keypoints" in meta:
        s.keypoints = np.array([meta["keypoints"]["uep"], meta["keypoints"]["lep"]], dtype=np.float64)
    if "gt_biometry" in meta:
        s.gt_biometry = (meta["gt_biometry"]["hc_mm"], meta["gt_biometry"]["tcd_mm"])
    if "phantom" in meta:
        s.spec = PhantomSpec.from_dict(meta["phantom"])
    return s


@dataclass(frozen=True)
class DatasetConfig:
    he_train: int = 500
    lc_train: int = 400
    lc_test: int = 200
    he_test: int = 0  # optional held-out high-end split
    seed: int = 1
    ranges: PhantomRanges = PhantomRanges()

    def validate(self) -> "DatasetConfig":
        for name in SPLITS[:3]:
            if getattr(self, name) <= 0:
                raise PhantomConfigError(f"split {name} needs a positive count")
        if self.he_test < 0:
            raise PhantomConfigError("he_test count must be >= 0")
        self.ranges.validate()
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        d = dict(d)
        counts = d.pop("counts", {})
        d.update(counts)
        d["ranges"] = PhantomRanges.from_dict(d.get("ranges"))
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ranges"] = asdict(self.ranges)
        return d


def _split_plan(cfg: DatasetConfig) -> Iterable[tuple[str, int, str]]:
    index = 0
    for split in SPLITS:
        for _ in range(getattr(cfg, split)):
            yield split, index, _SPLIT_DOMAIN[split]
            index += 1


def generate_dataset(cfg: DatasetConfig, out) -> DatasetManifest:
    """Write all three splits plus ``manifest.json`` under ``out``.

    Each phantom index is a distinct head, so splits never share geometry.
    Randomness is keyed by ``(seed, index)``; output does not depend on
    generation order.
    """
    cfg.validate()
    root = Path(out)
    root.mkdir(parents=True, exist_ok=True)
    splits: dict[str, list[str]] = {s: [] for s in SPLITS if getattr(cfg, s) > 0}
    checksums: dict[str, str] = {}
    for split, index, domain in _split_plan(cfg):
        sid = f"{split}_{index:05d}"
        spec = sample_spec(_rng(cfg.seed, index, 0), cfg.ranges)
        labelled = split != "lc_train"
        s = render_sample(spec, domain, _rng(cfg.seed, index, 1, _DOMAIN_CODE[domain]),
                          sigma=cfg.ranges.sigma, with_labels=labelled, sample_id=sid)
        for p in save_sample(s, root / split):
            checksums[f"{split}/{p.name}"] = _sha256(p)
        splits[split].append(sid)
    manifest = DatasetManifest(root=root, seed=cfg.seed, splits=splits, config=cfg.to_dict(),
                               checksums=checksums)
    (root / "manifest.json").write_text(json.dumps(
        {"seed": cfg.seed, "splits": splits, "config": manifest.config, "checksums": checksums},
        indent=1, sort_keys=True))
    return manifest
