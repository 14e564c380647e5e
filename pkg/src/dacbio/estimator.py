"""scikit-learn style front end.

``DACSegmenter`` learns from labelled high-end images plus unlabelled
low-cost images and predicts probability maps or biometry.
``BiometryExtractor`` is a stateless transformer from probability maps to
``(HC, TCD)`` in millimetres.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted
from skimage.transform import resize

from .biometry import BiometryError, compute_biometry
from .config import VARIANTS, TrainConfig
from .dc_pathway import DcConfig
from .phantom import Sample
from .sc_pathway import VatConfig
from .trainer import Trainer, default_device, run_training
from .validation import ShapeError, check_image_batch, check_label_batch, check_spacing


def _resize_images(X: np.ndarray, shape) -> np.ndarray:
    if X.shape[1:] == tuple(shape):
        return X
    return np.stack([resize(x, shape, order=1, anti_aliasing=True, preserve_range=True) for x in X]).clip(0, 1)


def _resize_labels(Y: np.ndarray, shape) -> np.ndarray:
    if Y.shape[2:] == tuple(shape):
        return Y
    out = []
    for y in Y:
        mask = resize(y[0], shape, order=1, anti_aliasing=True, preserve_range=True) >= 0.5
        heat = [resize(c, shape, order=1, anti_aliasing=True, preserve_range=True) for c in y[1:]]
        out.append(np.stack([mask, *heat]))
    return np.asarray(out, dtype=np.float32).clip(0, 1)


def _scaled_spacing(spacing, from_shape, to_shape):
    sx, sy = check_spacing(spacing)
    return sx * from_shape[1] / to_shape[1], sy * from_shape[0] / to_shape[0]


class DACSegmenter(BaseEstimator):
    """Segmentation network trained with optional domain and segmentation calibration.

    Parameters left as ``None`` are taken from the preset ``variant``
    (``"1"``..``"7"``).
    """

    def __init__(self, variant="7", *, augmentation=None, use_dc=None, loss_family=None, adapt_space=None,
                 beta=None, use_sc=None, alpha=None, epsilon=None, n_power_iters=None, epochs=70,
                 batch_size=4, g_lr=0.1, d_lr=1e-4, lr_milestones=(40, 60), input_shape=(448, 576),
                 sigma=5.0, random_state=0, device=None):
        self.variant = variant
        self.augmentation = augmentation
        self.use_dc = use_dc
        self.loss_family = loss_family
        self.adapt_space = adapt_space
        self.beta = beta
        self.use_sc = use_sc
        self.alpha = alpha
        self.epsilon = epsilon
        self.n_power_iters = n_power_iters
        self.epochs = epochs
        self.batch_size = batch_size
        self.g_lr = g_lr
        self.d_lr = d_lr
        self.lr_milestones = lr_milestones
        self.input_shape = input_shape
        self.sigma = sigma
        self.random_state = random_state
        self.device = device

    def build_config(self) -> TrainConfig:
        base = VARIANTS.get(str(self.variant), TrainConfig())
        dc = base.dc
        use_dc = dc is not None if self.use_dc is None else self.use_dc
        if use_dc:
            dc = dc or DcConfig()
            dc = DcConfig(self.loss_family or dc.loss_family, self.adapt_space or dc.adapt_space,
                          dc.beta if self.beta is None else self.beta)
        else:
            dc = None
        sc = base.sc
        use_sc = sc is not None if self.use_sc is None else self.use_sc
        if use_sc:
            sc = sc or VatConfig()
            sc = VatConfig(epsilon=sc.epsilon if self.epsilon is None else self.epsilon,
                           n_power_iters=sc.n_power_iters if self.n_power_iters is None else self.n_power_iters,
                           xi=sc.xi, alpha=sc.alpha if self.alpha is None else self.alpha)
        else:
            sc = None
        return replace(base, variant=str(self.variant), augmentation=self.augmentation or base.augmentation,
                       dc=dc, sc=sc, epochs=self.epochs, batch_size=self.batch_size, g_lr=self.g_lr,
                       d_lr=self.d_lr, lr_milestones=tuple(self.lr_milestones),
                       input_shape=tuple(self.input_shape), sigma=self.sigma, seed=int(self.random_state or 0))

    @classmethod
    def from_config(cls, cfg: TrainConfig, device=None) -> "DACSegmenter":
        return cls(variant=cfg.variant, augmentation=cfg.augmentation, use_dc=cfg.dc is not None,
                   loss_family=cfg.dc.loss_family if cfg.dc else None,
                   adapt_space=cfg.dc.adapt_space if cfg.dc else None, beta=cfg.dc.beta if cfg.dc else None,
                   use_sc=cfg.sc is not None, alpha=cfg.sc.alpha if cfg.sc else None,
                   epsilon=cfg.sc.epsilon if cfg.sc else None,
                   n_power_iters=cfg.sc.n_power_iters if cfg.sc else None, epochs=cfg.epochs,
                   batch_size=cfg.batch_size, g_lr=cfg.g_lr, d_lr=cfg.d_lr, lr_milestones=cfg.lr_milestones,
                   input_shape=cfg.input_shape, sigma=cfg.sigma, random_state=cfg.seed, device=device)

    @classmethod
    def from_checkpoint(cls, path, device=None) -> "DACSegmenter":
        trainer = Trainer.load(path, device=device)
        est = cls.from_config(trainer.cfg, device=device)
        est._attach(trainer)
        return est

    def _attach(self, trainer: Trainer):
        self.trainer_ = trainer
        self.config_ = trainer.cfg
        self.generator_ = trainer.generator
        return self

    def fit(self, X, y, X_target=None):
        """Train on labelled source images ``X`` / ``y`` and unlabelled target images ``X_target``.

        ``X``: ``(n, H, W)`` in [0, 1]; ``y``: ``(n, 3, H, W)`` (skull mask, UEP
        and LEP heatmaps).  Inputs are resampled to ``input_shape``.
        """
        cfg = self.build_config()
        X = check_image_batch(X)
        Y = check_label_batch(y, len(X), X.shape[1:])
        X, Y = _resize_images(X, cfg.input_shape), _resize_labels(Y, cfg.input_shape)
        he = [Sample(image=x.astype(np.float32), spacing=(1.0, 1.0), domain="HE", labels=lab)
              for x, lab in zip(X, Y)]
        lc = []
        if X_target is not None:
            Xt = _resize_images(check_image_batch(X_target), cfg.input_shape)
            lc = [Sample(image=x.astype(np.float32), spacing=(1.0, 1.0), domain="LC") for x in Xt]
        trainer = Trainer(cfg, device=self.device or default_device())
        run_training(trainer, he, lc)
        return self._attach(trainer)

    def predict_proba(self, X, batch_size: int = 4) -> np.ndarray:
        """Per-pixel probabilities ``(n, 3, h, w)`` at the network resolution ``input_shape``."""
        check_is_fitted(self, "generator_")
        X = _resize_images(check_image_batch(X), self.config_.input_shape)
        g = self.generator_
        g.eval()
        dev = next(g.parameters()).device
        out = []
        with torch.no_grad():
            for i in range(0, len(X), batch_size):
                xb = torch.as_tensor(X[i:i + batch_size], dtype=torch.float32, device=dev)[:, None]
                out.append(g(xb).probmap.cpu().numpy())
        return np.concatenate(out)

    def predict_biometry(self, X, spacing, **kw) -> list:
        """One :class:`Biometry` (or the raised :class:`BiometryError`) per image.

        ``spacing`` is the pixel spacing of ``X`` as given, either one
        ``(sx, sy)`` pair or one per image.
        """
        X = check_image_batch(X)
        spacings = _per_image_spacing(spacing, len(X))
        P = self.predict_proba(X)
        net_shape = P.shape[2:]
        return BiometryExtractor(**kw)._extract(
            P, [_scaled_spacing(s, X.shape[1:], net_shape) for s in spacings])

    def predict(self, X, spacing) -> np.ndarray:
        """``(n, 2)`` array of (HC, TCD) in mm; NaN where extraction failed."""
        return _to_array(self.predict_biometry(X, spacing))


def _per_image_spacing(spacing, n):
    arr = np.asarray(spacing, dtype=np.float64)
    if arr.shape == (2,):
        return [tuple(arr)] * n
    if arr.shape == (n, 2):
        return [tuple(r) for r in arr]
    raise ShapeError(f"spacing must be (2,) or ({n}, 2), got {arr.shape}")


def _to_array(results) -> np.ndarray:
    out = np.full((len(results), 2), np.nan)
    for i, r in enumerate(results):
        if not isinstance(r, Exception):
            out[i] = (r.hc_mm, r.tcd_mm)
    return out


class BiometryExtractor(TransformerMixin, BaseEstimator):
    """Probability maps ``(n, 3, H, W)`` -> ``(n, 2)`` array of (HC, TCD) in mm."""

    def __init__(self, threshold=0.5, refine=False):
        self.threshold = threshold
        self.refine = refine

    def fit(self, P=None, y=None):
        return self

    def _extract(self, P, spacings) -> list:
        results = []
        for p, s in zip(P, spacings):
            try:
                results.append(compute_biometry(p, s, threshold=self.threshold, refine=self.refine))
            except BiometryError as exc:
                results.append(exc)
        return results

    def transform(self, P, spacing=(1.0, 1.0)) -> np.ndarray:
        P = np.asarray(P)
        if P.ndim == 3:
            P = P[None]
        return _to_array(self._extract(P, _per_image_spacing(spacing, len(P))))
