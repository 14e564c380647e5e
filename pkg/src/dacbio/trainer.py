"""Two-step adversarial optimisation of the discriminator and the segmentation network."""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .augment import AugmentPipeline
from .config import TrainConfig, save_config
from .dc_pathway import adaptation_input, disc_loss, gen_adv_loss
from .nets import Discriminator, ForwardResult, SegNet, dice_loss
from .phantom import DatasetManifest, Sample, resize_sample
from .sc_pathway import compute_adv_perturbation, vat_loss

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "dacbio-checkpoint"
CHECKPOINT_VERSION = 1
METRIC_FIELDS = ("step", "epoch", "L_seg", "L_D", "L_adv_G", "L_adv_D", "lr_G", "lr_D", "L_joint")


class NonFiniteLossError(FloatingPointError):
    pass


class DatasetError(RuntimeError):
    pass


def default_device() -> str:
    return os.environ.get("DACBIO_DEVICE", "cpu")


def lr_schedule(epoch: int, base_lr: float, milestones: Sequence[int] = (40, 60), gamma: float = 0.1) -> float:
    """Piecewise-constant decay: multiply by ``gamma`` once per milestone reached."""
    return base_lr * gamma ** sum(epoch >= m for m in milestones)


def joint_loss(l_seg, l_d, l_adv, alpha: float, beta: float):
    """L_seg + alpha * L_D + beta * L_adv(G); works on floats and tensors alike."""
    return l_seg + alpha * l_d + beta * l_adv


@dataclass
class StepMetrics:
    step: int
    epoch: int
    L_seg: float
    L_D: float
    L_adv_G: float
    L_adv_D: float
    lr_G: float
    lr_D: float
    L_joint: float


def _finite_or_raise(name: str, value: torch.Tensor, context: dict):
    if not torch.isfinite(value).all():
        raise NonFiniteLossError(f"non-finite {name} ({value.item()}) at {context}")


class Trainer:
    """Owns the generator, the discriminator and both optimisers."""

    def __init__(self, cfg: TrainConfig, device: str | None = None):
        self.cfg = cfg
        self.device = torch.device(device or default_device())
        torch.manual_seed(cfg.seed)
        self.generator = SegNet().to(self.device)
        self.discriminator = Discriminator(cfg.dc.adapt_space).to(self.device) if cfg.dc else None
        self.g_opt = torch.optim.SGD(self.generator.parameters(), lr=cfg.g_lr, momentum=cfg.g_momentum,
                                     weight_decay=cfg.g_weight_decay, nesterov=True)
        self.d_opt = None
        if self.discriminator is not None:
            self.d_opt = torch.optim.Adam(self.discriminator.parameters(), lr=cfg.d_lr,
                                          weight_decay=cfg.d_weight_decay)
        self.epoch = 0
        self.step = 0
        self.history: list[StepMetrics] = []
        self.epoch_losses: list[float] = []
        self.set_epoch(0)

    # -- schedule -----------------------------------------------------------

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch
        for opt, base in ((self.g_opt, self.cfg.g_lr), (self.d_opt, self.cfg.d_lr)):
            if opt is None:
                continue
            for group in opt.param_groups:
                group["lr"] = lr_schedule(epoch, base, self.cfg.lr_milestones, self.cfg.lr_gamma)

    @property
    def lr_g(self) -> float:
        return self.g_opt.param_groups[0]["lr"]

    @property
    def lr_d(self) -> float:
        return self.d_opt.param_groups[0]["lr"] if self.d_opt is not None else 0.0

    # -- one optimisation step ----------------------------------------------

    def forward_pair(self, x_he: torch.Tensor, x_lc: torch.Tensor | None):
        self.generator.train()
        res_he = self.generator(x_he)
        res_lc = None
        if x_lc is not None and self.cfg.dc is not None:
            res_lc = self.generator(x_lc)
        elif x_lc is not None and self.cfg.sc is not None:
            with torch.no_grad():
                res_lc = self.generator(x_lc)
        return res_he, res_lc

    def discriminator_update(self, res_he: ForwardResult, res_lc: ForwardResult) -> float:
        """Step 1: update the discriminator with the generator frozen."""
        if self.discriminator is None:
            return 0.0
        space, family = self.cfg.dc.adapt_space, self.cfg.dc.loss_family
        self.discriminator.train()
        for p in self.discriminator.parameters():
            p.requires_grad_(True)
        loss = disc_loss(self.discriminator, adaptation_input(res_he, space).detach(),
                         adaptation_input(res_lc, space).detach(), family)
        _finite_or_raise("L_adv_D", loss, {"step": self.step, "epoch": self.epoch})
        self.d_opt.zero_grad(set_to_none=True)
        loss.backward()
        self.d_opt.step()
        return float(loss.detach())

    def generator_update(self, res_he: ForwardResult, y_he: torch.Tensor, x_lc: torch.Tensor | None,
                         res_lc: ForwardResult | None) -> dict:
        """Step 2: minimise L_seg + alpha * L_D + beta * L_adv(G) with the discriminator frozen."""
        cfg = self.cfg
        l_seg = dice_loss(res_he.probmap, y_he)
        l_vat = torch.zeros((), device=self.device)
        l_adv = torch.zeros((), device=self.device)
        if cfg.sc is not None and x_lc is not None:
            gen = torch.Generator().manual_seed(int(np.random.SeedSequence([cfg.seed, self.step]).generate_state(1)[0]))
            target = res_lc.probmap.detach()
            xi_adv = compute_adv_perturbation(self.generator, x_lc, cfg.sc, generator=gen, target=target)
            l_vat = vat_loss(self.generator, x_lc, xi_adv, target=target)
        if self.discriminator is not None and res_lc is not None:
            for p in self.discriminator.parameters():
                p.requires_grad_(False)
            l_adv = gen_adv_loss(self.discriminator, adaptation_input(res_lc, cfg.dc.adapt_space),
                                 cfg.dc.loss_family)
        # disabled pathways contribute exactly zero
        joint = l_seg
        if cfg.sc is not None or cfg.dc is not None:
            joint = joint_loss(l_seg, l_vat, l_adv, cfg.alpha, cfg.beta)
        _finite_or_raise("L_joint", joint, {"step": self.step, "epoch": self.epoch,
                                            "L_seg": float(l_seg.detach()), "L_D": float(l_vat.detach()),
                                            "L_adv_G": float(l_adv.detach())})
        self.g_opt.zero_grad(set_to_none=True)
        joint.backward()
        self.g_opt.step()
        if self.discriminator is not None:
            for p in self.discriminator.parameters():
                p.requires_grad_(True)
        return {"L_seg": float(l_seg.detach()), "L_D": float(l_vat.detach()),
                "L_adv_G": float(l_adv.detach()), "L_joint": float(joint.detach())}

    def train_step(self, x_he, y_he, x_lc=None) -> StepMetrics:
        x_he = torch.as_tensor(x_he, dtype=torch.float32, device=self.device)
        y_he = torch.as_tensor(y_he, dtype=torch.float32, device=self.device)
        if x_he.dim() == 3:
            x_he = x_he[:, None]
        if x_lc is not None and (self.cfg.dc is not None or self.cfg.sc is not None):
            x_lc = torch.as_tensor(x_lc, dtype=torch.float32, device=self.device)
            if x_lc.dim() == 3:
                x_lc = x_lc[:, None]
        else:
            x_lc = None
        res_he, res_lc = self.forward_pair(x_he, x_lc)
        l_adv_d = self.discriminator_update(res_he, res_lc) if res_lc is not None else 0.0
        terms = self.generator_update(res_he, y_he, x_lc, res_lc)
        m = StepMetrics(step=self.step, epoch=self.epoch, L_adv_D=l_adv_d, lr_G=self.lr_g, lr_D=self.lr_d, **terms)
        self.history.append(m)
        self.step += 1
        return m

    # -- persistence ----------------------------------------------------------

    def state_dict(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "config": self.cfg.to_dict(),
            "epoch": self.epoch,
            "step": self.step,
            "generator": self.generator.state_dict(),
            "discriminator": self.discriminator.state_dict() if self.discriminator is not None else None,
            "g_opt": self.g_opt.state_dict(),
            "d_opt": self.d_opt.state_dict() if self.d_opt is not None else None,
            "history": [asdict(m) for m in self.history],
            "epoch_losses": list(self.epoch_losses),
            "torch_rng": torch.get_rng_state(),
        }

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(self.state_dict(), path)
        return path

    @classmethod
    def load(cls, path, device: str | None = None) -> "Trainer":
        ckpt = load_checkpoint(path)
        trainer = cls(TrainConfig.from_dict(ckpt["config"]), device=device)
        trainer.generator.load_state_dict(ckpt["generator"])
        if trainer.discriminator is not None and ckpt["discriminator"] is not None:
            trainer.discriminator.load_state_dict(ckpt["discriminator"])
        trainer.g_opt.load_state_dict(ckpt["g_opt"])
        if trainer.d_opt is not None and ckpt["d_opt"] is not None:
            trainer.d_opt.load_state_dict(ckpt["d_opt"])
        trainer.step = ckpt["step"]
        trainer.epoch = ckpt["epoch"]
        trainer.history = [StepMetrics(**m) for m in ckpt["history"]]
        trainer.epoch_losses = list(ckpt.get("epoch_losses", []))
        torch.set_rng_state(ckpt["torch_rng"])
        return trainer


def load_checkpoint(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint {path} does not exist")
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(ckpt, dict) or ckpt.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if ckpt.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {ckpt.get('version')}")
    return ckpt


# -- data plan --------------------------------------------------------------

def _rng(*keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in keys]))


class BatchPlan:
    """Deterministic batch composition keyed by ``(seed, epoch)``.

    An epoch walks a fresh permutation of the high-end split; the low-cost
    split is consumed as an endless stream of permutations so it cycles
    independently of the epoch boundary.
    """

    def __init__(self, n_he: int, n_lc: int, batch_size: int, seed: int):
        if n_he < batch_size:
            raise DatasetError(f"need at least batch_size={batch_size} labelled samples, got {n_he}")
        self.n_he, self.n_lc, self.batch_size, self.seed = n_he, n_lc, batch_size, seed
        self._lc_perms: dict[int, np.ndarray] = {}

    @property
    def steps_per_epoch(self) -> int:
        return self.n_he // self.batch_size

    def he_indices(self, epoch: int, j: int) -> np.ndarray:
        perm = _rng(self.seed, 0, epoch).permutation(self.n_he)
        return perm[j * self.batch_size:(j + 1) * self.batch_size]

    def lc_indices(self, global_step: int) -> np.ndarray:
        if self.n_lc == 0:
            return np.array([], dtype=int)
        ks = np.arange(global_step * self.batch_size, (global_step + 1) * self.batch_size)
        out = []
        for k in ks:
            cycle, pos = divmod(int(k), self.n_lc)
            if cycle not in self._lc_perms:
                self._lc_perms[cycle] = _rng(self.seed, 1, cycle).permutation(self.n_lc)
            out.append(self._lc_perms[cycle][pos])
        return np.array(out)


def augment_batch(samples: Sequence[Sample], indices, pipeline: AugmentPipeline, seed: int, epoch: int,
                  domain_code: int):
    """Augment with one rng substream per ``(seed, epoch, domain, sample index)``."""
    out = [pipeline(samples[i], _rng(seed, 2, epoch, domain_code, int(i))) for i in indices]
    x = np.stack([s.image for s in out])[:, None]
    y = np.stack([s.labels for s in out]) if out[0].labels is not None else None
    return x, y


def _write_metrics(path: Path, rows: Sequence[StepMetrics], header: bool):
    with path.open("a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
        if header:
            w.writeheader()
        for m in rows:
            w.writerow(asdict(m))


def run_training(trainer: Trainer, he: Sequence[Sample], lc: Sequence[Sample], out_dir=None,
                 max_steps: int | None = None) -> Trainer:
    """Run the remaining epochs of ``trainer.cfg``, resuming from ``trainer.epoch``.

    Writes ``metrics.csv``, ``last.pt`` and ``best.pt`` (lowest epoch-mean
    joint loss) under ``out_dir`` when given.
    """
    cfg = trainer.cfg
    if any(s.labels is None for s in he):
        raise DatasetError("every high-end training sample needs labels")
    needs_lc = cfg.dc is not None or cfg.sc is not None
    if needs_lc and len(lc) < 1:
        raise DatasetError("this variant needs unlabelled low-cost samples")
    plan = BatchPlan(len(he), len(lc), cfg.batch_size, cfg.seed)
    he_aug = AugmentPipeline(cfg.he_augmentation, cfg.augment)
    lc_aug = AugmentPipeline(cfg.lc_augmentation, cfg.augment)
    out = Path(out_dir) if out_dir is not None else None
    metrics_path = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics_path = out / "metrics.csv"
        if trainer.step == 0 and metrics_path.exists():
            metrics_path.unlink()
    start_epoch = trainer.step // plan.steps_per_epoch
    for epoch in range(start_epoch, cfg.epochs):
        trainer.set_epoch(epoch)
        first = trainer.step - epoch * plan.steps_per_epoch
        rows = []
        for j in range(first, plan.steps_per_epoch):
            if max_steps is not None and trainer.step >= max_steps:
                break
            x_he, y_he = augment_batch(he, plan.he_indices(epoch, j), he_aug, cfg.seed, epoch, 0)
            x_lc = None
            if needs_lc:
                x_lc, _ = augment_batch(lc, plan.lc_indices(trainer.step), lc_aug, cfg.seed, epoch, 1)
            try:
                rows.append(trainer.train_step(x_he, y_he, x_lc))
            except NonFiniteLossError:
                if out is not None:
                    trainer.save(out / "nonfinite_snapshot.pt")
                raise
        if metrics_path is not None:
            _write_metrics(metrics_path, rows, header=not metrics_path.exists())
        if not rows:
            break
        if len(rows) + first == plan.steps_per_epoch:
            mean_joint = float(np.mean([r.L_joint for r in rows]))
            log.info("epoch %d: joint %.4f seg %.4f", epoch, mean_joint, np.mean([r.L_seg for r in rows]))
            trainer.epoch = epoch + 1
            best = min(trainer.epoch_losses, default=math.inf)
            trainer.epoch_losses.append(mean_joint)
            if out is not None:
                trainer.save(out / "last.pt")
                if mean_joint < best:
                    trainer.save(out / "best.pt")
    return trainer


def prepare_samples(samples: Iterable[Sample], cfg: TrainConfig) -> list[Sample]:
    return [resize_sample(s, cfg.input_shape, cfg.sigma) for s in samples]


def train(cfg: TrainConfig, manifest: DatasetManifest, out_dir, device: str | None = None) -> Path:
    """Train ``cfg`` on the manifest's training splits; returns the final checkpoint path."""
    out = Path(out_dir)
    try:
        he = prepare_samples(manifest.iter_split("he_train"), cfg)
        lc = []
        if cfg.dc is not None or cfg.sc is not None:
            lc = prepare_samples(manifest.iter_split("lc_train"), cfg)
    except (KeyError, FileNotFoundError, OSError, ValueError) as exc:
        raise DatasetError(f"cannot load training data from {manifest.root}: {exc}") from exc
    trainer = Trainer(cfg, device=device)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.yaml")
    run_training(trainer, he, lc, out)
    return out / "last.pt"
