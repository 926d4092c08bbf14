"""Self-adversarial training.

Each iteration runs up to two optimization phases on one mini-batch:

  Phase 1: ordinary step on (image, mask).
  Phase 2: a fresh adversarial image is built by a signed-gradient step of
           random magnitude eps ~ U(0, eps_max] against the *just-updated*
           parameters, and the same optimizer takes a second step on
           (adversarial image, same mask).

All stochastic choices of iteration n (batch indices, augmentation flags,
eps) come from a counter-based stream seeded with (rng_seed, n), so a run
interrupted by a checkpoint and resumed replays the exact loss sequence of an
uninterrupted run.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import checkpoint as ckpt_io
from .autograd import Adam, Tensor, add, bce_loss, no_grad
from .network import CoarseToFineModel, ModelConfig


@dataclass
class SatConfig:
    eps_max: float = 0.01
    lr: float = 0.002
    iterations: int = 100
    batch_size: int = 4
    rng_seed: int = 0
    sat_enabled: bool = True
    flip_rotate_enabled: bool = False

    def __post_init__(self):
        if not 0.0 < self.eps_max <= 1.0:
            raise ValueError(f"eps_max must be in (0, 1], got {self.eps_max}")
        if self.iterations < 0 or self.batch_size < 1:
            raise ValueError("iterations must be >= 0 and batch_size >= 1")


def total_loss(y_gt: np.ndarray, coarse_pred: Optional[Tensor],
               refined_pred: Tensor) -> Tensor:
    """Sum of the per-stage binary cross-entropies (single term if the
    coarse stage is absent)."""
    loss = bce_loss(refined_pred, y_gt)
    if coarse_pred is not None:
        loss = add(bce_loss(coarse_pred, y_gt), loss)
    return loss


def sample_eps(rng: np.random.Generator, n: int, eps_max: float) -> np.ndarray:
    """n draws from U(0, eps_max]: the zero endpoint is excluded by mapping
    u in [0,1) to eps_max * (1 - u)."""
    return eps_max * (1.0 - rng.random(n))


def fgsm(model: CoarseToFineModel, images: np.ndarray, masks: np.ndarray,
         eps) -> np.ndarray:
    """Signed-gradient adversarial images, clipped back into [0, 1].

    ``eps`` may be a scalar or a per-sample array of shape (n,).  Parameter
    values are untouched; the gradient buffers this pass fills on the
    parameters are zeroed before returning.
    """
    dtype = model.cfg.np_dtype
    inp = Tensor(images.astype(dtype), requires_grad=True)
    coarse, refined = model(inp)
    total_loss(masks.astype(dtype), coarse, refined).backward()
    step = np.asarray(eps, dtype=dtype)
    if step.ndim == 1:
        step = step.reshape(-1, 1, 1, 1)
    adv = np.clip(images + step * np.sign(inp.grad), 0.0, 1.0)
    for _, p in model.parameters():
        p.zero_grad()
    return adv.astype(images.dtype)


def apply_augment(image: np.ndarray, mask: np.ndarray, hflip: bool,
                  vflip: bool, quarter_turns: int):
    """Flip/rotate one (c, h, w) image and its (1, h, w) mask identically."""
    if hflip:
        image, mask = image[..., ::-1], mask[..., ::-1]
    if vflip:
        image, mask = image[:, ::-1], mask[:, ::-1]
    quarter_turns %= 4
    if quarter_turns:
        image = np.rot90(image, k=quarter_turns, axes=(1, 2))
        mask = np.rot90(mask, k=quarter_turns, axes=(1, 2))
    return np.ascontiguousarray(image), np.ascontiguousarray(mask)


class Trainer:
    """Owns a model, an Adam optimizer, and the iteration/loss counters."""

    def __init__(self, model: CoarseToFineModel, cfg: SatConfig,
                 log_path=None):
        self.model = model
        self.cfg = cfg
        self.opt = Adam(model.parameters(), lr=cfg.lr)
        self.iteration = 0
        self.loss_history = []
        self.log_path = log_path

    # stream (n, label) is fully determined by the seed: resume-safe;
    # label 0 drives batch choice/augmentation, label 1 drives eps
    def _iteration_rng(self, n: int, label: int) -> np.random.Generator:
        return np.random.default_rng(
            np.random.SeedSequence([self.cfg.rng_seed, n, label]))

    def _log(self, n: int, phase: int, eps, loss: float):
        eps_text = "-" if eps is None else f"{eps:.6g}"
        line = f"iter={n} phase={phase} eps={eps_text} loss={loss:.6f}"
        if self.log_path is not None:
            with open(self.log_path, "a") as f:
                f.write(line + "\n")
        return line

    def _phase_step(self, n: int, phase: int, images, masks, eps) -> float:
        dtype = self.model.cfg.np_dtype
        self.opt.zero_grad()
        coarse, refined = self.model(Tensor(images.astype(dtype)))
        loss = total_loss(masks.astype(dtype), coarse, refined)
        value = loss.item()
        if np.isnan(value):
            raise RuntimeError(f"NaN training loss at iteration {n} "
                               f"phase {phase}")
        loss.backward()
        self.opt.step()
        self.loss_history.append(value)
        self._log(n, phase, eps, value)
        return value

    def run_iteration(self, images: np.ndarray, masks: np.ndarray) -> list:
        """One training iteration on a preselected batch; returns the phase
        losses (one value, or two with SAT)."""
        n = self.iteration + 1
        losses = [self._phase_step(n, 1, images, masks, None)]
        if self.cfg.sat_enabled:
            eps = sample_eps(self._iteration_rng(n, 1), images.shape[0],
                             self.cfg.eps_max)
            adv = fgsm(self.model, images, masks, eps)
            losses.append(self._phase_step(n, 2, adv, masks,
                                           float(eps.mean())))
        self.iteration = n
        return losses

    def _select_batch(self, rng, images, masks):
        n_total = images.shape[0]
        replace = self.cfg.batch_size > n_total
        idx = rng.choice(n_total, size=self.cfg.batch_size, replace=replace)
        batch_img = images[idx].copy()
        batch_mask = masks[idx].copy()
        if self.cfg.flip_rotate_enabled:
            for i in range(batch_img.shape[0]):
                hflip, vflip = rng.random(2) < 0.5
                k = int(rng.integers(0, 4))
                batch_img[i], batch_mask[i] = apply_augment(
                    batch_img[i], batch_mask[i], hflip, vflip, k)
        return batch_img, batch_mask

    def train(self, images: np.ndarray, masks: np.ndarray,
              iterations: Optional[int] = None) -> list:
        """Run ``iterations`` more iterations (default: up to the configured
        total), sampling batches from the (N, 3, h, w) / (N, 1, h, w) pool."""
        if images.shape[0] != masks.shape[0] or images.shape[0] == 0:
            raise ValueError("images and masks must be nonempty and aligned")
        if iterations is None:
            iterations = self.cfg.iterations - self.iteration
        losses = []
        for _ in range(iterations):
            rng = self._iteration_rng(self.iteration + 1, 0)
            batch_img, batch_mask = self._select_batch(rng, images, masks)
            losses += self.run_iteration(batch_img, batch_mask)
        return losses

    # ------------------------------------------------------------------
    # persistence

    def save(self, path):
        ckpt_io.save_checkpoint(path, self.model, optimizer=self.opt,
                                iteration=self.iteration,
                                loss_history=self.loss_history,
                                sat_config=asdict(self.cfg))

    @classmethod
    def load(cls, path, log_path=None) -> "Trainer":
        data = ckpt_io.load_checkpoint(path)
        if data.optimizer is None:
            raise ValueError(f"{path}: checkpoint has no optimizer state, "
                             f"cannot resume training")
        model = ckpt_io.restore_model(data)
        cfg = SatConfig(**data.sat_config) if data.sat_config else SatConfig()
        trainer = cls(model, cfg, log_path=log_path)
        opt = trainer.opt
        opt.lr = data.optimizer["lr"]
        opt.beta1 = data.optimizer["beta1"]
        opt.beta2 = data.optimizer["beta2"]
        opt.eps = data.optimizer["eps"]
        opt.step_count = data.optimizer["step_count"]
        dtype = model.cfg.np_dtype
        for name, _ in model.parameters():
            opt.m[name][...] = data.moments1[name].astype(dtype)
            opt.v[name][...] = data.moments2[name].astype(dtype)
        trainer.iteration = data.iteration
        trainer.loss_history = list(data.loss_history)
        return trainer
