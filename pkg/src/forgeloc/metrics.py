"""Pixel-level localization metrics and content-preserving perturbations.

AUC uses the rank-sum (Mann-Whitney) formula, where tied prediction scores
count half a win, rather than integrating an ROC polygon; the two agree
exactly for curves built on the same tie groups, and the rank form makes the
tie convention explicit.  F1 thresholds at a fixed cut recorded in every
report header.  Perturbations keep image content recognizable while stressing
the predictor: down/up resizing, Gaussian blur, additive Gaussian noise, and
signed-gradient adversarial steps.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import cv2
import numpy as np
from scipy import stats

from . import dataforge as df
from .autograd import Tensor, no_grad
from .network import CoarseToFineModel
from .training import fgsm

F1_THRESHOLD = 0.5


# ---------------------------------------------------------------------------
# scalar metrics

def _flatten_pair(pred: np.ndarray, gt: np.ndarray):
    pred = np.asarray(pred, dtype=np.float64).ravel()
    gt = np.asarray(gt, dtype=np.float64).ravel()
    if pred.shape != gt.shape:
        raise ValueError(f"pred/gt size mismatch: {pred.shape} vs {gt.shape}")
    if not np.isin(gt, (0.0, 1.0)).all():
        raise ValueError("ground truth must be binary")
    return pred, gt


def pixel_auc(pred: np.ndarray, gt: np.ndarray) -> float:
    """Probability that a uniformly random tampered pixel scores higher than
    a uniformly random pristine one; score ties count 0.5."""
    pred, gt = _flatten_pair(pred, gt)
    pos = gt == 1.0
    n_pos = int(pos.sum())
    n_neg = pred.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("pixel_auc undefined: ground truth has a single "
                         "class")
    ranks = stats.rankdata(pred)      # average ranks implement the 0.5 ties
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0)
                 / (n_pos * n_neg))


def pixel_f1(pred: np.ndarray, gt: np.ndarray,
             threshold: float = F1_THRESHOLD) -> float:
    """2TP / (2TP + FP + FN) after thresholding pred at >= threshold.
    Empty ground truth with an empty prediction counts as a perfect 1.0."""
    pred, gt = _flatten_pair(pred, gt)
    hard = pred >= threshold
    tp = float(np.sum(hard & (gt == 1.0)))
    fp = float(np.sum(hard & (gt == 0.0)))
    fn = float(np.sum(~hard & (gt == 1.0)))
    denom = 2.0 * tp + fp + fn
    if denom == 0.0:
        return 1.0
    return 2.0 * tp / denom


@dataclass(frozen=True)
class RocPoint:
    fpr: float
    tpr: float
    threshold: float


def roc_points(pred: np.ndarray, gt: np.ndarray) -> list:
    """Operating points swept over the distinct scores, highest threshold
    first, so fpr and tpr are nondecreasing along the list.  Trapezoidal
    integration of these points reproduces pixel_auc exactly."""
    pred, gt = _flatten_pair(pred, gt)
    pos = gt == 1.0
    n_pos = int(pos.sum())
    n_neg = pred.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("roc undefined: ground truth has a single class")
    points = [RocPoint(0.0, 0.0, np.inf)]
    for t in np.unique(pred)[::-1]:
        hard = pred >= t
        points.append(RocPoint(float(np.sum(hard & ~pos)) / n_neg,
                               float(np.sum(hard & pos)) / n_pos, float(t)))
    return points


# ---------------------------------------------------------------------------
# perturbations

PERTURBATION_KINDS = ("resize", "gaussian_blur", "gaussian_noise", "fgsm")


@dataclass(frozen=True)
class PerturbationSpec:
    """One content-preserving manipulation: resize(factor) downscales by
    ``factor`` then restores the original dims, gaussian_blur(kernel) runs an
    odd-sized normalized Gaussian kernel, gaussian_noise(sigma) adds noise
    with sigma on the 8-bit 0..255 scale, fgsm(eps) takes a signed-gradient
    step against the model under evaluation."""
    kind: str
    factor: Optional[float] = None
    kernel: Optional[int] = None
    sigma: Optional[float] = None
    eps: Optional[float] = None

    def __post_init__(self):
        if self.kind == "resize":
            if self.factor is None or self.factor <= 0:
                raise ValueError(f"resize factor must be > 0, "
                                 f"got {self.factor}")
        elif self.kind == "gaussian_blur":
            if self.kernel is None or self.kernel < 1 \
                    or self.kernel % 2 == 0:
                raise ValueError(f"blur kernel must be a positive odd "
                                 f"integer, got {self.kernel}")
        elif self.kind == "gaussian_noise":
            if self.sigma is None or self.sigma < 0:
                raise ValueError(f"noise sigma must be >= 0, "
                                 f"got {self.sigma}")
        elif self.kind == "fgsm":
            if self.eps is None or self.eps < 0:
                raise ValueError(f"fgsm eps must be >= 0, got {self.eps}")
        else:
            raise ValueError(f"unknown perturbation kind {self.kind!r}; "
                             f"expected one of {PERTURBATION_KINDS}")

    @property
    def value(self) -> float:
        return {"resize": self.factor, "gaussian_blur": self.kernel,
                "gaussian_noise": self.sigma, "fgsm": self.eps}[self.kind]

    def label(self) -> str:
        return f"{self.kind}({self.value:g})"


def parse_perturbation(text: str) -> PerturbationSpec:
    """Parse 'kind:value', e.g. 'gaussian_noise:15' or 'resize:0.5'."""
    kind, sep, value = text.partition(":")
    if not sep or not value:
        raise ValueError(f"perturbation must look like kind:value, "
                         f"got {text!r}")
    if kind == "resize":
        return PerturbationSpec("resize", factor=float(value))
    if kind == "gaussian_blur":
        return PerturbationSpec("gaussian_blur", kernel=int(value))
    if kind == "gaussian_noise":
        return PerturbationSpec("gaussian_noise", sigma=float(value))
    if kind == "fgsm":
        return PerturbationSpec("fgsm", eps=float(value))
    raise ValueError(f"unknown perturbation kind {kind!r}; "
                     f"expected one of {PERTURBATION_KINDS}")


def perturb(image: np.ndarray, spec: PerturbationSpec,
            rng: Optional[np.random.Generator] = None,
            model: Optional[CoarseToFineModel] = None,
            mask: Optional[np.ndarray] = None) -> np.ndarray:
    """Apply one perturbation to a (3, h, w) image in [0, 1].  The fgsm kind
    additionally needs the model under attack and the ground-truth mask."""
    dtype = image.dtype
    if spec.kind == "resize":
        h, w = image.shape[1:]
        down = (max(1, round(w * spec.factor)), max(1, round(h * spec.factor)))
        hwc = image.transpose(1, 2, 0).astype(np.float32)
        small = cv2.resize(hwc, down, interpolation=cv2.INTER_AREA)
        back = cv2.resize(small, (w, h), interpolation=cv2.INTER_LINEAR)
        out = np.clip(back.transpose(2, 0, 1), 0.0, 1.0)
    elif spec.kind == "gaussian_blur":
        hwc = image.transpose(1, 2, 0).astype(np.float32)
        k = int(spec.kernel)
        out = cv2.GaussianBlur(hwc, (k, k), 0).transpose(2, 0, 1)
        out = np.clip(out, 0.0, 1.0)
    elif spec.kind == "gaussian_noise":
        if rng is None:
            raise ValueError("gaussian_noise needs an rng")
        noise = rng.normal(0.0, spec.sigma / 255.0, size=image.shape)
        out = np.clip(image.astype(np.float64) + noise, 0.0, 1.0)
    else:   # fgsm
        if model is None or mask is None:
            raise ValueError("fgsm perturbation needs the model and the "
                             "ground-truth mask")
        out = fgsm(model, image[None], mask[None], spec.eps)[0]
    return out.astype(dtype)


# ---------------------------------------------------------------------------
# dataset evaluation

@dataclass
class ReportRow:
    label: str
    auc: float
    f1: float
    delta_auc: Optional[float] = None     # vs the clean row
    delta_f1: Optional[float] = None


@dataclass
class MetricsReport:
    rows: list = field(default_factory=list)
    threshold: float = F1_THRESHOLD
    n_scored: int = 0
    n_skipped: int = 0


def _predict(model: CoarseToFineModel, image: np.ndarray) -> np.ndarray:
    with no_grad():
        _, refined = model(Tensor(image[None].astype(model.cfg.np_dtype)))
    return refined.data[0, 0].astype(np.float64)


def evaluate_arrays(model: CoarseToFineModel, images: np.ndarray,
                    masks: np.ndarray,
                    perturbations: Sequence[PerturbationSpec] = (),
                    seed: int = 0,
                    threshold: float = F1_THRESHOLD) -> MetricsReport:
    """Score each sample clean and under every perturbation; rows hold the
    per-image means.  Samples with a single-class ground truth are skipped
    with a warning (their pixel AUC is undefined)."""
    report = MetricsReport(threshold=threshold)
    labels = ["clean"] + [spec.label() for spec in perturbations]
    sums = {label: [0.0, 0.0] for label in labels}
    expected = model.cfg.input_size
    for i in range(images.shape[0]):
        image, mask = images[i], masks[i]
        if image.shape[1:] != expected:
            image = df.resize_image(image, expected)
            mask = df.resize_mask(mask[0], expected)[None]
        gt = mask[0]
        if gt.min() == gt.max():
            warnings.warn(f"sample {i}: single-class ground truth, skipped")
            report.n_skipped += 1
            continue
        variants = [("clean", image)]
        for j, spec in enumerate(perturbations):
            rng = np.random.default_rng(np.random.SeedSequence([seed, i, j]))
            variants.append((spec.label(),
                             perturb(image, spec, rng, model=model,
                                     mask=mask)))
        for label, variant in variants:
            pred = _predict(model, variant)
            sums[label][0] += pixel_auc(pred, gt)
            sums[label][1] += pixel_f1(pred, gt, threshold)
        report.n_scored += 1
    if report.n_scored == 0:
        raise ValueError("no scorable samples")
    clean_auc = sums["clean"][0] / report.n_scored
    clean_f1 = sums["clean"][1] / report.n_scored
    for label in labels:
        auc = sums[label][0] / report.n_scored
        f1 = sums[label][1] / report.n_scored
        if label == "clean":
            report.rows.append(ReportRow(label, auc, f1))
        else:
            report.rows.append(ReportRow(label, auc, f1, auc - clean_auc,
                                         f1 - clean_f1))
    return report


def evaluate(model: CoarseToFineModel, manifest_path,
             perturbations: Sequence[PerturbationSpec] = (),
             split: str = "test", seed: int = 0,
             threshold: float = F1_THRESHOLD) -> MetricsReport:
    """Manifest-driven evaluation; entries whose files are missing are
    skipped with a warning and counted in the report."""
    entries = [e for e in df.load_manifest(manifest_path, strict=False)
               if e.split == split]
    if not entries:
        raise ValueError(f"manifest has no {split!r} entries")
    images, masks, skipped = [], [], 0
    for entry in entries:
        try:
            images.append(df.read_png(entry.image_path))
            masks.append(df.read_png(entry.mask_path)[None])
        except FileNotFoundError as err:
            warnings.warn(f"skipping {entry.image_path}: {err}")
            skipped += 1
    if not images:
        raise ValueError("no readable samples in manifest")
    report = evaluate_arrays(model, np.stack(images), np.stack(masks),
                             perturbations, seed=seed, threshold=threshold)
    report.n_skipped += skipped
    return report


def format_report(report: MetricsReport) -> str:
    """Aligned plain-text table: perturbation  AUC  F1  ΔAUC  ΔF1."""
    lines = [f"# f1_threshold={report.threshold:g}",
             "# aggregation=mean of per-image metrics",
             f"# samples_scored={report.n_scored} "
             f"skipped={report.n_skipped}"]
    width = max(len("perturbation"),
                *(len(r.label) for r in report.rows)) + 2
    lines.append(f"{'perturbation':<{width}}{'AUC':>8}{'F1':>8}"
                 f"{'ΔAUC':>9}{'ΔF1':>9}")
    for r in report.rows:
        dauc = "-" if r.delta_auc is None else f"{r.delta_auc:+.4f}"
        df1 = "-" if r.delta_f1 is None else f"{r.delta_f1:+.4f}"
        lines.append(f"{r.label:<{width}}{r.auc:>8.4f}{r.f1:>8.4f}"
                     f"{dauc:>9}{df1:>9}")
    return "\n".join(lines) + "\n"
