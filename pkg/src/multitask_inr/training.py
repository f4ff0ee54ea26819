"""Multi-task losses, ADAM, and the training loop."""
from __future__ import annotations

import io
import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import LabeledShape, sample_batch
from .geometry.sampling import DEFAULT_NOISE_SIGMA
from .models import TASKS, TOPOLOGIES, ModelConfig, MultiTaskModel, load_arrays

log = logging.getLogger(__name__)


class NumericalAbort(RuntimeError):
    def __init__(self, step: int, what: str = "loss"):
        super().__init__(f"non-finite {what} at step {step}")
        self.step = step


# -- losses ------------------------------------------------------------------


@dataclass(frozen=True)
class LossWeights:
    cls: float = 1.0
    seg: float = 1.0

    def __post_init__(self):
        if self.cls < 0 or self.seg < 0:
            raise ValueError("loss weights must be >= 0")


@dataclass(frozen=True)
class LossBreakdown:
    rec: float
    cls: float
    seg: float
    total: float


def loss_rec(logits: Tensor, gt_occupancy: np.ndarray) -> Tensor:
    gt = np.asarray(gt_occupancy)
    if gt.shape != logits.shape:
        raise ad.ShapeError(f"loss_rec: shape mismatch {logits.shape} vs {gt.shape}")
    return ad.bce_with_logits(logits, gt)


def loss_cls(logits: Tensor, class_label) -> Tensor:
    labels = np.atleast_1d(np.asarray(class_label, dtype=np.int64))
    if logits.data.ndim == 1:
        logits = ad.reshape(logits, (1, logits.shape[0]))
    return ad.cross_entropy(logits, labels)


class SegCounter:
    """Counts batches whose segmentation loss was undefined (no interior points)."""

    empty_batches = 0


def loss_seg(seg_logits: Tensor, gt_part_labels: np.ndarray, gt_occupancy: np.ndarray) -> Tensor:
    """Cross entropy averaged over interior points only; exterior labels are ignored."""
    k = seg_logits.shape[-1]
    flat = ad.reshape(seg_logits, (-1, k))
    mask = np.asarray(gt_occupancy, dtype=bool).reshape(-1)
    if not mask.any():
        SegCounter.empty_batches += 1
        log.warning("segmentation loss undefined: no interior points in batch")
    labels = np.asarray(gt_part_labels, dtype=np.int64).reshape(-1)
    return ad.cross_entropy(flat, np.where(mask, labels, 0), mask)


def total_loss(
    rec: Tensor | None, cls: Tensor | None, seg: Tensor | None, weights: LossWeights = LossWeights()
) -> tuple[Tensor, LossBreakdown]:
    """Weighted linear combination; absent terms count as 0.

    The graph total drives the gradient; the breakdown's ``total`` is
    recomputed in float64 from the reported terms so the identity is exact.
    """
    terms = []
    if rec is not None:
        terms.append(rec)
    if cls is not None and weights.cls != 0:
        terms.append(ad.scale(cls, weights.cls))
    if seg is not None and weights.seg != 0:
        terms.append(ad.scale(seg, weights.seg))
    if not terms:
        raise ValueError("total_loss needs at least one task loss")
    tot = terms[0]
    for t in terms[1:]:
        tot = ad.add(tot, t)
    r = rec.item() if rec is not None else 0.0
    c = cls.item() if cls is not None else 0.0
    s = seg.item() if seg is not None else 0.0
    return tot, LossBreakdown(r, c, s, r + weights.cls * c + weights.seg * s)


# -- ADAM --------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float = 1e-4,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """In-place bias-corrected ADAM update of ``params`` (name -> array)."""
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ad.ShapeError(f"adam_step: shape mismatch {p.shape} vs {g.shape} for {name!r}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        if m.shape != p.shape:
            raise ad.ShapeError(f"adam_step: state shape mismatch {m.shape} vs {p.shape} for {name!r}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        step = (lr / c1) * m / (np.sqrt(v / c2) + eps)
        p -= step.astype(p.dtype)


# -- training loop -------------------------------------------------------------


@dataclass
class TrainConfig:
    tasks: tuple[str, ...] = ("rec",)
    topology: str = "parallel"
    freeze_encoder: bool = False
    lr: float = 1e-4
    batch_size: int = 16
    n_query: int = 1024
    steps: int = 1000
    seed: int = 0
    noise_sigma: float = DEFAULT_NOISE_SIGMA
    lambda_cls: float = 1.0
    lambda_seg: float = 1.0
    pad: float | None = None

    def __post_init__(self):
        self.tasks = tuple(self.tasks)
        if not self.tasks or set(self.tasks) - set(TASKS):
            raise ValueError(f"tasks must be a non-empty subset of {TASKS}, got {self.tasks}")
        if self.topology not in TOPOLOGIES:
            raise ValueError(f"topology must be one of {TOPOLOGIES}")
        if self.topology == "joint" and not {"rec", "seg"} <= set(self.tasks):
            raise ValueError("joint topology requires both rec and seg tasks")
        if self.batch_size < 1 or self.n_query < 2 or self.steps < 0 or self.lr <= 0:
            raise ValueError("batch_size >= 1, n_query >= 2, steps >= 0 and lr > 0 are required")
        LossWeights(self.lambda_cls, self.lambda_seg)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tasks"] = list(self.tasks)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainResult:
    model: MultiTaskModel
    history: list[LossBreakdown]
    seg_empty_batches: int = 0


def history_csv(history: list[LossBreakdown]) -> str:
    buf = io.StringIO()
    buf.write("step,L_rec,L_cls,L_seg,L_tot\n")
    for i, h in enumerate(history):
        buf.write(f"{i},{h.rec!r},{h.cls!r},{h.seg!r},{h.total!r}\n")
    return buf.getvalue()


def _stack_batches(shapes: list[LabeledShape], cfg: TrainConfig, step: int):
    batches = [
        sample_batch(s, cfg.n_query, cfg.pad, cfg.noise_sigma, rng_seed=[cfg.seed, step, j])
        for j, s in enumerate(shapes)
    ]
    clouds = np.stack([b.input_cloud for b in batches])
    points = np.stack([b.query_points for b in batches])
    occ = np.stack([b.gt_occupancy for b in batches])
    parts = np.stack([b.gt_part_label for b in batches]).astype(np.int64)
    classes = np.array([b.class_label for b in batches], dtype=np.int64)
    return clouds, points, occ, parts, classes


def train_step_losses(model: MultiTaskModel, cfg: TrainConfig, clouds, points, occ, parts, classes):
    """Forward pass for one batch; returns (graph total, breakdown). Call under a Tape."""
    tasks = set(cfg.tasks)
    z = model.encode(clouds)
    need_dec = bool(tasks & {"rec", "seg"})
    occ_logits = seg_logits = None
    if need_dec:
        occ_logits, seg_logits = model.decode(
            z, points, "train", need_occ="rec" in tasks, need_seg="seg" in tasks
        )
    l_rec = loss_rec(occ_logits, occ) if "rec" in tasks else None
    l_seg = loss_seg(seg_logits, parts, occ) if "seg" in tasks else None
    l_cls = loss_cls(model.classify(z), classes) if "cls" in tasks else None
    return total_loss(l_rec, l_cls, l_seg, LossWeights(cfg.lambda_cls, cfg.lambda_seg))


def build_model(model_cfg: ModelConfig, cfg: TrainConfig, init: dict[str, np.ndarray] | None = None):
    model = MultiTaskModel.create(model_cfg, cfg.seed)
    if init is not None:
        if cfg.freeze_encoder:
            load_arrays(model, init, strict=False, prefix="encoder.")
        else:
            load_arrays(model, init, strict=False)
    elif cfg.freeze_encoder:
        raise ValueError("freeze_encoder requires weights loaded from a checkpoint")
    if cfg.freeze_encoder:
        for t in model.encoder.params.values():
            t.requires_grad = False
    return model


def train(
    dataset: list[LabeledShape],
    cfg: TrainConfig,
    model_cfg: ModelConfig,
    init: dict[str, np.ndarray] | None = None,
    log_every: int = 0,
    on_step=None,
) -> TrainResult:
    """Deterministic under ``cfg.seed``: same inputs give identical weights and history."""
    if not dataset:
        raise ValueError("dataset is empty")
    if tuple(model_cfg.tasks) != tuple(cfg.tasks) or model_cfg.topology != cfg.topology:
        raise ValueError("model config tasks/topology disagree with train config")
    model = build_model(model_cfg, cfg, init)
    trainable = {n: t for n, t in model.params.items() if t.requires_grad}
    opt = AdamState()
    rng = np.random.default_rng([cfg.seed, 0x5EED])
    history: list[LossBreakdown] = []
    empty_before = SegCounter.empty_batches
    n_pick = min(cfg.batch_size, len(dataset))
    for step in range(cfg.steps):
        pick = rng.choice(len(dataset), n_pick, replace=False)
        batch = _stack_batches([dataset[i] for i in pick], cfg, step)
        with ad.Tape() as tape:
            tot, breakdown = train_step_losses(model, cfg, *batch)
        if not math.isfinite(breakdown.total):
            raise NumericalAbort(step)
        for t in trainable.values():
            t.grad = None
        ad.backward(tape, tot)
        grads = {n: t.grad for n, t in trainable.items() if t.grad is not None}
        for n, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NumericalAbort(step, f"gradient of {n}")
        adam_step({n: t.data for n, t in trainable.items()}, grads, opt, lr=cfg.lr)
        history.append(breakdown)
        if on_step is not None:
            on_step(step, model)
        if log_every and (step % log_every == 0 or step == cfg.steps - 1):
            log.info("step %d  rec %.4f  cls %.4f  seg %.4f  tot %.4f", step,
                     breakdown.rec, breakdown.cls, breakdown.seg, breakdown.total)
    model.meta = {**model.meta, "train": cfg.to_dict()}
    return TrainResult(model, history, SegCounter.empty_batches - empty_before)
