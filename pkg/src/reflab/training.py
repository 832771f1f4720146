"""Optimizers, schedules and the four training regimes.

``ce``          plain minibatch cross-entropy on grounding.
``contrastive`` cross-entropy plus margin hinges against in-batch negatives.
``mtl``         alternate ``r`` grounding batches with one relational-QA batch.
``tl``          train on QA first, then fine-tune grounding from that trunk.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .model import (
    GroundingData,
    ModelParams,
    NonFiniteError,
    QAData,
    ce_output_grads,
    ce_per_example,
    ce_loss_and_grad,
    grounding_scores,
    init_params,
    masked_log_softmax,
    qa_loss_and_grad,
    qa_predict,
    tensorize,
    tensorize_qa,
    trunk_backward,
)
from .rng import derive_seed, numpy_rng

logger = logging.getLogger(__name__)

REGIMES = ("ce", "contrastive", "mtl", "tl")


def hinge(x: float) -> float:
    """``max(0, x)``; the subgradient used at 0 is 0."""
    return x if x > 0 else 0.0


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class ContrastiveConfig:
    tau: float = 0.2
    aggregation: str = "max_h"
    negatives_per_example: int = 64  # capped at batch size - 1
    ce_weight: float = 1.0
    hinge_weight: float = 1.0

    def __post_init__(self):
        if self.aggregation not in ("sum_h", "max_h"):
            raise ValueError(f"unknown aggregation {self.aggregation!r}")
        if self.negatives_per_example < 1:
            raise ValueError("need at least one negative per example")
        if self.tau < 0 or self.ce_weight < 0 or self.hinge_weight < 0:
            raise ValueError("tau and weights must be non-negative")


@dataclass(frozen=True)
class ModelConfig:
    encoder: str = "seq"
    d: int = 32
    lmax: int = 16
    init_scale: float = 0.1


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    epochs: int = 25
    optimizer: str = "adam"
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    schedule: str = "constant"
    warmup_frac: float = 0.1
    patience: int = 25
    seed: int = 0
    checkpoint_dir: Optional[str] = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.schedule not in ("constant", "warmup_linear_decay"):
            raise ValueError(f"unknown schedule {self.schedule!r}")


@dataclass(frozen=True)
class MTLConfig:
    mixing_ratio: int = 1
    qa_lr_scale: float = 0.5

    def __post_init__(self):
        if self.mixing_ratio < 1:
            raise ValueError("mixing_ratio must be >= 1")


# ---------------------------------------------------------------------------
# schedules and optimizers


@dataclass(frozen=True)
class Schedule:
    kind: str = "constant"
    lr: float = 1e-2
    warmup_steps: int = 0
    total_steps: int = 1

    def __post_init__(self):
        if self.kind == "warmup_linear_decay" and self.total_steps <= self.warmup_steps:
            raise ValueError("total_steps must exceed warmup_steps")


def lr_at(step: int, schedule: Schedule) -> float:
    """Learning rate at ``step``: linear warm-up to ``lr``, then linear decay to 0."""
    if step < 0:
        raise ValueError("step must be non-negative")
    if schedule.kind == "constant":
        return schedule.lr
    if schedule.kind != "warmup_linear_decay":
        raise ValueError(f"unknown schedule {schedule.kind!r}")
    if step < schedule.warmup_steps:
        return schedule.lr * step / schedule.warmup_steps
    remaining = schedule.total_steps - step
    span = schedule.total_steps - schedule.warmup_steps
    return schedule.lr * max(remaining, 0) / span


class SGD:
    def step(self, params: ModelParams, grads: ModelParams, lr: float) -> None:
        for k, g in grads.arrays().items():
            getattr(params, k)[...] -= lr * g


class Adam:
    def __init__(self, params: ModelParams, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.arrays().items()}
        self.v = {k: np.zeros_like(v) for k, v in params.arrays().items()}
        self.t = 0

    def step(self, params: ModelParams, grads: ModelParams, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1**self.t
        c2 = 1 - b2**self.t
        for k, g in grads.arrays().items():
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            getattr(params, k)[...] -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(params: ModelParams, cfg: TrainConfig):
    if cfg.optimizer == "sgd":
        return SGD()
    return Adam(params, cfg.beta1, cfg.beta2, cfg.eps)


# ---------------------------------------------------------------------------
# losses


def sample_negatives(batch_size: int, k: int, seed: int) -> np.ndarray:
    """(B, K) indices of other batch members, sampled without replacement.

    Each row is sorted so that ties under max-of-hinges resolve to the
    lowest batch index.
    """
    if batch_size < 2:
        raise ValueError("contrastive training needs batches of at least 2")
    k = min(k, batch_size - 1)
    rng = np.random.default_rng(seed)
    keys = rng.random((batch_size, batch_size))
    np.fill_diagonal(keys, np.inf)
    chosen = np.argsort(keys, axis=1, kind="stable")[:, :k]
    return np.sort(chosen, axis=1)


def _pair_losses(params: ModelParams, batch: GroundingData, fwd):
    """``L[i, j]``: loss of expression j on scene i against scene i's gold box."""
    u, _, V, _ = fwd
    S = np.einsum("ind,jd->ijn", V, u)
    mask = np.broadcast_to(batch.box_mask[:, None, :], S.shape)
    logp = masked_log_softmax(S, mask)
    B = len(batch.gold)
    L = -logp[np.arange(B)[:, None], np.arange(B)[None, :], batch.gold[:, None]]
    return L, logp


def _aggregate(h: np.ndarray, aggregation: str) -> tuple[np.ndarray, np.ndarray]:
    """Per-row F over hinge values and the 0/1 weight each hinge receives."""
    if aggregation == "sum_h":
        return h.sum(1), (h > 0).astype(float)
    sel = np.zeros_like(h)
    top = h.argmax(1)
    rows = np.arange(len(h))
    sel[rows, top] = (h[rows, top] > 0).astype(float)
    return h.max(1), sel


def contrastive_loss_and_grad(
    params: ModelParams,
    batch: GroundingData,
    cfg: ContrastiveConfig,
    seed: int,
    with_grad: bool = True,
):
    """Cross-entropy plus in-batch hinge terms, averaged over anchors.

    For anchor i and sampled negative j the expression-side hinge is
    ``[l(i,e_i,b_i) - l(i,e_j,b_i) - tau]_+`` and the scene-side hinge is
    ``[l(i,e_i,b_i) - l(j,e_i,b_j) - tau]_+``. The same K negatives feed
    both sides.
    """
    B = len(batch.gold)
    negs = sample_negatives(B, cfg.negatives_per_example, seed)
    pos, fwd = ce_per_example(params, batch)
    L, logp = _pair_losses(params, batch, fwd)
    rows = np.arange(B)[:, None]
    l_expr = L[rows, negs]  # scene i, expression j
    l_scene = L[negs, rows]  # scene j, expression i
    h_e = np.maximum(pos[:, None] - l_expr - cfg.tau, 0.0)
    h_s = np.maximum(pos[:, None] - l_scene - cfg.tau, 0.0)
    f_e, sel_e = _aggregate(h_e, cfg.aggregation)
    f_s, sel_s = _aggregate(h_s, cfg.aggregation)
    anchor = cfg.ce_weight * pos + cfg.hinge_weight * (f_e + f_s)
    loss = float(anchor.mean())
    if not np.isfinite(loss):
        raise NonFiniteError("loss")
    if not with_grad:
        return loss, None

    lam = cfg.hinge_weight / B
    w_pos = cfg.ce_weight / B + lam * (sel_e.sum(1) + sel_s.sum(1))
    C = np.zeros((B, B))
    np.add.at(C, (np.broadcast_to(rows, negs.shape), negs), -lam * sel_e)
    np.add.at(C, (negs, np.broadcast_to(rows, negs.shape)), -lam * sel_s)

    dV, du = ce_output_grads(batch, fwd, w_pos)
    u, _, V, _ = fwd
    mask = batch.box_mask[:, None, :]
    dS = np.where(mask, np.exp(logp), 0.0)
    dS[np.arange(B), :, batch.gold] -= 1.0
    dS *= C[:, :, None]
    dV = dV + np.einsum("ijn,jd->ind", dS, u)
    du = du + np.einsum("ijn,ind->jd", dS, V)
    grads = params.zeros_like()
    trunk_backward(params, batch, fwd, dV, du, grads)
    grads.check_finite("gradient of")
    return loss, grads


def contrastive_batch_loss(params, batch: GroundingData, cfg: ContrastiveConfig, seed: int) -> float:
    return contrastive_loss_and_grad(params, batch, cfg, seed, with_grad=False)[0]


def mtl_step_loss_and_grad(params, gbatch: GroundingData, qbatch: QAData, qa_weight: float = 1.0):
    """Grounding cross-entropy plus ``qa_weight`` times QA cross-entropy."""
    lg, gg = ce_loss_and_grad(params, gbatch)
    lq, gq = qa_loss_and_grad(params, qbatch)
    for k, v in gq.arrays().items():
        getattr(gg, k)[...] += qa_weight * v
    return lg + qa_weight * lq, gg


# ---------------------------------------------------------------------------
# evaluation helpers


def predict(params: ModelParams, data: GroundingData, chunk: int = 1024) -> np.ndarray:
    """Index of the highest-scoring box for every example."""
    out = np.empty(len(data), dtype=np.int64)
    for lo in range(0, len(data), chunk):
        idx = np.arange(lo, min(lo + chunk, len(data)))
        out[lo : lo + len(idx)] = grounding_scores(params, data.take(idx)).argmax(1)
    return out


def accuracy(params: ModelParams, data: GroundingData) -> float:
    if len(data) == 0:
        return float("nan")
    pred = predict(params, data)
    return float(data.hit[np.arange(len(data)), pred].mean())


def qa_accuracy(params: ModelParams, data: QAData) -> float:
    if len(data) == 0:
        return float("nan")
    return float((qa_predict(params, data) == data.answer).mean())


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    params: ModelParams
    log: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    qa_only_dev_acc: Optional[float] = None


def _split(items, name):
    return [x for x in items if x.split == name]


def _batches(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    order = numpy_rng(seed, "shuffle", epoch).permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


class _Task:
    """Per-task optimizer state and schedule."""

    def __init__(self, params, cfg: TrainConfig, lr: float, steps_per_epoch: int):
        self.opt = make_optimizer(params, cfg)
        total = max(cfg.epochs * steps_per_epoch, 1)
        warm = int(round(cfg.warmup_frac * total)) if cfg.schedule == "warmup_linear_decay" else 0
        if cfg.schedule == "warmup_linear_decay" and warm >= total:
            warm = total - 1
        self.schedule = Schedule(cfg.schedule, lr, warm, total if total > warm else warm + 1)
        self.step = 0

    def update(self, params, grads) -> float:
        lr = lr_at(self.step, self.schedule)
        self.opt.step(params, grads, lr)
        self.step += 1
        return lr


def _run(
    params: ModelParams,
    gtrain: Optional[GroundingData],
    gdev: Optional[GroundingData],
    qtrain: Optional[QAData],
    qdev: Optional[QAData],
    mode: str,
    cfg: TrainConfig,
    ccfg: ContrastiveConfig,
    mcfg: MTLConfig,
    seed: int,
    phase: str,
):
    """One optimization phase with early stopping; returns (best params, log, best epoch)."""
    select_on_qa = mode == "qa"
    n_g = len(gtrain) if gtrain is not None else 0
    g_steps = math.ceil(n_g / cfg.batch_size) if n_g else 0
    q_steps = math.ceil(len(qtrain) / cfg.batch_size) if qtrain is not None else 0
    if mode == "mtl":
        q_steps = math.ceil(g_steps / mcfg.mixing_ratio)

    g_task = _Task(params, cfg, cfg.lr, g_steps) if g_steps else None
    q_lr = cfg.lr * (mcfg.qa_lr_scale if mode == "mtl" else 1.0)
    q_task = _Task(params, cfg, q_lr, q_steps) if q_steps and mode in ("mtl", "qa") else None

    best = params.copy()
    best_score, best_epoch, stale = -np.inf, 0, 0
    log = []
    q_cursor, q_order, q_epoch = 0, None, 0

    def next_q_batch():
        nonlocal q_cursor, q_order, q_epoch
        if q_order is None or q_cursor >= len(q_order):
            q_order = numpy_rng(seed, phase, "qa-shuffle", q_epoch).permutation(len(qtrain))
            q_cursor = 0
            q_epoch += 1
        idx = q_order[q_cursor : q_cursor + cfg.batch_size]
        q_cursor += cfg.batch_size
        return qtrain.take(idx)

    def record(epoch, losses, n_g_upd, n_q_upd, lr):
        entry = {
            "epoch": epoch,
            "phase": phase,
            "lr": lr,
            "train_loss": float(np.mean(losses)) if losses else None,
            "grounding_updates": n_g_upd,
            "qa_updates": n_q_upd,
        }
        if gtrain is not None:
            entry["train_acc"] = accuracy(params, gtrain)
        if gdev is not None and len(gdev):
            entry["dev_acc"] = accuracy(params, gdev)
        if qdev is not None and len(qdev):
            entry["qa_dev_acc"] = qa_accuracy(params, qdev)
        return entry

    for epoch in range(1, cfg.epochs + 1):
        losses, n_g_upd, n_q_upd, lr = [], 0, 0, (g_task or q_task).schedule.lr
        try:
            if mode == "qa":
                for idx in _batches(len(qtrain), cfg.batch_size, derive_seed(seed, phase), epoch):
                    loss, grads = qa_loss_and_grad(params, qtrain.take(idx))
                    lr = q_task.update(params, grads)
                    losses.append(loss)
                    n_q_upd += 1
            else:
                batches = _batches(n_g, cfg.batch_size, derive_seed(seed, phase), epoch)
                for b, idx in enumerate(batches):
                    gb = gtrain.take(idx)
                    if mode == "contrastive" and len(idx) >= 2:
                        step_seed = derive_seed(seed, phase, "negatives", epoch, b)
                        loss, grads = contrastive_loss_and_grad(params, gb, ccfg, step_seed)
                    else:
                        loss, grads = ce_loss_and_grad(params, gb)
                    lr = g_task.update(params, grads)
                    losses.append(loss)
                    n_g_upd += 1
                    last = b == len(batches) - 1
                    if mode == "mtl" and ((b + 1) % mcfg.mixing_ratio == 0 or last):
                        _, qgrads = qa_loss_and_grad(params, next_q_batch())
                        q_task.update(params, qgrads)
                        n_q_upd += 1
        except NonFiniteError as exc:
            raise NonFiniteError(f"{exc.what} ({phase}, epoch {epoch})") from None
        params.check_finite(f"{phase} epoch {epoch}: parameter")

        entry = record(epoch, losses, n_g_upd, n_q_upd, lr)
        log.append(entry)
        logger.debug("%s", entry)
        if cfg.checkpoint_dir is not None:
            from .harness.io import save_checkpoint

            save_checkpoint(params, cfg.checkpoint_dir, f"{phase}_epoch_{epoch}" if phase != "main" else f"epoch_{epoch}")

        score = entry.get("qa_dev_acc" if select_on_qa else "dev_acc")
        if score is None:
            score = -entry["train_loss"] if entry["train_loss"] is not None else 0.0
        if score > best_score:
            best_score, best_epoch, stale = score, epoch, 0
            best = params.copy()
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    return best, log, best_epoch


def train(
    dataset: Sequence,
    qa_dataset: Optional[Sequence] = None,
    regime: str = "ce",
    model_cfg: ModelConfig = ModelConfig(),
    train_cfg: TrainConfig = TrainConfig(),
    contrastive_cfg: ContrastiveConfig = ContrastiveConfig(),
    mtl_cfg: MTLConfig = MTLConfig(),
    seed: Optional[int] = None,
    init: Optional[ModelParams] = None,
) -> TrainResult:
    """Train a grounding model under one of the four regimes.

    ``dataset`` holds instances whose ``split`` is ``train`` or ``dev``;
    ``qa_dataset`` likewise for QA examples (required for ``mtl`` and ``tl``).
    The returned parameters are those of the epoch with the best dev
    grounding accuracy.
    """
    if regime not in REGIMES:
        raise ValueError(f"unknown regime {regime!r}")
    seed = train_cfg.seed if seed is None else seed
    train_items = _split(dataset, "train")
    if not train_items:
        raise ValueError("dataset has no training instances")
    if regime in ("mtl", "tl") and not qa_dataset:
        raise ValueError(f"regime {regime!r} needs a QA dataset")
    if regime == "contrastive" and train_cfg.batch_size < 2:
        raise ValueError("contrastive training needs batch_size >= 2")

    lmax = model_cfg.lmax
    gtrain = tensorize(train_items, lmax)
    dev_items = _split(dataset, "dev")
    gdev = tensorize(dev_items, lmax) if dev_items else None
    qtrain = qdev = None
    if qa_dataset:
        qtrain = tensorize_qa(_split(qa_dataset, "train"), lmax)
        qa_dev_items = _split(qa_dataset, "dev")
        qdev = tensorize_qa(qa_dev_items, lmax) if qa_dev_items else None

    params = init.copy() if init is not None else init_params(
        derive_seed(seed, "model"), model_cfg.encoder, model_cfg.d, lmax, model_cfg.init_scale
    )

    if regime == "tl":
        pre, pre_log, pre_best = _run(
            params, None, None, qtrain, qdev, "qa", train_cfg, contrastive_cfg, mtl_cfg, seed, "qa_pretrain"
        )
        qa_only = pre_log[pre_best - 1].get("qa_dev_acc") if pre_best else None
        best, log, best_epoch = _run(
            pre, gtrain, gdev, None, qdev, "ce", train_cfg, contrastive_cfg, mtl_cfg, seed, "main"
        )
        return TrainResult(best, pre_log + log, best_epoch, qa_only)

    best, log, best_epoch = _run(
        params, gtrain, gdev, qtrain if regime == "mtl" else None,
        qdev, regime, train_cfg, contrastive_cfg, mtl_cfg, seed, "main",
    )
    return TrainResult(best, log, best_epoch)


def train_qa_only(
    qa_dataset: Sequence,
    model_cfg: ModelConfig = ModelConfig(),
    train_cfg: TrainConfig = TrainConfig(),
    seed: Optional[int] = None,
) -> TrainResult:
    """Single-task QA baseline, selected on QA dev accuracy."""
    seed = train_cfg.seed if seed is None else seed
    lmax = model_cfg.lmax
    qtrain = tensorize_qa(_split(qa_dataset, "train"), lmax)
    qa_dev_items = _split(qa_dataset, "dev")
    qdev = tensorize_qa(qa_dev_items, lmax) if qa_dev_items else None
    params = init_params(derive_seed(seed, "model"), model_cfg.encoder, model_cfg.d, lmax, model_cfg.init_scale)
    best, log, best_epoch = _run(
        params, None, None, qtrain, qdev, "qa", train_cfg, ContrastiveConfig(), MTLConfig(), seed, "qa_pretrain"
    )
    acc = log[best_epoch - 1].get("qa_dev_acc") if best_epoch else None
    return TrainResult(best, log, best_epoch, acc)


def config_dict(*cfgs) -> dict:
    return {type(c).__name__: asdict(c) for c in cfgs}
