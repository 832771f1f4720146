"""Small grounding scorer with explicit reverse-mode gradients.

Expressions are encoded into a vector ``u`` either order-blind (``bow``:
mean of token embeddings) or order-aware (``seq``: single-query attention
over token plus position embeddings). Each box gets ``v_b = tanh(W x_b + c)``
from its hand-made features and is scored by ``u . v_b``. A QA head reads
``u * mean_b(v_b)`` through a linear layer.

All arithmetic is float64. Batched functions take a :class:`GroundingData`
or :class:`QAData` slice and return the mean loss together with gradients
shaped like :class:`ModelParams`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .geometry import DEFAULT_IOU_THRESHOLD, Box, correct_at_iou
from .rng import numpy_rng
from .worldgen import CATEGORIES, COLORS, QA_ANSWERS, SIZES, VOCAB, QAExample

VOCAB_INDEX = {t: i for i, t in enumerate(VOCAB)}
FEATURE_DIM = 5 + len(CATEGORIES) + len(COLORS) + len(SIZES)
N_ANSWERS = len(QA_ANSWERS)
PARAM_NAMES = ("E", "P", "q", "W", "c", "U", "d0")
ENCODERS = ("bow", "seq")
CHECKPOINT_VERSION = 1


class NonFiniteError(FloatingPointError):
    def __init__(self, what: str):
        super().__init__(f"non-finite value in {what}")
        self.what = what


@dataclass
class ModelParams:
    E: np.ndarray  # (V, d) token embeddings
    P: np.ndarray  # (Lmax, d) position embeddings
    q: np.ndarray  # (d,) attention query
    W: np.ndarray  # (d, f) box projection
    c: np.ndarray  # (d,)
    U: np.ndarray  # (A, d) QA head
    d0: np.ndarray  # (A,)
    encoder: str = "seq"

    def __post_init__(self):
        if self.encoder not in ENCODERS:
            raise ValueError(f"unknown encoder {self.encoder!r}")

    @property
    def d(self) -> int:
        return self.E.shape[1]

    @property
    def lmax(self) -> int:
        return self.P.shape[0]

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in PARAM_NAMES}

    def copy(self) -> "ModelParams":
        return ModelParams(**{k: v.copy() for k, v in self.arrays().items()}, encoder=self.encoder)

    def zeros_like(self) -> "ModelParams":
        return ModelParams(**{k: np.zeros_like(v) for k, v in self.arrays().items()}, encoder=self.encoder)

    def n_params(self) -> int:
        return sum(v.size for v in self.arrays().values())

    def check_finite(self, what: str = "parameter") -> None:
        for k, v in self.arrays().items():
            if not np.all(np.isfinite(v)):
                raise NonFiniteError(f"{what} {k}")


def init_params(
    seed: int,
    encoder: str = "seq",
    d: int = 32,
    lmax: int = 16,
    scale: float = 0.1,
) -> ModelParams:
    """Uniform(-scale, scale) initialization from a derived seed."""
    rng = numpy_rng(seed, "init")
    shapes = {
        "E": (len(VOCAB), d),
        "P": (lmax, d),
        "q": (d,),
        "W": (d, FEATURE_DIM),
        "c": (d,),
        "U": (N_ANSWERS, d),
        "d0": (N_ANSWERS,),
    }
    arrays = {k: rng.uniform(-scale, scale, size=s) for k, s in shapes.items()}
    return ModelParams(**arrays, encoder=encoder)


# ---------------------------------------------------------------------------
# checkpoints


def params_to_dict(params: ModelParams) -> dict:
    return {
        "version": CHECKPOINT_VERSION,
        "encoder": params.encoder,
        "tensors": {
            k: {"shape": list(v.shape), "data": v.ravel().tolist()}
            for k, v in params.arrays().items()
        },
    }


def params_from_dict(d: dict) -> ModelParams:
    if d.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {d.get('version')!r}")
    arrays = {}
    for k in PARAM_NAMES:
        t = d["tensors"][k]
        arrays[k] = np.asarray(t["data"], dtype=np.float64).reshape(t["shape"])
    return ModelParams(**arrays, encoder=d["encoder"])


def save_params(params: ModelParams, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(params_to_dict(params), fh, sort_keys=True)
        fh.write("\n")


def load_params(path) -> ModelParams:
    with open(path, encoding="utf-8") as fh:
        return params_from_dict(json.load(fh))


# ---------------------------------------------------------------------------
# featurization


def box_features(box: Box) -> np.ndarray:
    """``[cx, cy, w, h, area] ++ onehot(category) ++ onehot(color) ++ onehot(size)``."""
    x = np.zeros(FEATURE_DIM)
    x[:5] = (box.cx, box.cy, box.w, box.h, box.w * box.h)
    o = 5
    x[o + CATEGORIES.index(box.category)] = 1.0
    o += len(CATEGORIES)
    x[o + COLORS.index(box.color)] = 1.0
    o += len(COLORS)
    x[o + SIZES.index(box.size)] = 1.0
    return x


def token_ids(tokens: Sequence[str], lmax: int) -> list[int]:
    if not 1 <= len(tokens) <= lmax:
        raise ValueError(f"expression length {len(tokens)} outside 1..{lmax}")
    try:
        return [VOCAB_INDEX[t] for t in tokens]
    except KeyError as exc:
        raise ValueError(f"out-of-vocabulary token {exc.args[0]!r}") from None


@dataclass
class GroundingData:
    """Padded arrays for a set of grounding examples.

    ``gold`` is the position of the gold box within its scene's box list.
    """

    tokens: np.ndarray  # (M, L) int
    tok_mask: np.ndarray  # (M, L) bool
    feats: np.ndarray  # (M, N, f)
    box_mask: np.ndarray  # (M, N) bool
    gold: np.ndarray  # (M,) int
    ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    hit: Optional[np.ndarray] = None  # (M, N) bool: box counts as correct under the IoU rule

    def __len__(self) -> int:
        return len(self.gold)

    def take(self, idx) -> "GroundingData":
        idx = np.asarray(idx)
        tm, bm = self.tok_mask[idx], self.box_mask[idx]
        L = max(int(tm.sum(1).max()), 1)
        N = max(int(bm.sum(1).max()), 1)
        return GroundingData(
            tokens=self.tokens[idx, :L],
            tok_mask=tm[:, :L],
            feats=self.feats[idx, :N],
            box_mask=bm[:, :N],
            gold=self.gold[idx],
            ids=self.ids[idx] if len(self.ids) else self.ids,
            hit=None if self.hit is None else self.hit[idx, :N],
        )


@dataclass
class QAData:
    tokens: np.ndarray
    tok_mask: np.ndarray
    feats: np.ndarray
    box_mask: np.ndarray
    answer: np.ndarray

    def __len__(self) -> int:
        return len(self.answer)

    def take(self, idx) -> "QAData":
        idx = np.asarray(idx)
        tm, bm = self.tok_mask[idx], self.box_mask[idx]
        L = max(int(tm.sum(1).max()), 1)
        N = max(int(bm.sum(1).max()), 1)
        return QAData(
            tokens=self.tokens[idx, :L],
            tok_mask=tm[:, :L],
            feats=self.feats[idx, :N],
            box_mask=bm[:, :N],
            answer=self.answer[idx],
        )


def _pack(token_lists, scenes, lmax):
    M = len(token_lists)
    L = max((len(t) for t in token_lists), default=1)
    N = max((len(s.boxes) for s in scenes), default=1)
    tokens = np.zeros((M, L), dtype=np.int64)
    tok_mask = np.zeros((M, L), dtype=bool)
    feats = np.zeros((M, N, FEATURE_DIM))
    box_mask = np.zeros((M, N), dtype=bool)
    for m, (toks, scene) in enumerate(zip(token_lists, scenes)):
        ids = token_ids(toks, lmax)
        tokens[m, : len(ids)] = ids
        tok_mask[m, : len(ids)] = True
        for n, b in enumerate(scene.boxes):
            feats[m, n] = box_features(b)
        box_mask[m, : len(scene.boxes)] = True
    return tokens, tok_mask, feats, box_mask


def tensorize(
    examples: Sequence, lmax: int = 16, iou_threshold: float = DEFAULT_IOU_THRESHOLD
) -> GroundingData:
    """Pack grounding examples (anything with ``.scene`` and ``.expr``).

    ``hit[m, n]`` records whether predicting box n of example m would be
    judged correct, i.e. IoU with the gold box above ``iou_threshold``.
    """
    scenes = [e.scene for e in examples]
    tokens, tok_mask, feats, box_mask = _pack([e.expr.tokens for e in examples], scenes, lmax)
    gold = np.array([e.scene.index_of(e.expr.gold_box) for e in examples], dtype=np.int64)
    ids = np.array([getattr(e, "instance_id", i) for i, e in enumerate(examples)], dtype=np.int64)
    hit = np.zeros(box_mask.shape, dtype=bool)
    for m, e in enumerate(examples):
        g = e.scene.box(e.expr.gold_box)
        for n, b in enumerate(e.scene.boxes):
            hit[m, n] = correct_at_iou(b, g, iou_threshold)
    return GroundingData(tokens, tok_mask, feats, box_mask, gold, ids, hit)


def tensorize_qa(examples: Sequence[QAExample], lmax: int = 16) -> QAData:
    scenes = [e.scene for e in examples]
    tokens, tok_mask, feats, box_mask = _pack([e.tokens for e in examples], scenes, lmax)
    answer = np.array([e.answer for e in examples], dtype=np.int64)
    return QAData(tokens, tok_mask, feats, box_mask, answer)


# ---------------------------------------------------------------------------
# forward / backward building blocks


def encode_batch(params: ModelParams, tokens: np.ndarray, tok_mask: np.ndarray):
    """Expression vectors ``u`` of shape (B, d) and a cache for :func:`encode_backward`."""
    if tokens.shape[1] > params.lmax:
        raise ValueError(f"expression longer than {params.lmax} tokens")
    lengths = tok_mask.sum(1)
    if np.any(lengths < 1):
        raise ValueError("empty expression")
    if params.encoder == "bow":
        # sorted left-to-right accumulation makes the mean exactly order-free
        sentinel = len(params.E)
        keyed = np.where(tok_mask, tokens, sentinel)
        srt = np.sort(keyed, axis=1)
        valid = srt < sentinel
        rows = np.where(valid, srt, 0)
        acc = np.zeros((tokens.shape[0], params.d))
        for t in range(srt.shape[1]):
            acc = acc + np.where(valid[:, t, None], params.E[rows[:, t]], 0.0)
        u = acc / lengths[:, None]
        return u, ("bow", tokens, tok_mask, lengths)
    L = tokens.shape[1]
    H = params.E[tokens] + params.P[None, :L]
    scale = 1.0 / np.sqrt(params.d)
    logits = H @ params.q * scale
    logits = np.where(tok_mask, logits, -np.inf)
    logits = logits - logits.max(1, keepdims=True)
    a = np.exp(logits)
    a = a / a.sum(1, keepdims=True)
    u = np.einsum("bl,bld->bd", a, H)
    return u, ("seq", tokens, tok_mask, H, a, scale)


def encode_backward(params: ModelParams, cache, du: np.ndarray, grads: ModelParams) -> None:
    if cache[0] == "bow":
        _, tokens, tok_mask, lengths = cache
        g = du / lengths[:, None]
        contrib = np.where(tok_mask[:, :, None], g[:, None, :], 0.0)
        np.add.at(grads.E, tokens.ravel(), contrib.reshape(-1, params.d))
        return
    _, tokens, tok_mask, H, a, scale = cache
    L = tokens.shape[1]
    dH = a[:, :, None] * du[:, None, :]
    da = np.einsum("bd,bld->bl", du, H)
    dlogit = a * (da - (a * da).sum(1, keepdims=True))
    dlogit = np.where(tok_mask, dlogit, 0.0)
    grads.q += scale * np.einsum("bl,bld->d", dlogit, H)
    dH += scale * dlogit[:, :, None] * params.q[None, None, :]
    dH = np.where(tok_mask[:, :, None], dH, 0.0)
    grads.P[:L] += dH.sum(0)
    np.add.at(grads.E, tokens.ravel(), dH.reshape(-1, params.d))


def box_values(params: ModelParams, feats: np.ndarray) -> np.ndarray:
    return np.tanh(feats @ params.W.T + params.c)


def box_values_backward(params, feats, V, dV, box_mask, grads) -> None:
    dZ = np.where(box_mask[..., None], dV * (1.0 - V * V), 0.0)
    grads.W += np.einsum("bnd,bnf->df", dZ, feats)
    grads.c += dZ.sum((0, 1))


def masked_log_softmax(s: np.ndarray, mask: np.ndarray) -> np.ndarray:
    s = np.where(mask, s, -np.inf)
    m = s.max(-1, keepdims=True)
    z = s - m
    lse = np.log(np.exp(z).sum(-1, keepdims=True))
    return np.where(mask, z - lse, -np.inf)


def grounding_scores(params: ModelParams, batch: GroundingData) -> np.ndarray:
    """Per-box logits (B, N); padded boxes get -inf."""
    u, _ = encode_batch(params, batch.tokens, batch.tok_mask)
    V = box_values(params, batch.feats)
    s = np.einsum("bnd,bd->bn", V, u)
    return np.where(batch.box_mask, s, -np.inf)


def _check(loss: float, grads: Optional[ModelParams]) -> None:
    if not np.isfinite(loss):
        raise NonFiniteError("loss")
    if grads is not None:
        grads.check_finite("gradient of")


def ce_per_example(params: ModelParams, batch: GroundingData):
    """Cross-entropy per example plus everything needed to backpropagate."""
    u, enc_cache = encode_batch(params, batch.tokens, batch.tok_mask)
    V = box_values(params, batch.feats)
    s = np.einsum("bnd,bd->bn", V, u)
    logp = masked_log_softmax(s, batch.box_mask)
    B = len(batch.gold)
    losses = -logp[np.arange(B), batch.gold]
    return losses, (u, enc_cache, V, logp)


def ce_output_grads(batch, fwd, weights: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of ``sum_b weights[b] * loss_b`` with respect to ``V`` and ``u``."""
    u, _, V, logp = fwd
    B = len(batch.gold)
    ds = np.where(batch.box_mask, np.exp(logp), 0.0)
    ds[np.arange(B), batch.gold] -= 1.0
    ds *= weights[:, None]
    dV = ds[:, :, None] * u[:, None, :]
    du = np.einsum("bn,bnd->bd", ds, V)
    return dV, du


def trunk_backward(params, batch, fwd, dV, du, grads: ModelParams) -> None:
    _, enc_cache, V, _ = fwd
    box_values_backward(params, batch.feats, V, dV, batch.box_mask, grads)
    encode_backward(params, enc_cache, du, grads)


def ce_backward(params, batch, fwd, weights: np.ndarray, grads: ModelParams) -> None:
    """Backpropagate ``sum_b weights[b] * loss_b`` into ``grads``."""
    dV, du = ce_output_grads(batch, fwd, weights)
    trunk_backward(params, batch, fwd, dV, du, grads)


def ce_loss_and_grad(params: ModelParams, batch: GroundingData, with_grad: bool = True):
    losses, fwd = ce_per_example(params, batch)
    loss = float(losses.mean())
    grads = None
    if with_grad:
        grads = params.zeros_like()
        ce_backward(params, batch, fwd, np.full(len(losses), 1.0 / len(losses)), grads)
    _check(loss, grads)
    return loss, grads


def qa_forward(params: ModelParams, batch: QAData):
    u, enc_cache = encode_batch(params, batch.tokens, batch.tok_mask)
    V = box_values(params, batch.feats)
    nb = batch.box_mask.sum(1)
    z = np.where(batch.box_mask[..., None], V, 0.0).sum(1) / nb[:, None]
    h = u * z
    logits = h @ params.U.T + params.d0
    return logits, (u, enc_cache, V, z, h, nb)


def qa_loss_and_grad(params: ModelParams, batch: QAData, with_grad: bool = True):
    logits, (u, enc_cache, V, z, h, nb) = qa_forward(params, batch)
    full = np.ones_like(logits, dtype=bool)
    logp = masked_log_softmax(logits, full)
    B = len(batch.answer)
    loss = float(-logp[np.arange(B), batch.answer].mean())
    grads = None
    if with_grad:
        grads = params.zeros_like()
        dlog = np.exp(logp)
        dlog[np.arange(B), batch.answer] -= 1.0
        dlog /= B
        grads.U += dlog.T @ h
        grads.d0 += dlog.sum(0)
        dh = dlog @ params.U
        du = dh * z
        dz = dh * u
        dV = np.where(batch.box_mask[..., None], dz[:, None, :] / nb[:, None, None], 0.0)
        box_values_backward(params, batch.feats, V, dV, batch.box_mask, grads)
        encode_backward(params, enc_cache, du, grads)
    _check(loss, grads)
    return loss, grads


def qa_predict(params: ModelParams, batch: QAData) -> np.ndarray:
    logits, _ = qa_forward(params, batch)
    return logits.argmax(1)


# ---------------------------------------------------------------------------
# single-example conveniences


def encode_expression(params: ModelParams, tokens: Sequence[str]) -> np.ndarray:
    ids = np.array([token_ids(tokens, params.lmax)])
    u, _ = encode_batch(params, ids, np.ones_like(ids, dtype=bool))
    return u[0]


def grounding_loss(params: ModelParams, example) -> tuple[float, np.ndarray]:
    """(cross-entropy of the gold box, per-box logits) for one example."""
    batch = tensorize([example], params.lmax)
    losses, (_, _, V, logp) = ce_per_example(params, batch)
    logits = grounding_scores(params, batch)[0]
    return float(losses[0]), logits


def qa_loss(params: ModelParams, example: QAExample) -> tuple[float, np.ndarray]:
    batch = tensorize_qa([example], params.lmax)
    loss, _ = qa_loss_and_grad(params, batch, with_grad=False)
    logits, _ = qa_forward(params, batch)
    return loss, logits[0]


def backward(params: ModelParams, batch, loss_spec, seed: int = 0):
    """Loss and exact gradients for ``loss_spec``.

    ``loss_spec`` is ``"ce"`` (grounding cross-entropy), ``"qa"``, a
    :class:`reflab.training.ContrastiveConfig`, or ``"mtl"`` with ``batch``
    a ``(GroundingData, QAData)`` pair.
    """
    if loss_spec == "ce":
        return ce_loss_and_grad(params, batch)
    if loss_spec == "qa":
        return qa_loss_and_grad(params, batch)
    from . import training

    if loss_spec == "mtl":
        return training.mtl_step_loss_and_grad(params, batch[0], batch[1])
    if isinstance(loss_spec, training.ContrastiveConfig):
        return training.contrastive_loss_and_grad(params, batch, loss_spec, seed)
    raise ValueError(f"unknown loss spec {loss_spec!r}")
