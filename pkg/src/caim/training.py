"""Siamese contrastive training with gate routing and Adam.

The same loop serves two stages: pretraining the backbone on source-source
pairs (everything trainable), and adapting the inserted modulation blocks
on cross-modal pairs (backbone frozen, source branch gated off). Genuine
pairs carry label 0, impostors label 1.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .autodiff import NonFiniteError, Tensor, backward, relu, sqrt, sum_rows, zero_grads
from .backbone import ModelAssembly, forward_embed, freeze_backbone
from .metrics import evaluate
from .seeding import make_rng

__all__ = [
    "DivergenceError",
    "TrainConfig",
    "PairBatch",
    "AdamState",
    "EpochStats",
    "contrastive_loss",
    "sample_pairs",
    "iter_pair_batches",
    "adam_update",
    "train_caim",
    "pretrain_backbone",
]


class DivergenceError(ArithmeticError):
    """Training produced a non-finite loss or gradient."""


@dataclass
class TrainConfig:
    """Contrastive training settings.

    ``desk_scale`` shrinks epochs/batch for runs that must finish in
    minutes; all other defaults are the full-scale ones.
    """

    margin: float = 2.0
    learning_rate: float = 1e-4
    epochs: int = 50
    batch_pairs: int = 90
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self) -> None:
        if self.margin <= 0:
            raise ValueError("margin must be > 0")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be > 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_pairs < 2:
            raise ValueError("batch size must be >= 2 so both pair labels are present")

    @classmethod
    def desk_scale(cls, **overrides) -> "TrainConfig":
        overrides.setdefault("epochs", 20)
        overrides.setdefault("batch_pairs", 32)
        return cls(**overrides)


@dataclass
class PairBatch:
    """A batch of image pairs; label 0 = same identity, 1 = different."""

    left_images: np.ndarray  # [B, C, H, W]
    right_images: np.ndarray
    labels: np.ndarray  # [B] in {0, 1}
    left_ids: np.ndarray
    right_ids: np.ndarray
    with_replacement: bool = False


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    holdout_eer: float


def contrastive_loss(emb_a: Tensor, emb_b: Tensor, labels, margin: float) -> Tensor:
    """Mean over pairs of (1-y) * d^2/2 + y * max(0, margin - d)^2 / 2.

    ``d`` is the Euclidean distance between embedding rows; its derivative
    at d = 0 is taken as zero.
    """
    if margin <= 0:
        raise ValueError("margin must be > 0")
    labels = np.asarray(labels, dtype=np.float64)
    if emb_a.shape != emb_b.shape or labels.shape != (emb_a.shape[0],):
        raise ValueError("embeddings and labels disagree on batch size")
    if not np.isin(labels, (0.0, 1.0)).all():
        raise ValueError("labels must be 0 (genuine) or 1 (impostor)")

    diff = emb_a - emb_b
    dist_sq = sum_rows(diff * diff)
    dist = sqrt(dist_sq)
    hinge = relu(margin - dist)
    genuine_term = dist_sq * 0.5
    impostor_term = (hinge * hinge) * 0.5
    y = Tensor(labels)
    return (Tensor(1.0 - labels) * genuine_term + y * impostor_term).mean()


def _group_records(records, modality: str) -> list:
    return [r for r in records if r.modality == modality]


def _pair_pools(records, modalities: tuple[str, str]):
    """Genuine index pairs and impostor index pairs over two record lists.

    For same-modality pairing the two lists coincide and unordered distinct
    pairs (i < j) are used.
    """
    left = _group_records(records, modalities[0])
    right = _group_records(records, modalities[1])
    if not left or not right:
        raise ValueError(f"no records for modalities {modalities}")
    left_ids = np.array([r.identity for r in left])
    right_ids = np.array([r.identity for r in right])
    same_id = left_ids[:, None] == right_ids[None, :]
    if modalities[0] == modalities[1]:
        upper = np.triu(np.ones_like(same_id, dtype=bool), k=1)
        genuine = np.argwhere(same_id & upper)
        impostor = np.argwhere(~same_id & upper)
    else:
        genuine = np.argwhere(same_id)
        impostor = np.argwhere(~same_id)
    if len({r.identity for r in left}) < 2:
        raise ValueError("pair sampling needs at least 2 identities")
    return left, right, genuine, impostor


def iter_pair_batches(
    records,
    batch_pairs: int,
    rng: np.random.Generator,
    modalities: tuple[str, str] = ("source", "target"),
):
    """Yield balanced 50/50 genuine/impostor batches for one epoch.

    One epoch is a without-replacement pass over every genuine combination
    (truncated to whole batches); impostors are drawn without replacement
    from their own pool. Datasets too small for that fall back to
    with-replacement sampling and are flagged on the batch.
    """
    left, right, genuine, impostor = _pair_pools(records, modalities)
    n_genuine = batch_pairs // 2
    n_impostor = batch_pairs - n_genuine

    replacement = len(genuine) < n_genuine
    if replacement:
        warnings.warn("dataset too small for without-replacement pairs; sampling with replacement")
        g_order = rng.integers(0, len(genuine), size=n_genuine)
        batches = 1
    else:
        g_order = rng.permutation(len(genuine))
        batches = len(genuine) // n_genuine

    need_impostors = batches * n_impostor
    if need_impostors > len(impostor):
        replacement = True
        i_order = rng.integers(0, len(impostor), size=need_impostors)
    else:
        i_order = rng.permutation(len(impostor))[:need_impostors]

    for b in range(batches):
        g_idx = genuine[g_order[b * n_genuine : (b + 1) * n_genuine]]
        i_idx = impostor[i_order[b * n_impostor : (b + 1) * n_impostor]]
        rows = np.concatenate([g_idx, i_idx])
        labels = np.concatenate([np.zeros(len(g_idx)), np.ones(len(i_idx))])
        yield PairBatch(
            left_images=np.stack([left[i].image for i, _ in rows]),
            right_images=np.stack([right[j].image for _, j in rows]),
            labels=labels,
            left_ids=np.array([left[i].identity for i, _ in rows]),
            right_ids=np.array([right[j].identity for _, j in rows]),
            with_replacement=replacement,
        )


def sample_pairs(
    records,
    batch_pairs: int,
    seed: int,
    modalities: tuple[str, str] = ("source", "target"),
) -> PairBatch:
    """First batch of the epoch stream for the given seed."""
    rng = np.random.default_rng(seed)
    return next(iter_pair_batches(records, batch_pairs, rng, modalities))


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def for_params(cls, params: list[Tensor]) -> "AdamState":
        return cls(
            m=[np.zeros_like(p.data) for p in params],
            v=[np.zeros_like(p.data) for p in params],
        )


def adam_update(
    params: list[Tensor],
    grads: list[np.ndarray],
    state: AdamState,
    cfg: TrainConfig,
) -> None:
    """One Adam step with bias correction, in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and state must align")
    for k, (p, g) in enumerate(zip(params, grads)):
        if not p.requires_grad:
            raise ValueError(f"parameter {k} is frozen; refusing to update it")
        if g.shape != p.data.shape:
            raise ValueError(f"gradient {k} shape {g.shape} != parameter shape {p.data.shape}")
        if not np.isfinite(g).all():
            raise DivergenceError(f"non-finite gradient for parameter {k} (shape {g.shape})")
    state.step += 1
    t = state.step
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        p.data -= cfg.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps)


def _training_loop(
    model: ModelAssembly,
    params: list[Tensor],
    train_records,
    eval_records,
    cfg: TrainConfig,
    modalities: tuple[str, str],
    left_gate: int,
    right_gate: int,
    history_metric: str,
) -> list[EpochStats]:
    state = AdamState.for_params(params)
    history: list[EpochStats] = []
    for epoch in range(cfg.epochs):
        rng = make_rng(cfg.seed, "pairs", epoch)
        losses = []
        for batch in iter_pair_batches(train_records, cfg.batch_pairs, rng, modalities):
            try:
                emb_left = forward_embed(model, batch.left_images, gate=left_gate)
                emb_right = forward_embed(model, batch.right_images, gate=right_gate)
                loss = contrastive_loss(emb_left, emb_right, batch.labels, cfg.margin)
            except NonFiniteError as exc:
                raise DivergenceError(f"non-finite loss at epoch {epoch}: {exc}") from exc
            backward(loss)
            grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
            adam_update(params, grads, state, cfg)
            zero_grads(params)
            losses.append(loss.item())
        result = evaluate(model, eval_records)
        holdout = (
            result.cross_modal.eer if history_metric == "cross_modal" else result.source_source.eer
        )
        history.append(EpochStats(epoch=epoch, mean_loss=float(np.mean(losses)), holdout_eer=holdout))
    return history


def train_caim(model: ModelAssembly, bundle, cfg: TrainConfig) -> list[EpochStats]:
    """Adapt the modulation blocks on cross-modal pairs; backbone stays frozen.

    Source images flow with the gate closed, target images with it open, so
    only the target branch touches the blocks. Returns per-epoch stats
    (mean loss and held-out cross-modal EER).
    """
    if not model.frozen:
        raise ValueError("backbone must be frozen before adapting modulation blocks")
    if not model.caim_params:
        raise ValueError("no modulation blocks inserted")
    params = model.trainable_tensors()
    return _training_loop(
        model,
        params,
        bundle.train_records,
        bundle.eval_records,
        cfg,
        modalities=("source", "target"),
        left_gate=0,
        right_gate=1,
        history_metric="cross_modal",
    )


def pretrain_backbone(model: ModelAssembly, bundle, cfg: TrainConfig) -> list[EpochStats]:
    """Train the backbone on source-source pairs, then freeze it.

    Stands in for an externally pretrained embedding model; history tracks
    held-out source-source EER.
    """
    if model.frozen:
        raise ValueError("backbone is already frozen")
    if model.caim_params:
        raise ValueError("pretraining must happen before block insertion")
    params = model.trainable_tensors()
    history = _training_loop(
        model,
        params,
        bundle.train_records,
        bundle.eval_records,
        cfg,
        modalities=("source", "source"),
        left_gate=0,
        right_gate=0,
        history_metric="source_source",
    )
    freeze_backbone(model)
    return history
