"""Verification and identification metrics over cosine-similarity scores.

Scores are similarities (higher = more alike). Threshold conventions are
pinned exactly because small score sets are sensitive to them:

* EER sweeps the union of all observed scores; FAR(t) is the fraction of
  impostor scores >= t, FRR(t) the fraction of genuine scores < t, and the
  reported rate is (FAR+FRR)/2 at the threshold minimizing |FAR-FRR|
  (ties resolved toward the lower threshold).
* AUC is the Mann-Whitney statistic with ties counted 1/2.
* Rank-1 breaks score ties toward the lowest gallery index.
* VR@FAR uses the smallest union threshold with FAR <= target; if no
  observed threshold qualifies, genuine scores strictly above the highest
  impostor score are counted.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .autodiff import no_grad
from .backbone import ModelAssembly, forward_embed

__all__ = [
    "FAR_TARGETS",
    "ScoreSet",
    "MetricsReport",
    "EvalResult",
    "score_pairs",
    "similarity_matrix",
    "eer",
    "auc",
    "rank1",
    "vr_at_far",
    "build_report",
    "embed_records",
    "evaluate",
]

FAR_TARGETS = (0.0001, 0.001, 0.01, 0.05)


@dataclass
class ScoreSet:
    genuine: np.ndarray
    impostor: np.ndarray

    def __post_init__(self) -> None:
        self.genuine = np.asarray(self.genuine, dtype=np.float64).ravel()
        self.impostor = np.asarray(self.impostor, dtype=np.float64).ravel()
        if not (np.isfinite(self.genuine).all() and np.isfinite(self.impostor).all()):
            raise ValueError("scores must be finite")


@dataclass
class MetricsReport:
    auc: float
    eer: float
    rank1: float
    vr_at_far: dict[float, float]
    genuine_count: int
    impostor_count: int
    gallery_count: int
    probe_count: int
    small_sample_fars: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "auc": self.auc,
            "eer": self.eer,
            "rank1": self.rank1,
            "vr_at_far": {f"{far:g}": rate for far, rate in self.vr_at_far.items()},
            "counts": {
                "genuine": self.genuine_count,
                "impostor": self.impostor_count,
                "gallery": self.gallery_count,
                "probes": self.probe_count,
            },
            "small_sample_fars": [f"{f:g}" for f in self.small_sample_fars],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def similarity_matrix(gallery_emb: np.ndarray, probe_emb: np.ndarray) -> np.ndarray:
    """Cosine similarities for unit-norm embeddings, indexed [probe, gallery]."""
    return np.asarray(probe_emb) @ np.asarray(gallery_emb).T


def score_pairs(
    gallery_emb: np.ndarray,
    gallery_ids: np.ndarray,
    probe_emb: np.ndarray,
    probe_ids: np.ndarray,
) -> ScoreSet:
    """Score every gallery x probe pair; partition by identity equality."""
    gallery_ids = np.asarray(gallery_ids)
    probe_ids = np.asarray(probe_ids)
    if len(gallery_ids) == 0 or len(probe_ids) == 0:
        raise ValueError("gallery and probe sets must be non-empty")
    sim = similarity_matrix(gallery_emb, probe_emb)
    genuine_mask = probe_ids[:, None] == gallery_ids[None, :]
    return ScoreSet(genuine=sim[genuine_mask], impostor=sim[~genuine_mask])


def _far_frr(scores: ScoreSet) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    thresholds = np.unique(np.concatenate([scores.genuine, scores.impostor]))
    imp_sorted = np.sort(scores.impostor)
    gen_sorted = np.sort(scores.genuine)
    # single division keeps rates exact rationals (1 - k/n is off by an ulp,
    # which breaks exact comparisons like far <= 1/20)
    n_at_or_above = imp_sorted.size - np.searchsorted(imp_sorted, thresholds, side="left")
    far = n_at_or_above / imp_sorted.size
    frr = np.searchsorted(gen_sorted, thresholds, side="left") / gen_sorted.size
    return thresholds, far, frr


def eer(scores: ScoreSet) -> float:
    if scores.genuine.size == 0 or scores.impostor.size == 0:
        raise ValueError("EER needs non-empty genuine and impostor sets")
    _, far, frr = _far_frr(scores)
    idx = int(np.argmin(np.abs(far - frr)))  # first minimum = lowest threshold
    return float((far[idx] + frr[idx]) / 2.0)


def auc(scores: ScoreSet) -> float:
    if scores.genuine.size == 0 or scores.impostor.size == 0:
        raise ValueError("AUC needs non-empty genuine and impostor sets")
    imp_sorted = np.sort(scores.impostor)
    below = np.searchsorted(imp_sorted, scores.genuine, side="left")
    upto = np.searchsorted(imp_sorted, scores.genuine, side="right")
    wins = below + 0.5 * (upto - below)
    return float(wins.sum() / (scores.genuine.size * scores.impostor.size))


def rank1(gallery_ids: np.ndarray, probe_ids: np.ndarray, sim: np.ndarray) -> float:
    """Fraction of probes whose best-scoring gallery entry shares their identity."""
    gallery_ids = np.asarray(gallery_ids)
    probe_ids = np.asarray(probe_ids)
    if sim.shape != (probe_ids.size, gallery_ids.size):
        raise ValueError(
            f"similarity matrix shape {sim.shape} != (probes={probe_ids.size}, gallery={gallery_ids.size})"
        )
    missing = set(probe_ids.tolist()) - set(gallery_ids.tolist())
    if missing:
        raise ValueError(f"probe identities missing from gallery: {sorted(missing)}")
    top = np.argmax(sim, axis=1)  # argmax returns the lowest index on ties
    return float(np.mean(gallery_ids[top] == probe_ids))


def vr_at_far(scores: ScoreSet, far_target: float) -> float:
    """Verification rate at the smallest observed threshold with FAR <= target."""
    if not 0.0 < far_target < 1.0:
        raise ValueError("far_target must lie in (0, 1)")
    if scores.genuine.size == 0 or scores.impostor.size == 0:
        raise ValueError("VR@FAR needs non-empty genuine and impostor sets")
    thresholds, far, _ = _far_frr(scores)
    qualifying = np.nonzero(far <= far_target)[0]
    if qualifying.size == 0:
        # every observed threshold over-accepts: operate above the top impostor
        return float(np.mean(scores.genuine > scores.impostor.max()))
    t = thresholds[qualifying[0]]
    return float(np.mean(scores.genuine >= t))


def build_report(
    gallery_emb: np.ndarray,
    gallery_ids: np.ndarray,
    probe_emb: np.ndarray,
    probe_ids: np.ndarray,
) -> MetricsReport:
    scores = score_pairs(gallery_emb, gallery_ids, probe_emb, probe_ids)
    sim = similarity_matrix(gallery_emb, probe_emb)
    small = [f for f in FAR_TARGETS if scores.impostor.size < 1.0 / f]
    return MetricsReport(
        auc=auc(scores),
        eer=eer(scores),
        rank1=rank1(np.asarray(gallery_ids), np.asarray(probe_ids), sim),
        vr_at_far={f: vr_at_far(scores, f) for f in FAR_TARGETS},
        genuine_count=int(scores.genuine.size),
        impostor_count=int(scores.impostor.size),
        gallery_count=int(len(gallery_ids)),
        probe_count=int(len(probe_ids)),
        small_sample_fars=small,
    )


@dataclass
class EvalResult:
    """Cross-modal report plus the source-only report used by the
    forgetting check."""

    cross_modal: MetricsReport
    source_source: MetricsReport

    def to_dict(self) -> dict:
        return {
            "cross_modal": self.cross_modal.to_dict(),
            "source_source": self.source_source.to_dict(),
        }


def embed_records(model: ModelAssembly, records, gate: int, batch_size: int = 64) -> np.ndarray:
    """Stack embeddings for a record list, batched in list order."""
    if not records:
        raise ValueError("no records to embed")
    chunks = []
    with no_grad():
        for start in range(0, len(records), batch_size):
            batch = records[start : start + batch_size]
            images = np.stack([r.image for r in batch])
            chunks.append(forward_embed(model, images, gate=gate).data)
    return np.concatenate(chunks, axis=0)


def evaluate(model: ModelAssembly, records, batch_size: int = 64) -> EvalResult:
    """Full metric report over an eval split.

    Cross-modal: source records form the gallery (gate 0), target records
    the probes (gate 1). Source-source: each identity's source samples are
    split in half by sample index (first half gallery, rest probes), all
    embedded with gate 0.
    """
    sources = [r for r in records if r.modality == "source"]
    targets = [r for r in records if r.modality == "target"]
    if not sources or not targets:
        raise ValueError("eval split needs both source and target records")

    src_emb = embed_records(model, sources, gate=0, batch_size=batch_size)
    tgt_emb = embed_records(model, targets, gate=1, batch_size=batch_size)
    src_ids = np.array([r.identity for r in sources])
    tgt_ids = np.array([r.identity for r in targets])
    cross = build_report(src_emb, src_ids, tgt_emb, tgt_ids)

    counts_per_id: dict[int, int] = {}
    for r in sources:
        counts_per_id[r.identity] = counts_per_id.get(r.identity, 0) + 1
    ranks: dict[int, int] = {}
    gal_idx, probe_idx = [], []
    for i, r in enumerate(sources):
        seen = ranks.get(r.identity, 0)
        ranks[r.identity] = seen + 1
        half = (counts_per_id[r.identity] + 1) // 2
        (gal_idx if seen < half else probe_idx).append(i)
    if not probe_idx:
        raise ValueError("source-source protocol needs >= 2 source samples per identity")
    source_report = build_report(
        src_emb[gal_idx], src_ids[gal_idx], src_emb[probe_idx], src_ids[probe_idx]
    )
    return EvalResult(cross_modal=cross, source_source=source_report)
