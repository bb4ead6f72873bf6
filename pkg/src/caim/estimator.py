"""Scikit-learn style facade over the full matching pipeline.

``CaimMatcher.fit`` takes a :class:`~caim.data.DatasetBundle`, pretrains the
backbone on source pairs, inserts the gated modulation blocks, and adapts
them on cross-modal pairs. ``transform`` embeds images for either modality;
``score`` reports cross-modal AUC on the bundle's eval split.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .autodiff import no_grad
from .backbone import BackboneConfig, build_backbone, forward_embed, insert_caim
from .data import DatasetBundle
from .metrics import EvalResult, embed_records, evaluate
from .seeding import hash64
from .training import EpochStats, TrainConfig, pretrain_backbone, train_caim

__all__ = ["CaimMatcher", "check_images"]


def check_images(X, image_hw: int, name: str = "X") -> np.ndarray:
    """Validate and coerce an image batch to float64 [N, 1|3, H, W]."""
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[1] not in (1, 3):
        raise ValueError(f"{name} must have shape [N, 1|3, H, W], got {arr.shape}")
    if arr.shape[2] != image_hw or arr.shape[3] != image_hw:
        raise ValueError(f"{name} must be {image_hw}x{image_hw}, got {arr.shape[2]}x{arr.shape[3]}")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite values")
    return arr


class CaimMatcher(BaseEstimator, TransformerMixin):
    """Cross-modality embedding matcher with a frozen backbone.

    Parameters follow the usual estimator convention: stored verbatim in
    ``__init__`` so ``get_params``/``set_params``/``clone`` work unchanged.
    """

    def __init__(
        self,
        image_hw: int = 32,
        channels: tuple[int, ...] = (16, 32, 64, 64, 64),
        embedding_dim: int = 64,
        modulation_blocks: int = 3,
        margin: float = 2.0,
        learning_rate: float = 1e-4,
        epochs: int = 20,
        batch_pairs: int = 32,
        pretrain_learning_rate: float = 1e-3,
        pretrain_epochs: int = 4,
        pretrain_margin: float = 1.0,
        seed: int = 0,
    ):
        self.image_hw = image_hw
        self.channels = channels
        self.embedding_dim = embedding_dim
        self.modulation_blocks = modulation_blocks
        self.margin = margin
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_pairs = batch_pairs
        self.pretrain_learning_rate = pretrain_learning_rate
        self.pretrain_epochs = pretrain_epochs
        self.pretrain_margin = pretrain_margin
        self.seed = seed

    def _backbone_config(self) -> BackboneConfig:
        return BackboneConfig(
            num_blocks=len(self.channels),
            channels=tuple(self.channels),
            input_hw=self.image_hw,
            embedding_dim=self.embedding_dim,
        )

    def fit(self, X: DatasetBundle, y=None) -> "CaimMatcher":
        """Run the full pipeline on a dataset bundle."""
        if not isinstance(X, DatasetBundle):
            raise TypeError("fit expects a DatasetBundle")
        model = build_backbone(self._backbone_config(), seed=hash64(self.seed, "backbone"))
        self.pretrain_history_ = pretrain_backbone(
            model,
            X,
            TrainConfig(
                margin=self.pretrain_margin,
                learning_rate=self.pretrain_learning_rate,
                epochs=self.pretrain_epochs,
                batch_pairs=self.batch_pairs,
                seed=hash64(self.seed, "pretrain"),
            ),
        )
        self.baseline_result_ = evaluate(model, X.eval_records)
        insert_caim(model, count=self.modulation_blocks, seed=hash64(self.seed, "caim"))
        self.history_: list[EpochStats] = train_caim(
            model,
            X,
            TrainConfig(
                margin=self.margin,
                learning_rate=self.learning_rate,
                epochs=self.epochs,
                batch_pairs=self.batch_pairs,
                seed=hash64(self.seed, "train"),
            ),
        )
        self.model_ = model
        return self

    def _require_fitted(self) -> None:
        if not hasattr(self, "model_"):
            raise RuntimeError("this matcher is not fitted; call fit first")

    def transform(self, X, modality: str = "source") -> np.ndarray:
        """Embed images ([N, C, H, W] array or SampleRecord list) for a modality."""
        self._require_fitted()
        if modality not in ("source", "target"):
            raise ValueError(f"unknown modality {modality!r}")
        gate = 0 if modality == "source" else 1
        if isinstance(X, (list, tuple)) and X and hasattr(X[0], "image"):
            return embed_records(self.model_, list(X), gate=gate)
        images = check_images(X, self.image_hw)
        with no_grad():
            return forward_embed(self.model_, images, gate=gate).data

    def evaluate(self, X: DatasetBundle) -> EvalResult:
        self._require_fitted()
        return evaluate(self.model_, X.eval_records)

    def score(self, X: DatasetBundle, y=None) -> float:
        """Cross-modal verification AUC on the bundle's eval split."""
        return self.evaluate(X).cross_modal.auc
