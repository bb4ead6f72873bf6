"""Deterministic generator of paired multi-modal identity images.

Each identity is a latent vector of Gaussian coefficients over a fixed
atlas of oriented, windowed cosine patterns. Source images render the
pattern sum in three slightly different channels plus small nuisance
(shift, gain jitter, pixel noise). Target images push a source rendering
through a modality transform (gain/offset, partial contrast inversion,
blur, noise, channel collapse) whose overall strength is one scalar, so
the domain gap is controllable and certifiable.

All pixel values live on the 8-bit grid (k/255) so that the PGM/PPM
on-disk format round-trips bit-exactly. Per-sample randomness derives from
``hash64(dataset_seed, identity_id, sample_index, modality_tag)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .seeding import hash64

__all__ = [
    "DatasetFormatError",
    "Identity",
    "SampleRecord",
    "ModalityTransform",
    "DatasetBundle",
    "generate_identities",
    "render_source",
    "apply_modality",
    "make_dataset",
    "save_dataset",
    "load_dataset",
]

CHANNEL_WEIGHTS = (1.0, 0.92, 0.84)  # mild channel differences so collapse is lossy
PATTERN_CONTRAST = 0.22
NUISANCE_MAX_SHIFT = 1
NUISANCE_GAIN_JITTER = 0.05
NUISANCE_NOISE_SIGMA = 0.01


class DatasetFormatError(ValueError):
    """A dataset directory is missing files or malformed."""


@dataclass
class Identity:
    id: int
    latent: np.ndarray  # [latent_dim]


@dataclass
class SampleRecord:
    identity: int
    modality: str  # "source" | "target"
    sample_index: int
    split: str  # "train" | "eval"
    image: np.ndarray  # [C, H, W] float64 in [0, 1], on the 8-bit grid
    nuisance_seed: int

    def __post_init__(self) -> None:
        if self.modality not in ("source", "target"):
            raise ValueError(f"unknown modality {self.modality!r}")
        if self.image.min() < 0.0 or self.image.max() > 1.0:
            raise ValueError("image values must lie in [0, 1]")


@dataclass
class ModalityTransform:
    """Target-modality appearance model; ``strength`` in [0, 1] scales all effects."""

    channel_gain: tuple[float, float, float] = (0.5, 0.5, 0.5)
    channel_offset: tuple[float, float, float] = (0.2, 0.2, 0.2)
    invert: bool = True
    blur_radius: int = 1
    noise_sigma: float = 0.02
    collapse_channels: bool = True
    strength: float = 0.7

    def __post_init__(self) -> None:
        if not 0.0 <= self.strength <= 1.0:
            raise ValueError("strength must lie in [0, 1]")
        if self.blur_radius < 0:
            raise ValueError("blur radius must be >= 0")

    def to_dict(self) -> dict:
        return {
            "channel_gain": list(self.channel_gain),
            "channel_offset": list(self.channel_offset),
            "invert": self.invert,
            "blur_radius": self.blur_radius,
            "noise_sigma": self.noise_sigma,
            "collapse_channels": self.collapse_channels,
            "strength": self.strength,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModalityTransform":
        return cls(
            channel_gain=tuple(d["channel_gain"]),
            channel_offset=tuple(d["channel_offset"]),
            invert=bool(d["invert"]),
            blur_radius=int(d["blur_radius"]),
            noise_sigma=float(d["noise_sigma"]),
            collapse_channels=bool(d["collapse_channels"]),
            strength=float(d["strength"]),
        )


@dataclass
class DatasetBundle:
    identities: list[Identity]
    transform: ModalityTransform
    train_records: list[SampleRecord]
    eval_records: list[SampleRecord]
    meta: dict = field(default_factory=dict)

    def records(self, split: str) -> list[SampleRecord]:
        if split == "train":
            return self.train_records
        if split == "eval":
            return self.eval_records
        raise ValueError(f"unknown split {split!r}")


def generate_identities(n: int, latent_dim: int = 16, seed: int = 0) -> list[Identity]:
    if n < 2:
        raise ValueError("need at least 2 identities")
    rng = np.random.default_rng(seed)
    latents = rng.standard_normal((n, latent_dim))
    return [Identity(id=i, latent=latents[i]) for i in range(n)]


@lru_cache(maxsize=8)
def _basis_atlas(latent_dim: int, h: int, w: int) -> np.ndarray:
    """Fixed atlas of Gaussian-windowed oriented cosine patterns, [G, H, W].

    Deterministic in its arguments only; each pattern is zero-mean with unit
    RMS so latent norms translate directly into image contrast.
    """
    ys = np.linspace(-1.0, 1.0, h)[:, None]
    xs = np.linspace(-1.0, 1.0, w)[None, :]
    golden = (np.sqrt(5.0) - 1.0) / 2.0
    patterns = np.empty((latent_dim, h, w))
    for g in range(latent_dim):
        theta = np.pi * g / latent_dim
        # low spatial frequencies keep the +-2 px nuisance shift small next
        # to identity changes (the separability certificate depends on it)
        freq = 1.0 + 0.5 * (g % 3)
        phase = 2.0 * np.pi * ((g * golden) % 1.0)
        cx = 0.5 * np.cos(2.0 * np.pi * g / latent_dim)
        cy = 0.5 * np.sin(2.0 * np.pi * g / latent_dim)
        u = np.cos(theta) * xs + np.sin(theta) * ys
        envelope = np.exp(-(((xs - cx) ** 2) + ((ys - cy) ** 2)) / (2.0 * 0.45**2))
        p = envelope * np.cos(np.pi * freq * u + phase)
        p = p - p.mean()
        p = p / np.sqrt((p * p).mean())
        patterns[g] = p
    patterns.setflags(write=False)
    return patterns


def _quantize(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def render_source(
    identity: Identity,
    nuisance_seed: int,
    h: int = 32,
    w: int = 32,
    split: str = "train",
    sample_index: int = 0,
) -> SampleRecord:
    """Render one source-modality image for an identity."""
    atlas = _basis_atlas(identity.latent.size, h, w)
    rng = np.random.default_rng(nuisance_seed)
    shift = rng.integers(-NUISANCE_MAX_SHIFT, NUISANCE_MAX_SHIFT + 1, size=2)
    gain = rng.uniform(1.0 - NUISANCE_GAIN_JITTER, 1.0 + NUISANCE_GAIN_JITTER)

    core = np.einsum("g,ghw->hw", identity.latent, atlas) / np.sqrt(identity.latent.size)
    core = np.roll(core, (int(shift[0]), int(shift[1])), axis=(0, 1))
    img = 0.5 + PATTERN_CONTRAST * gain * np.asarray(CHANNEL_WEIGHTS)[:, None, None] * core
    img = img + rng.normal(0.0, NUISANCE_NOISE_SIGMA, size=img.shape)
    return SampleRecord(
        identity=identity.id,
        modality="source",
        sample_index=sample_index,
        split=split,
        image=_quantize(img),
        nuisance_seed=nuisance_seed,
    )


def _box_blur(img: np.ndarray, radius: int) -> np.ndarray:
    k = 2 * radius + 1
    padded = np.pad(img, ((0, 0), (radius, radius), (radius, radius)), mode="edge")
    acc = np.zeros_like(img)
    for dy in range(k):
        for dx in range(k):
            acc += padded[:, dy : dy + img.shape[1], dx : dx + img.shape[2]]
    return acc / (k * k)


def apply_modality(record: SampleRecord, t: ModalityTransform, seed: int) -> SampleRecord:
    """Transform a source rendering into its target-modality counterpart.

    Stage order: gain/offset, partial contrast inversion, blur, noise,
    optional collapse to one channel. Each stage interpolates between the
    identity (strength 0) and its full effect (strength 1).
    """
    if record.modality != "source":
        raise ValueError("apply_modality expects a source record")
    s = t.strength
    rng = np.random.default_rng(seed)
    x = record.image.copy()

    gain = 1.0 + s * (np.asarray(t.channel_gain) - 1.0)
    offset = s * np.asarray(t.channel_offset)
    x = np.clip(gain[:, None, None] * x + offset[:, None, None], 0.0, 1.0)
    if t.invert:
        x = np.clip(x + s * (1.0 - 2.0 * x), 0.0, 1.0)
    if t.blur_radius > 0 and s > 0.0:
        x = (1.0 - s) * x + s * _box_blur(x, t.blur_radius)
    if t.noise_sigma > 0.0 and s > 0.0:
        x = x + rng.normal(0.0, s * t.noise_sigma, size=x.shape)
    if t.collapse_channels:
        x = x.mean(axis=0, keepdims=True)
    return SampleRecord(
        identity=record.identity,
        modality="target",
        sample_index=record.sample_index,
        split=record.split,
        image=_quantize(x),
        nuisance_seed=record.nuisance_seed,
    )


def make_dataset(
    num_identities: int = 40,
    samples_per_identity: int = 10,
    gap_strength: float = 0.7,
    seed: int = 0,
    *,
    image_hw: int = 32,
    latent_dim: int = 16,
    train_fraction: float = 0.5,
    transform: ModalityTransform | None = None,
) -> DatasetBundle:
    """Identity-disjoint train/eval dataset of paired source/target samples.

    The eval split designates source samples as the gallery and target
    samples as the probes.
    """
    if num_identities < 2 or samples_per_identity < 2:
        raise ValueError("need at least 2 identities and 2 samples per identity")
    n_train = int(round(num_identities * train_fraction))
    if n_train < 2 or num_identities - n_train < 2:
        raise ValueError(
            f"split needs >= 2 identities per side, got {n_train}/{num_identities - n_train}"
        )
    if transform is None:
        transform = ModalityTransform(strength=gap_strength)
    elif transform.strength != gap_strength:
        raise ValueError("transform.strength must equal gap_strength")

    identities = generate_identities(num_identities, latent_dim, hash64(seed, "identities"))
    order = np.random.default_rng(hash64(seed, "split")).permutation(num_identities)
    train_ids = set(int(i) for i in order[:n_train])

    train_records: list[SampleRecord] = []
    eval_records: list[SampleRecord] = []
    for ident in identities:
        split = "train" if ident.id in train_ids else "eval"
        out = train_records if split == "train" else eval_records
        for idx in range(samples_per_identity):
            src_seed = hash64(seed, ident.id, idx, "source")
            out.append(
                render_source(ident, src_seed, image_hw, image_hw, split, idx)
            )
            tgt_seed = hash64(seed, ident.id, idx, "target")
            base = render_source(
                ident, hash64(tgt_seed, "render"), image_hw, image_hw, split, idx
            )
            out.append(apply_modality(base, transform, hash64(tgt_seed, "transform")))

    meta = {
        "num_identities": num_identities,
        "samples_per_identity": samples_per_identity,
        "gap_strength": gap_strength,
        "seed": seed,
        "image_hw": image_hw,
        "latent_dim": latent_dim,
        "train_fraction": train_fraction,
    }
    return DatasetBundle(identities, transform, train_records, eval_records, meta)


# ---------------------------------------------------------------------------
# on-disk format: manifest.json + binary PGM (P5) / PPM (P6) images
# ---------------------------------------------------------------------------


def _write_pnm(path: Path, image: np.ndarray) -> None:
    arr = np.round(image * 255.0).astype(np.uint8)
    c, h, w = arr.shape
    with open(path, "wb") as fh:
        if c == 1:
            fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
            fh.write(arr[0].tobytes())
        elif c == 3:
            fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
            fh.write(arr.transpose(1, 2, 0).tobytes())
        else:
            raise ValueError(f"cannot write {c}-channel image")


def _read_pnm(path: Path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    parts = raw.split(maxsplit=4)
    if len(parts) < 5 or parts[0] not in (b"P5", b"P6"):
        raise DatasetFormatError(f"{path}: not a binary PGM/PPM file")
    magic, w, h, maxval, payload = parts
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise DatasetFormatError(f"{path}: unsupported maxval {maxval}")
    channels = 1 if magic == b"P5" else 3
    expected = w * h * channels
    if len(payload) < expected:
        raise DatasetFormatError(f"{path}: truncated pixel data")
    data = np.frombuffer(payload[:expected], dtype=np.uint8)
    if channels == 1:
        img = data.reshape(1, h, w)
    else:
        img = data.reshape(h, w, 3).transpose(2, 0, 1)
    return img.astype(np.float64) / 255.0


def _record_filename(rec: SampleRecord) -> str:
    ext = "pgm" if rec.image.shape[0] == 1 else "ppm"
    return f"{rec.split}/{rec.identity}_{rec.sample_index}_{rec.modality}.{ext}"


def save_dataset(bundle: DatasetBundle, path) -> None:
    root = Path(path)
    (root / "train").mkdir(parents=True, exist_ok=True)
    (root / "eval").mkdir(parents=True, exist_ok=True)

    record_entries = []
    for rec in bundle.train_records + bundle.eval_records:
        fname = _record_filename(rec)
        _write_pnm(root / fname, rec.image)
        record_entries.append(
            {
                "file": fname,
                "identity": rec.identity,
                "sample_index": rec.sample_index,
                "modality": rec.modality,
                "split": rec.split,
                "nuisance_seed": rec.nuisance_seed,
            }
        )
    manifest = {
        "meta": bundle.meta,
        "transform": bundle.transform.to_dict(),
        "identities": [
            {"id": ident.id, "latent": ident.latent.tolist()} for ident in bundle.identities
        ],
        "splits": {
            "train": sorted({r.identity for r in bundle.train_records}),
            "eval": sorted({r.identity for r in bundle.eval_records}),
        },
        "records": record_entries,
    }
    with open(root / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_dataset(path) -> DatasetBundle:
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise DatasetFormatError(f"missing manifest: {manifest_path}")
    with open(manifest_path) as fh:
        try:
            manifest = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DatasetFormatError(f"malformed manifest: {exc}") from exc

    on_disk = {p.relative_to(root).as_posix() for p in root.glob("*/*.p?m")}
    listed = {entry["file"] for entry in manifest["records"]}
    if on_disk != listed:
        raise DatasetFormatError(
            f"image files do not match manifest: {len(on_disk)} on disk, {len(listed)} listed"
        )

    identities = [
        Identity(id=int(e["id"]), latent=np.asarray(e["latent"], dtype=np.float64))
        for e in manifest["identities"]
    ]
    transform = ModalityTransform.from_dict(manifest["transform"])
    train_records: list[SampleRecord] = []
    eval_records: list[SampleRecord] = []
    for entry in manifest["records"]:
        rec = SampleRecord(
            identity=int(entry["identity"]),
            modality=entry["modality"],
            sample_index=int(entry["sample_index"]),
            split=entry["split"],
            image=_read_pnm(root / entry["file"]),
            nuisance_seed=int(entry["nuisance_seed"]),
        )
        (train_records if rec.split == "train" else eval_records).append(rec)
    return DatasetBundle(identities, transform, train_records, eval_records, manifest["meta"])
