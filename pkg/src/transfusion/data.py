"""Synthetic multimodal dataset generation, persistence, splitting, batching.

The generator stands in for a private meeting-room corpus: each sample is a
(CSI window, room image) pair sharing one crowd-count label. Count information
is deliberately present in both modalities so that fusion beats either stream
alone. Not a physical channel model.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass

import numpy as np

from .preprocess import CsiSample, ImageSample, RawCsiWindow, hampel_filter, patchify, resample_window
from .tensor import Tensor, VersionError, load_tensor, save_tensor

FORMAT_VERSION = 1
SPLIT_NAMES = ("train", "val", "test")

IMAGE_BACKGROUND = 0.2
BLOB_AMPLITUDE = 0.45


class DataError(Exception):
    """Dataset directory is missing files or internally inconsistent."""


@dataclass
class SyntheticSpec:
    n_counts: int = 44  # labels run 0..n_counts inclusive
    samples_per_count: int = 100
    l_w: int = 100
    d_w: int = 30
    h: int = 64
    w: int = 64
    c: int = 1
    p: int = 16
    noise_std: float = 0.05
    seed: int = 0
    sample_rate_hz: float = 500.0
    duration_s: float = 4.0
    denoise: bool = True
    placement_spread: float = 1.0  # <1 clusters people centrally; overlaps clip and occlude
    visibility_p: float = 1.0  # camera coverage: P(person appears in frame); WiFi senses everyone

    def __post_init__(self):
        if min(self.n_counts, self.samples_per_count, self.l_w, self.d_w, self.h, self.w, self.c, self.p) < 1:
            raise ValueError("all spec dims must be positive")
        if self.h % self.p != 0 or self.w % self.p != 0:
            raise ValueError(f"patch size {self.p} must divide image dims {self.h}x{self.w}")
        if self.noise_std < 0:
            raise ValueError("noise_std must be nonnegative")
        if not (0.0 < self.placement_spread <= 1.0):
            raise ValueError("placement_spread must lie in (0, 1]")
        if not (0.0 < self.visibility_p <= 1.0):
            raise ValueError("visibility_p must lie in (0, 1]")
        if self.n_packets < self.l_w:
            raise ValueError(f"raw window ({self.n_packets} packets) shorter than l_w={self.l_w}")

    @property
    def n_packets(self) -> int:
        return round(self.sample_rate_hz * self.duration_s)

    @property
    def l_v(self) -> int:
        return (self.h * self.w) // (self.p * self.p)

    @property
    def d_v(self) -> int:
        return self.p * self.p * self.c

    @property
    def n_samples(self) -> int:
        return (self.n_counts + 1) * self.samples_per_count

    def dataset_id(self) -> str:
        text = json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:16]


@dataclass
class Sample:
    csi: CsiSample
    image: ImageSample

    def __post_init__(self):
        if self.csi.label != self.image.label:
            raise DataError(f"modality labels disagree: {self.csi.label} vs {self.image.label}")

    @property
    def label(self) -> int:
        return self.csi.label


@dataclass
class Dataset:
    spec: SyntheticSpec
    samples: list[Sample]
    splits: dict[str, list[int]] | None = None
    csi_mean: np.ndarray | None = None  # per-feature, train split only
    csi_std: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.samples)

    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.float64)


@dataclass
class Subset:
    dataset: Dataset
    indices: list[int]
    name: str = ""

    def __len__(self) -> int:
        return len(self.indices)

    def labels(self) -> np.ndarray:
        return np.array([self.dataset.samples[i].label for i in self.indices], dtype=np.float64)


def _csi_window(rng: np.random.Generator, spec: SyntheticSpec, carriers, n: int) -> np.ndarray:
    dc, amp, freq, phase = carriers
    t = np.arange(spec.n_packets) / spec.sample_rate_hz
    raw = dc[None, :] + amp[None, :] * np.sin(2 * np.pi * freq[None, :] * t[:, None] + phase[None, :])
    for j in range(1, n + 1):
        # one multipath component per person, amplitude decaying in j; frequencies
        # low enough to survive mean-pooling to l_w steps; coupling normalized so
        # each person injects a deterministic amount of energy
        a_j = 0.5 / j**0.15
        nu = rng.uniform(0.3, 2.5)
        phi = rng.uniform(0.0, 2 * np.pi)
        coupling = rng.normal(0.0, 1.0, size=spec.d_w)
        coupling *= np.sqrt(spec.d_w) / np.linalg.norm(coupling)
        raw += a_j * np.sin(2 * np.pi * nu * t + phi)[:, None] * coupling[None, :]
    if spec.noise_std > 0:
        raw += rng.normal(0.0, spec.noise_std, size=raw.shape)
    return np.abs(raw)


def _image(rng: np.random.Generator, spec: SyntheticSpec, n: int) -> np.ndarray:
    img = np.full((spec.h, spec.w, spec.c), IMAGE_BACKGROUND, dtype=np.float64)
    sigma = spec.p / 4.0
    margin = int(np.ceil(3 * sigma))
    half_y = (spec.h - 2 * margin) * spec.placement_spread / 2.0
    half_x = (spec.w - 2 * margin) * spec.placement_spread / 2.0
    lo_y, hi_y = spec.h / 2.0 - half_y, spec.h / 2.0 + half_y
    lo_x, hi_x = spec.w / 2.0 - half_x, spec.w / 2.0 + half_x
    ys, xs = np.mgrid[0 : spec.h, 0 : spec.w]
    centers: list[tuple[float, float]] = []
    for _ in range(n):
        best = None
        best_dist = -1.0
        for _try in range(8):
            cy = rng.uniform(lo_y, hi_y)
            cx = rng.uniform(lo_x, hi_x)
            dist = min(((cy - oy) ** 2 + (cx - ox) ** 2) ** 0.5 for oy, ox in centers) if centers else np.inf
            if dist >= 2 * sigma:  # prefer non-overlapping placements
                best = (cy, cx)
                break
            if dist > best_dist:
                best, best_dist = (cy, cx), dist
        centers.append(best)
        if spec.visibility_p < 1.0 and rng.uniform() > spec.visibility_p:
            continue  # person outside the camera's effective view
        blob = BLOB_AMPLITUDE * np.exp(-((ys - best[0]) ** 2 + (xs - best[1]) ** 2) / (2 * sigma**2))
        img += blob[:, :, None]
    if spec.noise_std > 0:
        img += rng.normal(0.0, spec.noise_std, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def generate(spec: SyntheticSpec) -> Dataset:
    """Deterministically synthesize the paired dataset from spec.seed."""
    rng = np.random.default_rng(spec.seed)
    carriers = (
        rng.uniform(1.0, 1.5, size=spec.d_w),  # per-feature DC level
        rng.uniform(0.8, 1.2, size=spec.d_w),  # carrier amplitude
        rng.uniform(0.2, 2.0, size=spec.d_w),  # carrier frequency, Hz
        rng.uniform(0.0, 2 * np.pi, size=spec.d_w),  # carrier phase
    )
    samples: list[Sample] = []
    for n in range(spec.n_counts + 1):
        for _rep in range(spec.samples_per_count):
            raw = _csi_window(rng, spec, carriers, n)
            if spec.denoise:
                raw, _ = hampel_filter(raw, half_width=5, n_sigmas=3.0, sigma_mode="mad")
            window = RawCsiWindow(raw, spec.sample_rate_hz, spec.duration_s)
            seq = resample_window(window, spec.l_w, method="mean_pool")
            img = _image(rng, spec, n)
            samples.append(
                Sample(
                    csi=CsiSample(sequence=Tensor(seq), label=n),
                    image=ImageSample(image=Tensor(img), patches=Tensor(patchify(img, spec.p)), label=n),
                )
            )
    return Dataset(spec=spec, samples=samples)


def split(ds: Dataset, ratios: tuple[int, int, int] = (8, 1, 1), seed: int = 0) -> tuple[Subset, Subset, Subset]:
    """Seeded shuffle then contiguous cut into train/val/test.

    Sizes are floor(r_train * m), floor(r_val * m), remainder. Per-feature CSI
    standardization statistics are computed on the train split only and stored
    on the dataset for batch-time application everywhere.
    """
    if len(ds) == 0:
        raise DataError("cannot split an empty dataset")
    if any(r <= 0 for r in ratios):
        raise ValueError("ratios must be positive")
    m = len(ds)
    total = sum(ratios)
    perm = np.random.default_rng(seed).permutation(m)
    n_train = int(m * ratios[0] / total)
    n_val = int(m * ratios[1] / total)
    idx_train = [int(i) for i in perm[:n_train]]
    idx_val = [int(i) for i in perm[n_train : n_train + n_val]]
    idx_test = [int(i) for i in perm[n_train + n_val :]]
    ds.splits = {"train": idx_train, "val": idx_val, "test": idx_test}
    stack = np.concatenate([ds.samples[i].csi.sequence.data for i in idx_train], axis=0)
    ds.csi_mean = stack.mean(axis=0)
    ds.csi_std = np.maximum(stack.std(axis=0), 1e-8)
    return (
        Subset(ds, idx_train, "train"),
        Subset(ds, idx_val, "val"),
        Subset(ds, idx_test, "test"),
    )


def subset_all(ds: Dataset, name: str = "all", standardize_here: bool = True) -> Subset:
    """Treat the whole dataset as one subset (overfit experiments)."""
    if standardize_here and ds.csi_mean is None:
        stack = np.concatenate([s.csi.sequence.data for s in ds.samples], axis=0)
        ds.csi_mean = stack.mean(axis=0)
        ds.csi_std = np.maximum(stack.std(axis=0), 1e-8)
    return Subset(ds, list(range(len(ds))), name)


def batches(subset: Subset, batch_size: int, shuffle_seed: int | None = None, epoch: int = 0):
    """Yield (x_w [B,l_w,d_w], x_v [B,l_v,d_v], y [B]) covering the subset once.

    The final partial batch is emitted. Per-epoch order derives from
    (shuffle_seed, epoch); pass shuffle_seed=None for subset order. CSI is
    standardized with the dataset's train-split statistics when present.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    ds = subset.dataset
    order = list(subset.indices)
    if shuffle_seed is not None:
        rng = np.random.default_rng(np.random.SeedSequence((int(shuffle_seed), int(epoch))))
        order = [order[i] for i in rng.permutation(len(order))]
    for start in range(0, len(order), batch_size):
        chunk = order[start : start + batch_size]
        xw = np.stack([ds.samples[i].csi.sequence.data for i in chunk])
        if ds.csi_mean is not None:
            xw = (xw - ds.csi_mean) / ds.csi_std
        xv = np.stack([ds.samples[i].image.patches.data for i in chunk])
        y = np.array([ds.samples[i].label for i in chunk], dtype=xw.dtype)
        yield xw, xv, y


# ---------------------------------------------------------------------------
# persistence: manifest.json + csi/<id>.tftn + img/<id>.tftn


def save(ds: Dataset, directory) -> None:
    os.makedirs(directory, exist_ok=True)
    os.makedirs(os.path.join(directory, "csi"), exist_ok=True)
    os.makedirs(os.path.join(directory, "img"), exist_ok=True)
    ids = [f"{i:06d}" for i in range(len(ds))]
    manifest = {
        "format_version": FORMAT_VERSION,
        "dataset_id": ds.spec.dataset_id(),
        "spec": asdict(ds.spec),
        "ids": ids,
        "labels": {sid: ds.samples[i].label for i, sid in enumerate(ids)},
        "splits": ds.splits,
        "csi_standardization": (
            None
            if ds.csi_mean is None
            else {"mean": ds.csi_mean.tolist(), "std": ds.csi_std.tolist()}
        ),
    }
    for i, sid in enumerate(ids):
        save_tensor(ds.samples[i].csi.sequence, os.path.join(directory, "csi", f"{sid}.tftn"))
        save_tensor(ds.samples[i].image.image, os.path.join(directory, "img", f"{sid}.tftn"))
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)


def load(directory) -> Dataset:
    manifest_path = os.path.join(directory, "manifest.json")
    if not os.path.exists(manifest_path):
        raise DataError(f"missing manifest.json in {directory}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise VersionError(f"unknown dataset format version {version}")
    spec = SyntheticSpec(**manifest["spec"])
    samples: list[Sample] = []
    for sid in manifest["ids"]:
        label = int(manifest["labels"][sid])
        csi_path = os.path.join(directory, "csi", f"{sid}.tftn")
        img_path = os.path.join(directory, "img", f"{sid}.tftn")
        for path in (csi_path, img_path):
            if not os.path.exists(path):
                raise DataError(f"missing tensor file {path}")
        seq = load_tensor(csi_path)
        img = load_tensor(img_path)
        samples.append(
            Sample(
                csi=CsiSample(sequence=seq, label=label),
                image=ImageSample(image=img, patches=Tensor(patchify(img.data, spec.p)), label=label),
            )
        )
    ds = Dataset(spec=spec, samples=samples, splits=manifest.get("splits"))
    stats = manifest.get("csi_standardization")
    if stats is not None:
        ds.csi_mean = np.asarray(stats["mean"], dtype=np.float64)
        ds.csi_std = np.asarray(stats["std"], dtype=np.float64)
    return ds


def subsets_from_manifest(ds: Dataset) -> tuple[Subset, Subset, Subset]:
    if not ds.splits:
        raise DataError("dataset has no recorded split; run split() first")
    return tuple(Subset(ds, ds.splits[name], name) for name in SPLIT_NAMES)
