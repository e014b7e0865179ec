"""Raw-recording preprocessing: Hampel denoising of CSI amplitude sequences,
packet-window resampling, and image patchification.

Everything here is a pure function on numpy arrays; tensors only appear in the
sample containers handed to the model.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor

MAD_SCALE = 1.4826  # consistency factor: MAD -> std under a normal model
SIGMA_MODES = ("mad", "sample_std")


@dataclass
class RawCsiWindow:
    """One capture window of amplitude packets, [n_packets, d_features]."""

    packets: np.ndarray
    sample_rate_hz: float
    duration_s: float

    def __post_init__(self):
        self.packets = np.asarray(self.packets)
        if self.packets.ndim != 2:
            raise ShapeError(f"packets must be [n_packets, d], got {self.packets.shape}")
        if (self.packets < 0).any():
            raise ValueError("amplitudes must be nonnegative")

    @property
    def n_packets(self) -> int:
        return self.packets.shape[0]


@dataclass
class CsiSample:
    """Denoised, downsampled amplitude sequence plus its crowd-count label."""

    sequence: Tensor  # [l_w, d_w]
    label: int

    def __post_init__(self):
        if self.label < 0:
            raise ValueError("crowd count label must be nonnegative")


@dataclass
class ImageSample:
    """An [h, w, c] image in [0, 1], its patch sequence, and the shared label."""

    image: Tensor
    patches: Tensor  # [l_v, d_v]
    label: int

    def __post_init__(self):
        if self.label < 0:
            raise ValueError("crowd count label must be nonnegative")


def hampel_filter(
    series,
    half_width: int = 5,
    n_sigmas: float = 3.0,
    sigma_mode: str = "mad",
) -> tuple[np.ndarray, np.ndarray]:
    """Sliding-window outlier rejection.

    For each index, the window is the (boundary-truncated) neighborhood of
    width <= 2*half_width + 1. A point deviating from the window median by more
    than ``n_sigmas`` times the scale estimate is replaced by that median.
    ``sigma_mode='mad'`` uses 1.4826 * median absolute deviation (robust,
    default); ``'sample_std'`` uses the in-window sample standard deviation.

    2-D input is filtered per feature column independently. Returns
    (filtered, outlier_mask) with the input's shape.
    """
    x = np.asarray(series, dtype=np.float64)
    if half_width < 1:
        raise ValueError(f"half_width must be >= 1, got {half_width}")
    if n_sigmas <= 0:
        raise ValueError("n_sigmas must be positive")
    if sigma_mode not in SIGMA_MODES:
        raise ValueError(f"sigma_mode must be one of {SIGMA_MODES}")
    if x.size == 0:
        raise ValueError("empty input")
    if x.ndim == 2:
        filtered = np.empty_like(x)
        mask = np.zeros(x.shape, dtype=bool)
        for col in range(x.shape[1]):
            filtered[:, col], mask[:, col] = hampel_filter(x[:, col], half_width, n_sigmas, sigma_mode)
        return filtered, mask
    if x.ndim != 1:
        raise ShapeError(f"hampel_filter expects a 1-D or 2-D array, got shape {x.shape}")

    n = x.size
    k = half_width
    filtered = x.copy()
    mask = np.zeros(n, dtype=bool)

    if n > 2 * k:
        # interior: full-width windows, vectorized
        windows = np.lib.stride_tricks.sliding_window_view(x, 2 * k + 1)  # [n-2k, 2k+1]
        med = np.median(windows, axis=1)
        if sigma_mode == "mad":
            sigma = MAD_SCALE * np.median(np.abs(windows - med[:, None]), axis=1)
        else:
            sigma = windows.std(axis=1, ddof=1)
        center = x[k : n - k]
        hit = np.abs(center - med) > n_sigmas * sigma
        filtered[k : n - k] = np.where(hit, med, center)
        mask[k : n - k] = hit
        edges = list(range(k)) + list(range(n - k, n))
    else:
        edges = list(range(n))

    for i in edges:
        window = x[max(0, i - k) : min(n, i + k + 1)]
        med = float(np.median(window))
        if sigma_mode == "mad":
            sigma = MAD_SCALE * float(np.median(np.abs(window - med)))
        else:
            sigma = float(window.std(ddof=1)) if window.size > 1 else 0.0
        if abs(x[i] - med) > n_sigmas * sigma:
            filtered[i] = med
            mask[i] = True
    return filtered, mask


def resample_window(raw: RawCsiWindow, target_len: int, method: str = "mean_pool") -> np.ndarray:
    """Shorten a packet window to ``target_len`` rows.

    'stride' keeps every floor(n/target_len)-th packet; 'mean_pool' averages
    disjoint bins whose boundaries are floor(i*n/target_len).
    """
    n = raw.n_packets
    if target_len > n:
        raise ValueError(f"target_len {target_len} exceeds packet count {n}")
    if target_len < 1:
        raise ValueError("target_len must be >= 1")
    if method == "stride":
        step = n // target_len
        idx = np.arange(target_len) * step
        return raw.packets[idx].copy()
    if method == "mean_pool":
        bounds = (np.arange(target_len + 1) * n) // target_len
        return np.stack(
            [raw.packets[bounds[i] : bounds[i + 1]].mean(axis=0) for i in range(target_len)]
        )
    raise ValueError(f"unknown resample method {method!r}")


def patchify(image, p: int) -> np.ndarray:
    """Split an [h, w, c] image into p x p patches, flattened row-major.

    Patches are ordered row-major over the patch grid; inside a patch, pixels
    are row-major with the channel index varying fastest. Output is
    [h*w/p^2, p*p*c].
    """
    img = np.asarray(image)
    if img.ndim != 3:
        raise ShapeError(f"image must be [h, w, c], got shape {img.shape}")
    h, w, c = img.shape
    if p < 1 or h % p != 0 or w % p != 0:
        raise ShapeError(f"patch size {p} must divide image dims {h}x{w}")
    grid = img.reshape(h // p, p, w // p, p, c)
    return grid.transpose(0, 2, 1, 3, 4).reshape((h * w) // (p * p), p * p * c).copy()


def unpatchify(patches, h: int, w: int, c: int, p: int) -> np.ndarray:
    """Exact inverse of :func:`patchify`."""
    pat = np.asarray(patches)
    if pat.ndim != 2:
        raise ShapeError(f"patches must be 2-D, got shape {pat.shape}")
    if h % p != 0 or w % p != 0:
        raise ShapeError(f"patch size {p} must divide image dims {h}x{w}")
    l_v, d_v = (h * w) // (p * p), p * p * c
    if pat.shape != (l_v, d_v):
        raise ShapeError(f"expected patches of shape {(l_v, d_v)}, got {pat.shape}")
    grid = pat.reshape(h // p, w // p, p, p, c)
    return grid.transpose(0, 2, 1, 3, 4).reshape(h, w, c).copy()
