"""Beat segment -> STFT spectrogram -> normalized image tensor."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import DataError, FileWriteError, ShapeError

DEFAULT_WINDOW_LEN = 512
DEFAULT_HOP = 32
DB_FLOOR = -80.0
DB_EPS = 1e-10


def make_window(kind: str, n: int) -> np.ndarray:
    """Symmetric Hann or Hamming window of length n."""
    if n < 2:
        raise ShapeError(f"window length must be >= 2, got {n}")
    k = np.arange(n)
    if kind == "hann":
        return 0.5 * (1.0 - np.cos(2.0 * np.pi * k / (n - 1)))
    if kind == "hamming":
        return 0.54 - 0.46 * np.cos(2.0 * np.pi * k / (n - 1))
    raise ValueError(f"unknown window kind {kind!r}")


def stft(x: np.ndarray, window: np.ndarray, hop: int, full_spectrum: bool = False) -> np.ndarray:
    """Short-time Fourier transform of a (possibly short) segment.

    The signal is zero-padded to at least ``len(window) + 4 * hop`` so
    short beat segments still yield several frames. Returns a complex
    matrix [bins x frames]; bins 0..n/2 unless ``full_spectrum``.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise DataError("cannot transform an empty signal")
    if hop < 1:
        raise ValueError("hop must be >= 1")
    window = np.asarray(window, dtype=np.float64)
    n = len(window)
    padded_len = max(len(x), n + 4 * hop)
    padded = np.zeros(padded_len)
    padded[: len(x)] = x

    n_frames = (padded_len - n) // hop + 1
    starts = np.arange(n_frames) * hop
    frames = padded[starts[:, None] + np.arange(n)[None, :]] * window
    if full_spectrum:
        return np.fft.fft(frames, axis=1).T
    return np.fft.rfft(frames, axis=1).T


@dataclass
class Spectrogram:
    """Log-magnitude STFT with the metadata needed to reproduce it."""

    values: np.ndarray  # [freq_bins x time_frames], dB
    window_len: int
    hop: int
    fs: float
    window_kind: str


def log_magnitude(
    frames: np.ndarray,
    window_len: int = DEFAULT_WINDOW_LEN,
    hop: int = DEFAULT_HOP,
    fs: float = 360.0,
    window_kind: str = "hann",
) -> Spectrogram:
    """20*log10(|X| + eps) clamped below at the -80 dB floor."""
    db = 20.0 * np.log10(np.abs(frames) + DB_EPS)
    np.maximum(db, DB_FLOOR, out=db)
    return Spectrogram(db, window_len, hop, fs, window_kind)


def _bilinear_resize(m: np.ndarray, h: int, w: int) -> np.ndarray:
    """Align-corners bilinear resize (identity when shapes match)."""
    src_h, src_w = m.shape
    ys = np.linspace(0, src_h - 1, h) if src_h > 1 else np.zeros(h)
    xs = np.linspace(0, src_w - 1, w) if src_w > 1 else np.zeros(w)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, src_h - 1)
    x1 = np.minimum(x0 + 1, src_w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    top = m[y0][:, x0] * (1 - fx) + m[y0][:, x1] * fx
    bot = m[y1][:, x0] * (1 - fx) + m[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def to_image(spec: Spectrogram, height: int, width: int, channels: int = 1) -> np.ndarray:
    """Resize the dB matrix and min-max normalize to a [C x H x W] tensor
    in [0, 1]. A constant spectrogram maps to all zeros."""
    if height < 8 or width < 8:
        raise ShapeError("image size must be at least 8x8")
    values = np.asarray(spec.values, dtype=np.float64)
    if values.ndim != 2 or values.shape[1] == 0:
        raise ShapeError("spectrogram has no frames")
    resized = _bilinear_resize(values, height, width)
    lo, hi = resized.min(), resized.max()
    norm = np.zeros_like(resized) if hi == lo else (resized - lo) / (hi - lo)
    return np.repeat(norm[None, :, :], channels, axis=0).astype(np.float32)


def export_png(data, path) -> None:
    """Write an 8-bit grayscale PNG, frequency bin 0 at the bottom row.

    Accepts a Spectrogram (normalized on the fly) or an image tensor
    already in [0, 1] ([H x W] or [C x H x W], first channel used).
    """
    if isinstance(data, Spectrogram):
        values = np.asarray(data.values, dtype=np.float64)
        lo, hi = values.min(), values.max()
        norm = np.zeros_like(values) if hi == lo else (values - lo) / (hi - lo)
    else:
        norm = np.asarray(data, dtype=np.float64)
        if norm.ndim == 3:
            norm = norm[0]
        if norm.ndim != 2:
            raise ShapeError("expected a 2-D image or [C x H x W] tensor")
    pixels = np.round(255.0 * np.flipud(norm)).astype(np.uint8)
    try:
        Image.fromarray(pixels, mode="L").save(str(path), format="PNG")
    except OSError as exc:
        raise FileWriteError(f"cannot write {path}: {exc}") from exc


def segment_to_image(
    samples: np.ndarray,
    fs: float,
    window_kind: str = "hann",
    window_len: int = DEFAULT_WINDOW_LEN,
    hop: int = DEFAULT_HOP,
    height: int = 96,
    width: int = 96,
    channels: int = 1,
) -> np.ndarray:
    """Convenience path: beat samples -> STFT -> dB -> image tensor."""
    window = make_window(window_kind, window_len)
    frames = stft(samples, window, hop)
    spec = log_magnitude(frames, window_len, hop, fs, window_kind)
    return to_image(spec, height, width, channels)


@dataclass(frozen=True)
class Fingerprint:
    """Preprocessing identity carried by datasets and checkpoints."""

    fs: float = 360.0
    window_kind: str = "hann"
    window_len: int = DEFAULT_WINDOW_LEN
    hop: int = DEFAULT_HOP
    image_height: int = 96
    image_width: int = 96
    channels: int = 1
    normalization: str = "per-image-minmax"

    def to_dict(self) -> dict:
        return {
            "fs": self.fs,
            "window_kind": self.window_kind,
            "window_len": self.window_len,
            "hop": self.hop,
            "image_height": self.image_height,
            "image_width": self.image_width,
            "channels": self.channels,
            "normalization": self.normalization,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Fingerprint":
        return cls(**d)
