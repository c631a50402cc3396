"""ECG conditioning: Chebyshev filtering, Shannon-energy R-peak
detection, 1.2-RR beat segmentation and sample-rate conversion."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import signal as sps
from scipy.ndimage import maximum_filter1d, uniform_filter1d

from .errors import DesignError, NumericError
from .wfdb_ingest import AamiClass

# Detector parameters (see design notes): QRS emphasis band, envelope
# smoothing, adaptive threshold and refractory period.
QRS_BAND_HZ = (5.0, 15.0)
QRS_RIPPLE_DB = 1.0
BASELINE_CUTOFF_HZ = 0.5
BASELINE_RIPPLE_DB = 0.01  # tiny ripple keeps in-band amplitudes intact
ENVELOPE_SMOOTH_S = 0.15
THRESHOLD_FRACTION = 0.3
THRESHOLD_WINDOW_S = 2.0
REFRACTORY_S = 0.2
REFINE_HALF_WINDOW_S = 0.025


@dataclass(frozen=True)
class FilterSpec:
    """Chebyshev type I design request."""

    kind: str  # "highpass" or "bandpass"
    order: int
    passband_ripple_db: float
    cutoff_hz: tuple[float, ...]
    fs: float

    def __post_init__(self):
        if self.kind not in ("highpass", "bandpass"):
            raise DesignError(f"unknown filter kind {self.kind!r}")
        if self.order < 1:
            raise DesignError("order must be >= 1")
        if self.passband_ripple_db <= 0:
            raise DesignError("passband ripple must be positive")
        nyq = self.fs / 2.0
        if any(not 0 < c < nyq for c in self.cutoff_hz):
            raise DesignError(
                f"cutoffs {self.cutoff_hz} must lie inside (0, {nyq}) Hz"
            )


@dataclass
class BeatSegment:
    """One beat cut to 1.2x its local RR interval, in millivolts."""

    source_id: str
    r_index: int
    samples: np.ndarray
    rr_s: float
    label: AamiClass | int | None = None


def design_chebyshev1(spec: FilterSpec) -> np.ndarray:
    """Design a Chebyshev type I filter as second-order sections."""
    cutoff = spec.cutoff_hz
    # pass a plain float for one-sided filters (scipy deprecates 0-d arrays)
    if np.ndim(cutoff) == 0 or (np.ndim(cutoff) == 1 and len(np.atleast_1d(cutoff)) == 1):
        cutoff = float(np.atleast_1d(cutoff)[0])
    else:
        cutoff = [float(c) for c in cutoff]
    sos = sps.cheby1(
        spec.order,
        spec.passband_ripple_db,
        cutoff,
        btype=spec.kind,
        fs=spec.fs,
        output="sos",
    )
    # cheby1 guarantees stability for valid specs; verify anyway.
    _, poles, _ = sps.sos2zpk(sos)
    if np.any(np.abs(poles) >= 1.0):
        raise DesignError("designed filter has poles on or outside the unit circle")
    return sos


def apply_filter(sections: np.ndarray, x: np.ndarray, zero_phase: bool = False) -> np.ndarray:
    """Run a second-order-section cascade over a signal.

    ``zero_phase`` applies the cascade forward and backward (filtfilt),
    doubling the attenuation and cancelling phase distortion.
    """
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise NumericError("input signal contains non-finite samples")
    if zero_phase:
        return sps.sosfiltfilt(sections, x)
    return sps.sosfilt(sections, x)


def remove_baseline(x: np.ndarray, fs: float) -> np.ndarray:
    """Suppress DC and baseline wander with a zero-phase 0.5 Hz high-pass."""
    spec = FilterSpec("highpass", 4, BASELINE_RIPPLE_DB, (BASELINE_CUTOFF_HZ,), fs)
    return apply_filter(design_chebyshev1(spec), x, zero_phase=True)


def shannon_energy(x: np.ndarray, fs: float | None = None) -> np.ndarray:
    """Shannon energy envelope: -d^2 * ln(d^2) of the normalized first
    difference, optionally smoothed by a 0.15 s moving average."""
    x = np.asarray(x, dtype=np.float64)
    peak = np.max(np.abs(x)) if x.size else 0.0
    if peak == 0.0:
        return np.zeros_like(x)
    d = np.diff(x / peak, prepend=x[0] / peak)
    dmax = np.max(np.abs(d))
    if dmax == 0.0:
        return np.zeros_like(x)
    d /= dmax  # |d| <= 1 keeps -d^2 ln(d^2) nonnegative
    d2 = d * d
    env = np.zeros_like(d2)
    nz = d2 > 0
    env[nz] = -d2[nz] * np.log(d2[nz])
    if fs is not None:
        width = max(1, int(round(ENVELOPE_SMOOTH_S * fs)))
        env = uniform_filter1d(env, size=width, mode="nearest")
    return env


def detect_r_peaks(x: np.ndarray, fs: float) -> np.ndarray:
    """Locate R peaks: QRS bandpass -> Shannon envelope -> adaptive
    threshold with a 200 ms refractory period -> refine to the local
    extremum of the baseline-removed signal."""
    x = np.asarray(x, dtype=np.float64)
    if fs <= 0:
        raise DesignError("sampling rate must be positive")
    if len(x) < fs:
        return np.array([], dtype=np.int64)

    band = FilterSpec("bandpass", 4, QRS_RIPPLE_DB, QRS_BAND_HZ, fs)
    qrs = apply_filter(design_chebyshev1(band), x, zero_phase=True)
    env = shannon_energy(qrs, fs)
    if not np.any(env > 0):
        return np.array([], dtype=np.int64)

    win = max(1, int(round(THRESHOLD_WINDOW_S * fs)))
    threshold = THRESHOLD_FRACTION * maximum_filter1d(env, size=win, mode="nearest")
    refractory = max(1, int(round(REFRACTORY_S * fs)))
    peaks, _ = sps.find_peaks(env, height=threshold, distance=refractory)

    # Refine each envelope peak to the dominant deflection of the cleaned signal.
    clean = remove_baseline(x, fs)
    half = int(round(REFINE_HALF_WINDOW_S * fs))
    refined = []
    for p in peaks:
        lo, hi = max(0, p - half), min(len(clean), p + half + 1)
        refined.append(lo + int(np.argmax(np.abs(clean[lo:hi]))))
    refined = np.array(sorted(set(refined)), dtype=np.int64)
    # Refinement can pull neighbours together; re-apply the refractory gap.
    if len(refined) > 1:
        keep = [refined[0]]
        for r in refined[1:]:
            if r - keep[-1] >= refractory:
                keep.append(r)
        refined = np.array(keep, dtype=np.int64)
    return refined


def segment_beats(
    x: np.ndarray,
    r_peaks: np.ndarray,
    fs: float,
    source_id: str = "",
    labels=None,
) -> list[BeatSegment]:
    """Cut beats to [r - 0.2*RR, r + 1.0*RR) using the forward RR interval.

    The last peak (no forward neighbour) and windows that would fall
    outside the signal are dropped.
    """
    x = np.asarray(x, dtype=np.float64)
    r_peaks = np.asarray(r_peaks, dtype=np.int64)
    segments: list[BeatSegment] = []
    for i in range(len(r_peaks) - 1):
        r = int(r_peaks[i])
        rr = int(r_peaks[i + 1]) - r
        if rr <= 0:
            raise ValueError("r_peaks must be strictly increasing")
        length = int(round(1.2 * rr))
        start = r - int(round(0.2 * rr))
        end = start + length
        if start < 0 or end > len(x):
            continue
        segments.append(
            BeatSegment(
                source_id=source_id,
                r_index=r,
                samples=x[start:end].copy(),
                rr_s=rr / fs,
                label=None if labels is None else labels[i],
            )
        )
    return segments


def resample_to(x: np.ndarray, fs_in: float, fs_out: float, half_taps: int = 32) -> np.ndarray:
    """Kaiser-windowed sinc resampling to round(n * fs_out / fs_in) samples."""
    if fs_in <= 0 or fs_out <= 0:
        raise DesignError("sampling rates must be positive")
    x = np.asarray(x, dtype=np.float64)
    if fs_in == fs_out:
        return x.copy()
    n_in = len(x)
    n_out = int(round(n_in * fs_out / fs_in))
    if n_in == 0 or n_out == 0:
        return np.zeros(n_out)

    ratio = fs_out / fs_in
    cutoff = min(1.0, ratio)  # anti-alias when downsampling
    t = np.arange(n_out) / ratio  # output positions in input-sample units
    base = np.floor(t).astype(np.int64)
    offsets = np.arange(-half_taps + 1, half_taps + 1)
    idx = base[:, None] + offsets[None, :]
    frac = t[:, None] - idx
    kernel = cutoff * np.sinc(cutoff * frac)
    # Kaiser window (beta 8.6) evaluated at the fractional tap offsets.
    beta = 8.6
    r = np.clip(frac / half_taps, -1.0, 1.0)
    kernel *= np.i0(beta * np.sqrt(1.0 - r * r)) / np.i0(beta)
    kernel[np.abs(frac) > half_taps] = 0.0
    idx = np.clip(idx, 0, n_in - 1)
    return np.einsum("ij,ij->i", kernel, x[idx])
