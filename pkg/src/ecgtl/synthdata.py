"""Synthetic ECG generation.

Sum-of-Gaussians beat templates at jittered RR spacing, with known
ground-truth R indices. Also builds a surrogate CRT cohort (the clinical
cohort is private) and, for end-to-end exercises of the ingest path,
synthetic records written in WFDB format 212 with MIT annotation files.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensorio
from .errors import DataError, FileWriteError
from .wfdb_ingest import encode_format212

# (amplitude mV, width s, offset s from the R peak)
DEFAULT_WAVES = {
    "P": (0.15, 0.025, -0.20),
    "Q": (-0.10, 0.010, -0.04),
    "R": (1.00, 0.012, 0.00),
    "S": (-0.25, 0.012, 0.04),
    "T": (0.30, 0.060, 0.28),
}


@dataclass(frozen=True)
class SynthParams:
    fs: float = 360.0
    duration_s: float = 10.0
    heart_rate_bpm: float = 60.0
    rr_jitter_pct: float = 0.0
    waves: dict = field(default_factory=lambda: dict(DEFAULT_WAVES))
    noise_mv: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.fs <= 0 or self.duration_s <= 0 or self.heart_rate_bpm <= 0:
            raise DataError("fs, duration and heart rate must be positive")
        if any(w[1] <= 0 for w in self.waves.values()):
            raise DataError("wave widths must be positive")


def beat_template(t: np.ndarray, waves: dict) -> np.ndarray:
    """Evaluate the sum-of-Gaussians template at times t (s, R at 0)."""
    out = np.zeros_like(t)
    for amp, width, offset in waves.values():
        out += amp * np.exp(-0.5 * ((t - offset) / width) ** 2)
    return out


def synth_ecg(params: SynthParams, beat_waves=None) -> tuple[np.ndarray, np.ndarray]:
    """Generate a signal and its ground-truth R sample indices.

    ``beat_waves`` optionally supplies a wave dict per beat (cycled),
    letting callers vary morphology beat by beat.
    """
    rng = np.random.default_rng(params.seed)
    fs = params.fs
    base_rr = 60.0 / params.heart_rate_bpm
    tail = 0.45 * base_rr + 0.25  # template support past the last R

    r_times = []
    t = 0.3 * base_rr
    while t <= params.duration_s - tail:
        r_times.append(t)
        rr = base_rr
        if params.rr_jitter_pct > 0:
            rr *= 1.0 + (params.rr_jitter_pct / 100.0) * rng.uniform(-1.0, 1.0)
        t += rr
    r_indices = np.round(np.array(r_times) * fs).astype(np.int64)

    n = int(round(params.duration_s * fs))
    time = np.arange(n) / fs
    signal = np.zeros(n)
    for i, r_idx in enumerate(r_indices):
        waves = params.waves
        if beat_waves is not None:
            waves = beat_waves[i % len(beat_waves)]
        r_t = r_idx / fs
        lo = max(0, int((r_t - 0.5) * fs))
        hi = min(n, int((r_t + 0.6) * fs))
        signal[lo:hi] += beat_template(time[lo:hi] - r_t, waves)
    if params.noise_mv > 0:
        signal += rng.normal(0.0, params.noise_mv, size=n)
    return signal, r_indices


def _scale_widths(waves: dict, factor: float, keys=("Q", "R", "S")) -> dict:
    out = dict(waves)
    for k in keys:
        amp, width, offset = out[k]
        out[k] = (amp, width * factor, offset)
    return out


# Distinct morphologies for the five AAMI classes, used by the surrogate
# pretraining corpus.
AAMI_WAVE_SETS = {
    "N": dict(DEFAULT_WAVES),
    "S": {
        "P": (0.05, 0.02, -0.12),
        "Q": (-0.08, 0.008, -0.03),
        "R": (0.70, 0.009, 0.00),
        "S": (-0.20, 0.009, 0.03),
        "T": (0.20, 0.045, 0.22),
    },
    "V": {
        "Q": (-0.35, 0.030, -0.06),
        "R": (1.25, 0.045, 0.00),
        "S": (-0.70, 0.050, 0.09),
        "T": (-0.40, 0.080, 0.32),
    },
    "F": {
        "P": (0.10, 0.025, -0.18),
        "Q": (-0.15, 0.018, -0.05),
        "R": (0.85, 0.028, 0.00),
        "S": (-0.35, 0.026, 0.05),
        "T": (0.15, 0.070, 0.30),
    },
    "Q": {
        "P": (-0.20, 0.030, -0.10),
        "R": (0.90, 0.060, 0.00),
        "S": (-0.50, 0.040, 0.10),
        "T": (0.35, 0.090, 0.35),
    },
}

AAMI_TO_MIT_SYMBOL = {"N": "N", "S": "A", "V": "V", "F": "F", "Q": "/"}


@dataclass
class CohortEntry:
    patient_id: str
    label: str  # "responder" or "non_responder"
    leads: list[str]
    fs: float
    covariates: dict


@dataclass
class CohortManifest:
    seed: int
    entries: list[CohortEntry]

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "entries": [
                {
                    "patient_id": e.patient_id,
                    "label": e.label,
                    "leads": e.leads,
                    "fs": e.fs,
                    "covariates": e.covariates,
                }
                for e in self.entries
            ],
        }


# Table-derived covariate distributions for the surrogate cohort.
RESPONDER_QRS = (179.4, 19.8)
NON_RESPONDER_QRS = (158.4, 23.7)
RESPONDER_LVEF = (27.8, 5.1)
NON_RESPONDER_LVEF = (25.2, 4.7)
RESPONDER_LBBB_RATE = 44 / 46
NON_RESPONDER_LBBB_RATE = 13 / 25


def synth_crt_cohort(
    n: int = 71,
    prevalence: float = 46 / 71,
    effect: float = 1.8,
    seed: int = 0,
    out_dir: str | Path | None = None,
    duration_s: float = 20.0,
    n_leads: int = 2,
    noise_mv: float = 0.03,
) -> CohortManifest:
    """Build a surrogate cohort: responders get QRS-complex Gaussians
    widened by ``effect``; effect=1.0 is the null cohort (both classes
    drawn from the same distribution).

    With ``out_dir`` the lead signals are written as tensor containers
    alongside a cohort.json manifest.
    """
    if n < 10:
        raise DataError("cohort size must be at least 10")
    if not 0 < prevalence < 1:
        raise DataError("prevalence must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    n_pos = int(round(n * prevalence))
    labels = ["responder"] * n_pos + ["non_responder"] * (n - n_pos)

    out_path = None
    if out_dir is not None:
        out_path = Path(out_dir)
        try:
            out_path.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise FileWriteError(f"cannot create {out_dir}: {exc}") from exc

    entries = []
    for i, label in enumerate(labels):
        pid = f"P{i:03d}"
        responder = label == "responder"
        waves = _scale_widths(DEFAULT_WAVES, effect) if responder else dict(DEFAULT_WAVES)
        params = SynthParams(
            fs=360.0,
            duration_s=duration_s,
            heart_rate_bpm=float(rng.uniform(55.0, 85.0)),
            rr_jitter_pct=5.0,
            waves=waves,
            noise_mv=noise_mv,
            seed=int(rng.integers(0, 2**31)),
        )
        qrs_mu, qrs_sd = RESPONDER_QRS if responder else NON_RESPONDER_QRS
        lvef_mu, lvef_sd = RESPONDER_LVEF if responder else NON_RESPONDER_LVEF
        lbbb_rate = RESPONDER_LBBB_RATE if responder else NON_RESPONDER_LBBB_RATE
        covariates = {
            "qrs_ms": float(max(80.0, rng.normal(qrs_mu, qrs_sd))),
            "lbbb": bool(rng.uniform() < lbbb_rate),
            "lvef_pct": float(np.clip(rng.normal(lvef_mu, lvef_sd), 5.0, 45.0)),
        }

        lead_paths = []
        for lead in range(n_leads):
            lead_params = replace(params, seed=params.seed + lead)
            scale = 1.0 if lead == 0 else 0.6
            signal, _ = synth_ecg(lead_params)
            signal = signal * scale
            rel = f"{pid}_lead{lead}.ecgt"
            if out_path is not None:
                tensorio.write_tensor(out_path / rel, signal.astype(np.float32))
            lead_paths.append(rel)
        entries.append(CohortEntry(pid, label, lead_paths, 360.0, covariates))

    manifest = CohortManifest(seed=seed, entries=entries)
    if out_path is not None:
        (out_path / "cohort.json").write_text(
            json.dumps(manifest.to_dict(), indent=2) + "\n"
        )
    return manifest


def load_cohort_manifest(path: str | Path) -> CohortManifest:
    d = json.loads(Path(path).read_text())
    return CohortManifest(
        seed=d["seed"],
        entries=[CohortEntry(**e) for e in d["entries"]],
    )


def write_annotation_file(path: str | Path, indices, symbols) -> None:
    """Write beat annotations in the MIT .atr codec (test/demo support)."""
    symbol_to_code = {"N": 1, "L": 2, "R": 3, "a": 4, "V": 5, "F": 6, "J": 7,
                      "A": 8, "S": 9, "E": 10, "j": 11, "/": 12, "Q": 13,
                      "e": 34, "f": 38}
    out = bytearray()
    prev = 0
    for idx, sym in zip(indices, symbols):
        delta = int(idx) - prev
        code = symbol_to_code[sym]
        if delta > 1023:
            out += (59 << 10).to_bytes(2, "little")  # SKIP, interval follows
            out += ((delta >> 16) & 0xFFFF).to_bytes(2, "little")
            out += (delta & 0xFFFF).to_bytes(2, "little")
            delta = 0
        out += ((code << 10) | delta).to_bytes(2, "little")
        prev = int(idx)
    out += b"\x00\x00"
    Path(path).write_bytes(bytes(out))


def synth_wfdb_corpus(
    out_dir: str | Path,
    n_records: int = 24,
    beats_per_record: int = 900,
    seed: int = 0,
    fs: float = 360.0,
    noise_mv: float = 0.02,
) -> list[str]:
    """Write synthetic WFDB record triplets with five beat morphologies.

    Each record mixes the AAMI wave sets in roughly MIT-like proportions
    (mostly N) so the full ingest -> detect -> segment -> pretrain path
    can run where the real database is not available.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    class_names = list(AAMI_WAVE_SETS)
    gain, adc_zero = 200.0, 1024
    record_ids = []

    for rec in range(n_records):
        rec_id = f"s{rec:03d}"
        hr = float(rng.uniform(55.0, 90.0))
        duration = beats_per_record * 60.0 / hr + 2.0
        # Mostly normal beats with all classes represented.
        beat_classes = rng.choice(
            class_names, size=beats_per_record + 8,
            p=[0.44, 0.14, 0.14, 0.14, 0.14],
        )
        beat_waves = [AAMI_WAVE_SETS[c] for c in beat_classes]
        params = SynthParams(
            fs=fs, duration_s=duration, heart_rate_bpm=hr,
            rr_jitter_pct=6.0, noise_mv=noise_mv,
            seed=int(rng.integers(0, 2**31)),
        )
        signal, r_indices = synth_ecg(params, beat_waves=beat_waves)
        symbols = [AAMI_TO_MIT_SYMBOL[c] for c in beat_classes[: len(r_indices)]]

        adu = np.clip(np.round(signal * gain + adc_zero), -2048, 2047).astype(np.int64)
        lead2 = np.clip(np.round(0.6 * signal * gain + adc_zero), -2048, 2047).astype(np.int64)
        n = len(adu)
        interleaved = np.empty(2 * n, dtype=np.int64)
        interleaved[0::2] = adu
        interleaved[1::2] = lead2
        (out / f"{rec_id}.dat").write_bytes(encode_format212(interleaved))

        def checksum(ch):
            return int(ch.sum() % 65536)

        header = (
            f"{rec_id} 2 {fs:g} {n}\n"
            f"{rec_id}.dat 212 {gain:g} 12 {adc_zero} {adu[0]} {checksum(adu)} 0 MLII\n"
            f"{rec_id}.dat 212 {gain:g} 12 {adc_zero} {lead2[0]} {checksum(lead2)} 0 V1\n"
        )
        (out / f"{rec_id}.hea").write_text(header)
        write_annotation_file(out / f"{rec_id}.atr", r_indices, symbols)
        record_ids.append(rec_id)
    return record_ids
