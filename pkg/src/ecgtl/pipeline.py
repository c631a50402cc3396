"""Glue between ingestion, DSP, spectrograms and the trainer datasets."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import tensorio
from .dsp import BeatSegment, detect_r_peaks, remove_baseline, resample_to, segment_beats
from .errors import DataError
from .spectrogram import Fingerprint, segment_to_image
from .synthdata import CohortManifest, load_cohort_manifest
from .trainer import CohortDataset, ImageDataset
from .wfdb_ingest import AamiClass, load_annotations, load_record

AAMI_NAMES = [c.name for c in AamiClass]


def labeled_beats_from_record(
    data_dir: str | Path,
    record_id: str,
    channel: int = 0,
    strict_checksum: bool = False,
) -> list[BeatSegment]:
    """Segment a record around its annotated R indices, labeled by the
    AAMI class of each annotation."""
    record = load_record(data_dir, record_id, strict_checksum=strict_checksum)
    annotations = load_annotations(data_dir, record_id)
    signal = remove_baseline(record.to_millivolts(channel), record.header.sampling_rate_hz)
    peaks = np.array([a.sample_index for a in annotations], dtype=np.int64)
    labels = [a.aami for a in annotations]
    keep = peaks < len(signal)
    return segment_beats(
        signal,
        peaks[keep],
        record.header.sampling_rate_hz,
        source_id=record_id,
        labels=[l for l, k in zip(labels, keep) if k],
    )


def detected_beats_from_signal(
    signal: np.ndarray, fs: float, source_id: str = ""
) -> list[BeatSegment]:
    """Detector-driven segmentation for unannotated signals."""
    clean = remove_baseline(signal, fs)
    peaks = detect_r_peaks(signal, fs)
    return segment_beats(clean, peaks, fs, source_id=source_id)


def segments_to_images(segments: list[BeatSegment], fp: Fingerprint) -> np.ndarray:
    """[N x C x H x W] image tensor stack for a list of segments."""
    if not segments:
        raise DataError("no segments to convert")
    out = np.empty(
        (len(segments), fp.channels, fp.image_height, fp.image_width),
        dtype=np.float32,
    )
    for i, seg in enumerate(segments):
        out[i] = segment_to_image(
            seg.samples, fp.fs,
            window_kind=fp.window_kind, window_len=fp.window_len, hop=fp.hop,
            height=fp.image_height, width=fp.image_width, channels=fp.channels,
        )
    return out


def build_pretrain_dataset(
    data_dir: str | Path,
    records: list[str],
    fp: Fingerprint,
    max_beats: int | None = None,
    seed: int = 0,
) -> ImageDataset:
    """Labeled AAMI beat images from a set of WFDB records.

    When ``max_beats`` is set, beats are subsampled uniformly across the
    pool (deterministic per seed).
    """
    segments: list[BeatSegment] = []
    for rec in records:
        segments.extend(labeled_beats_from_record(data_dir, rec))
    if not segments:
        raise DataError(f"no beats found in records {records}")
    if max_beats is not None and len(segments) > max_beats:
        rng = np.random.default_rng(seed)
        idx = np.sort(rng.choice(len(segments), size=max_beats, replace=False))
        segments = [segments[i] for i in idx]
    images = segments_to_images(segments, fp)
    labels = np.array([s.label.value for s in segments], dtype=np.int64)
    groups = [s.source_id for s in segments]
    return ImageDataset(images, labels, fp, groups=groups, label_names=AAMI_NAMES)


def build_cohort_dataset(
    manifest: CohortManifest | str | Path,
    fp: Fingerprint,
    base_dir: str | Path | None = None,
    segments_per_patient: int = 4,
    lead: int = 0,
) -> CohortDataset:
    """Detect, segment and image each patient's chosen lead.

    Signals not at the fingerprint rate are resampled before detection.
    """
    if not isinstance(manifest, CohortManifest):
        path = Path(manifest)
        base_dir = path.parent if base_dir is None else Path(base_dir)
        manifest = load_cohort_manifest(path)
    elif base_dir is None:
        raise DataError("base_dir is required with an in-memory manifest")
    base_dir = Path(base_dir)

    patient_ids, patient_labels, seg_map = [], {}, {}
    for entry in manifest.entries:
        signal = tensorio.read_tensor(base_dir / entry.leads[lead]).astype(np.float64)
        if entry.fs != fp.fs:
            signal = resample_to(signal, entry.fs, fp.fs)
        beats = detected_beats_from_signal(signal, fp.fs, source_id=entry.patient_id)
        if not beats:
            raise DataError(f"no beats detected for patient {entry.patient_id}")
        beats = beats[:segments_per_patient]
        patient_ids.append(entry.patient_id)
        patient_labels[entry.patient_id] = int(entry.label == "responder")
        seg_map[entry.patient_id] = segments_to_images(beats, fp)
    return CohortDataset(patient_ids, patient_labels, seg_map, fp)
