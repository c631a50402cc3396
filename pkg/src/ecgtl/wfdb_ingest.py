"""WFDB/MIT-BIH ingestion: header grammar, format-212 codec, annotations.

Only signal format 212 (two 12-bit two's-complement samples packed into
3 bytes) is supported; that is the format of every MIT-BIH arrhythmia
record.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import (
    ChecksumError,
    CodecError,
    NotABeatError,
    ParseError,
    RangeError,
    TruncatedFileError,
    UnsupportedFormatError,
)

DEFAULT_SAMPLING_RATE = 250.0  # WFDB convention when the header omits it

# MIT annotation codes 1..49 are beat or non-beat event types; this is the
# standard code -> mnemonic table (wfdb ecgcodes).
ANNOTATION_SYMBOLS = {
    1: "N", 2: "L", 3: "R", 4: "a", 5: "V", 6: "F", 7: "J", 8: "A",
    9: "S", 10: "E", 11: "j", 12: "/", 13: "Q", 14: "~", 16: "|",
    18: "s", 19: "T", 20: "*", 21: "D", 22: '"', 23: "=", 24: "p",
    25: "B", 26: "^", 27: "t", 28: "+", 29: "u", 30: "?", 31: "!",
    32: "[", 33: "]", 34: "e", 35: "n", 36: "@", 37: "x", 38: "f",
    39: "(", 40: ")", 41: "r",
}

# Pseudo-annotation codes (code field of the 16-bit word).
_SKIP, _NUM, _SUB, _CHN, _AUX = 59, 60, 61, 62, 63


class AamiClass(Enum):
    """The five AAMI EC57 consolidated beat classes."""

    N = 0
    S = 1
    V = 2
    F = 3
    Q = 4


# AAMI EC57 consolidation of MIT beat symbols.
AAMI_MAP = {
    "N": AamiClass.N, "L": AamiClass.N, "R": AamiClass.N,
    "e": AamiClass.N, "j": AamiClass.N,
    "A": AamiClass.S, "a": AamiClass.S, "J": AamiClass.S, "S": AamiClass.S,
    "V": AamiClass.V, "E": AamiClass.V,
    "F": AamiClass.F,
    "/": AamiClass.Q, "f": AamiClass.Q, "Q": AamiClass.Q,
}

BEAT_SYMBOLS = frozenset(AAMI_MAP)

# Records whose rhythm is paced; excluded from pretraining by default.
PACED_RECORDS = ("102", "104", "107", "217")


@dataclass(frozen=True)
class SignalSpec:
    """One signal line of a .hea file."""

    file_name: str
    format_code: int
    gain: float
    adc_resolution_bits: int
    adc_zero: int
    initial_value: int
    checksum: int
    description: str = ""


@dataclass(frozen=True)
class RecordHeader:
    record_id: str
    num_signals: int
    sampling_rate_hz: float
    samples_per_signal: int
    signals: tuple[SignalSpec, ...]


@dataclass(frozen=True)
class BeatAnnotation:
    sample_index: int
    mit_symbol: str
    aami: AamiClass


@dataclass
class SignalRecord:
    """A fully decoded record: header plus per-channel ADC samples."""

    header: RecordHeader
    channels: list[np.ndarray] = field(default_factory=list)

    def to_millivolts(self, channel: int) -> np.ndarray:
        """Calibrate ADC units to millivolts: (adu - zero) / gain."""
        if not 0 <= channel < self.header.num_signals:
            raise IndexError(
                f"channel {channel} out of range (record has "
                f"{self.header.num_signals} signals)"
            )
        spec = self.header.signals[channel]
        return (self.channels[channel].astype(np.float64) - spec.adc_zero) / spec.gain


def _num(token: str, kind: type, what: str, line_no: int):
    # WFDB fields may carry suffixes like "200(0)/mV" or "212x2"; the
    # leading number is the value.
    for sep in "(/x:+":
        token = token.split(sep, 1)[0]
    try:
        return kind(token)
    except ValueError:
        raise ParseError(f"bad {what}: {token!r}", line_no) from None


def parse_header(text: str) -> RecordHeader:
    """Parse the contents of a .hea file."""
    lines = [
        (i + 1, ln.strip())
        for i, ln in enumerate(text.splitlines())
        if ln.strip() and not ln.lstrip().startswith("#")
    ]
    if not lines:
        raise ParseError("empty header")

    line_no, record_line = lines[0]
    fields = record_line.split()
    if len(fields) < 2:
        raise ParseError("record line needs at least name and signal count", line_no)
    record_id = fields[0].split("/")[0]
    num_signals = _num(fields[1], int, "signal count", line_no)
    if num_signals < 1:
        raise ParseError(f"num_signals must be >= 1, got {num_signals}", line_no)
    fs = _num(fields[2], float, "sampling rate", line_no) if len(fields) > 2 else DEFAULT_SAMPLING_RATE
    if fs <= 0:
        raise ParseError(f"sampling rate must be positive, got {fs}", line_no)
    n_samples = _num(fields[3], int, "sample count", line_no) if len(fields) > 3 else 0

    if len(lines) - 1 < num_signals:
        raise ParseError(
            f"header declares {num_signals} signals but has {len(lines) - 1} signal lines",
            line_no,
        )

    signals = []
    for line_no, line in lines[1 : 1 + num_signals]:
        f = line.split()
        if len(f) < 2:
            raise ParseError("signal line needs file name and format", line_no)
        fmt = _num(f[1], int, "format code", line_no)
        if fmt != 212:
            raise UnsupportedFormatError(
                f"line {line_no}: signal format {fmt} is not supported (only 212)"
            )
        gain = _num(f[2], float, "gain", line_no) if len(f) > 2 else 200.0
        if gain == 0:
            gain = 200.0  # WFDB: zero gain means "unknown", default 200
        if gain < 0:
            raise ParseError(f"gain must be positive, got {gain}", line_no)
        adc_res = _num(f[3], int, "ADC resolution", line_no) if len(f) > 3 else 12
        adc_zero = _num(f[4], int, "ADC zero", line_no) if len(f) > 4 else 0
        init_val = _num(f[5], int, "initial value", line_no) if len(f) > 5 else adc_zero
        checksum = _num(f[6], int, "checksum", line_no) if len(f) > 6 else 0
        desc = " ".join(f[8:]) if len(f) > 8 else ""
        signals.append(
            SignalSpec(f[0], fmt, gain, adc_res, adc_zero, init_val, checksum, desc)
        )

    return RecordHeader(record_id, num_signals, fs, n_samples, tuple(signals))


def decode_format212(data: bytes) -> np.ndarray:
    """Unpack format-212 bytes into interleaved signed 12-bit samples."""
    if len(data) % 3 != 0:
        raise TruncatedFileError(
            f"format-212 payload length {len(data)} is not a multiple of 3"
        )
    raw = np.frombuffer(data, dtype=np.uint8).reshape(-1, 3).astype(np.int32)
    first = raw[:, 0] | ((raw[:, 1] & 0x0F) << 8)
    second = raw[:, 2] | ((raw[:, 1] >> 4) << 8)
    out = np.empty(2 * len(raw), dtype=np.int32)
    out[0::2] = first
    out[1::2] = second
    out[out > 2047] -= 4096  # sign-extend from 12 bits
    return out


def encode_format212(samples: np.ndarray) -> bytes:
    """Pack signed 12-bit samples (even count) into format-212 bytes."""
    arr = np.asarray(samples, dtype=np.int64)
    if arr.ndim != 1 or len(arr) % 2 != 0:
        raise RangeError("format 212 needs an even number of samples")
    if arr.size and (arr.min() < -2048 or arr.max() > 2047):
        raise RangeError("sample outside the signed 12-bit range [-2048, 2047]")
    u = (arr & 0xFFF).reshape(-1, 2)
    out = np.empty((len(u), 3), dtype=np.uint8)
    out[:, 0] = u[:, 0] & 0xFF
    out[:, 1] = ((u[:, 1] >> 8) << 4) | (u[:, 0] >> 8)
    out[:, 2] = u[:, 1] & 0xFF
    return out.tobytes()


def map_to_aami(mit_symbol: str) -> AamiClass:
    """Consolidate an MIT beat symbol into its AAMI class."""
    try:
        return AAMI_MAP[mit_symbol]
    except KeyError:
        raise NotABeatError(f"{mit_symbol!r} is not a beat-type symbol") from None


def parse_annotations(data: bytes) -> list[BeatAnnotation]:
    """Decode a MIT .atr byte stream into beat annotations.

    Pseudo-annotations (SKIP/NUM/SUB/CHN/AUX) are consumed; non-beat event
    annotations are dropped from the returned stream.
    """
    beats: list[BeatAnnotation] = []
    time = 0
    pos = 0
    n = len(data)
    terminated = False
    while pos + 2 <= n:
        word = data[pos] | (data[pos + 1] << 8)
        pos += 2
        code = word >> 10
        delta = word & 0x3FF
        if code == 0:
            if delta == 0:
                terminated = True
                break
            continue  # code 0 with nonzero field: unused, skip
        if code == _SKIP:
            if pos + 4 > n:
                raise CodecError("truncated SKIP interval")
            high = data[pos] | (data[pos + 1] << 8)
            low = data[pos + 2] | (data[pos + 3] << 8)
            pos += 4
            interval = (high << 16) | low
            if interval >= 1 << 31:
                interval -= 1 << 32
            time += interval
            continue
        if code in (_NUM, _SUB, _CHN):
            continue  # value in delta field, no time advance
        if code == _AUX:
            skip = delta + (delta & 1)  # aux payload padded to even length
            if pos + skip > n:
                raise CodecError("truncated AUX payload")
            pos += skip
            continue
        time += delta
        symbol = ANNOTATION_SYMBOLS.get(code)
        if symbol is None:
            raise CodecError(f"unknown annotation code {code}")
        if symbol in BEAT_SYMBOLS:
            beats.append(BeatAnnotation(time, symbol, AAMI_MAP[symbol]))
    if not terminated:
        raise CodecError("annotation stream missing 0x0000 terminator")
    return beats


def load_record(data_dir: str | Path, record_id: str, strict_checksum: bool = False) -> SignalRecord:
    """Load a <record>.hea/.dat pair and verify per-channel checksums.

    A checksum mismatch warns by default (some database copies have known
    mismatches); ``strict_checksum`` turns it into an error.
    """
    data_dir = Path(data_dir)
    header = parse_header((data_dir / f"{record_id}.hea").read_text())
    flat = decode_format212((data_dir / f"{record_id}.dat").read_bytes())

    n_sig = header.num_signals
    n_samples = header.samples_per_signal
    if n_samples == 0:
        n_samples = len(flat) // n_sig
    if len(flat) < n_sig * n_samples:
        raise TruncatedFileError(
            f"{record_id}.dat holds {len(flat)} samples, "
            f"header promises {n_sig * n_samples}"
        )
    channels = [flat[i : n_sig * n_samples : n_sig].copy() for i in range(n_sig)]

    for ch, spec in zip(channels, header.signals):
        observed = int(ch.sum(dtype=np.int64) % 65536)
        expected = spec.checksum % 65536
        if observed != expected:
            msg = (
                f"record {record_id} signal {spec.file_name}: checksum "
                f"{observed} != header {expected}"
            )
            if strict_checksum:
                raise ChecksumError(msg)
            warnings.warn(msg, stacklevel=2)

    return SignalRecord(header, channels)


def load_annotations(data_dir: str | Path, record_id: str) -> list[BeatAnnotation]:
    return parse_annotations((Path(data_dir) / f"{record_id}.atr").read_bytes())
