"""ECG record ingestion, per-second windowing, splitting and a synthetic record generator.

Record formats
--------------
CSV: ``<stem>.csv`` whose first line is ``<patient_id>,<sample_rate>`` followed
by one sample (millivolts) per line, plus a companion ``<stem>.labels`` file
with one ``0``/``1`` per line, one line per second.

Raw binary: ``<stem>.ecgbin``, little-endian::

    b"ECGR" | u32 id_len | id bytes (utf-8) | u32 rate | u64 n_samples
    | f64 * n_samples | u64 n_labels | u8 * n_labels
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

SAMPLE_RATE = 128
WINDOW_SECONDS = 11
WINDOW_SAMPLES = SAMPLE_RATE * WINDOW_SECONDS
LABEL_OFFSET = 1  # a window is labeled by its 2nd second
NO_APNEA_FLAG = "no_apnea_events"
BINARY_MAGIC = b"ECGR"


class RecordFormatError(ValueError):
    """Base class for record parse failures."""


class MalformedHeaderError(RecordFormatError):
    pass


class LengthMismatchError(RecordFormatError):
    pass


class UnknownLabelError(RecordFormatError):
    pass


class DataWarning(UserWarning):
    pass


@dataclass
class EcgRecord:
    patient_id: str
    samples: np.ndarray
    second_labels: np.ndarray
    sample_rate: int = SAMPLE_RATE
    flags: set[str] = field(default_factory=set)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        self.second_labels = np.asarray(self.second_labels, dtype=np.int8)
        if self.samples.size != self.sample_rate * self.second_labels.size:
            raise LengthMismatchError(
                f"{self.patient_id}: {self.samples.size} samples for {self.second_labels.size} labeled seconds"
            )
        if not np.isin(self.second_labels, (0, 1)).all():
            raise UnknownLabelError(f"{self.patient_id}: labels must be 0 or 1")
        if not self.second_labels.any():
            self.flags.add(NO_APNEA_FLAG)

    @property
    def seconds(self) -> int:
        return int(self.second_labels.size)

    @property
    def has_apnea(self) -> bool:
        return NO_APNEA_FLAG not in self.flags


@dataclass
class SampleWindow:
    values: np.ndarray
    label: int
    patient_id: str
    start_second: int


@dataclass
class WindowSet:
    """Columnar collection of windows; ``index`` refers back to the pooled window list."""

    x: np.ndarray  # (N, 1408)
    y: np.ndarray  # (N,)
    patient_ids: np.ndarray  # (N,) str
    start_seconds: np.ndarray  # (N,)
    index: np.ndarray  # (N,)

    def __len__(self) -> int:
        return int(self.y.shape[0])

    @classmethod
    def empty(cls, width: int = WINDOW_SAMPLES) -> "WindowSet":
        return cls(np.empty((0, width)), np.empty(0, np.int64), np.empty(0, dtype=str), np.empty(0, np.int64),
                   np.empty(0, np.int64))

    @classmethod
    def from_windows(cls, windows: list[SampleWindow]) -> "WindowSet":
        if not windows:
            return cls.empty()
        return cls(
            np.stack([w.values for w in windows]),
            np.array([w.label for w in windows], dtype=np.int64),
            np.array([w.patient_id for w in windows]),
            np.array([w.start_second for w in windows], dtype=np.int64),
            np.arange(len(windows)),
        )

    @classmethod
    def concat(cls, sets: list["WindowSet"]) -> "WindowSet":
        sets = [s for s in sets if len(s)]
        if not sets:
            return cls.empty()
        pooled = cls(*(np.concatenate([getattr(s, f) for s in sets]) for f in ("x", "y", "patient_ids", "start_seconds", "index")))
        pooled.index = np.arange(len(pooled))  # renumber into the pooled list
        return pooled

    def take(self, idx: np.ndarray) -> "WindowSet":
        return WindowSet(self.x[idx], self.y[idx], self.patient_ids[idx], self.start_seconds[idx], self.index[idx])

    def for_patient(self, patient_id: str) -> "WindowSet":
        return self.take(np.flatnonzero(self.patient_ids == patient_id))

    def windows(self) -> list[SampleWindow]:
        return [
            SampleWindow(self.x[i], int(self.y[i]), str(self.patient_ids[i]), int(self.start_seconds[i]))
            for i in range(len(self))
        ]

    def class_counts(self) -> dict[str, int]:
        return {"non_apnea": int((self.y == 0).sum()), "apnea": int((self.y == 1).sum())}


@dataclass
class DatasetSplit:
    train: WindowSet
    validation: WindowSet
    test: WindowSet
    split_seed: int


# ---------------------------------------------------------------------------
# Ingestion
# ---------------------------------------------------------------------------


def _truncate_to_seconds(samples: np.ndarray, rate: int, source) -> np.ndarray:
    whole = (samples.size // rate) * rate
    if whole != samples.size:
        warnings.warn(f"{source}: {samples.size - whole} trailing samples dropped to whole seconds", DataWarning,
                      stacklevel=3)
    return samples[:whole]


def _parse_labels(tokens, source) -> np.ndarray:
    labels = []
    for tok in tokens:
        if tok not in ("0", "1"):
            raise UnknownLabelError(f"{source}: unknown label symbol {tok!r}")
        labels.append(int(tok))
    return np.array(labels, dtype=np.int8)


def _finish_record(patient_id: str, rate: int, samples: np.ndarray, labels: np.ndarray, source) -> EcgRecord:
    if rate != SAMPLE_RATE:
        raise MalformedHeaderError(f"{source}: sample rate {rate} Hz, expected {SAMPLE_RATE}")
    samples = _truncate_to_seconds(samples, rate, source)
    if samples.size // rate != labels.size:
        raise LengthMismatchError(f"{source}: {samples.size // rate} whole seconds but {labels.size} labels")
    record = EcgRecord(patient_id, samples, labels, rate)
    if not record.has_apnea:
        warnings.warn(f"{source}: record {patient_id} has no apnea events", DataWarning, stacklevel=3)
    return record


def labels_path(csv_path: Path) -> Path:
    return csv_path.with_suffix(".labels")


def read_csv_record(path) -> EcgRecord:
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines:
        raise MalformedHeaderError(f"{path}: empty file")
    header = lines[0].split(",")
    if len(header) != 2 or not header[0].strip():
        raise MalformedHeaderError(f"{path}: header must be '<patient_id>,<sample_rate>'")
    try:
        rate = int(header[1])
    except ValueError:
        raise MalformedHeaderError(f"{path}: sample rate {header[1]!r} is not an integer") from None
    try:
        samples = np.array([float(v) for v in lines[1:] if v.strip()], dtype=np.float64)
    except ValueError as exc:
        raise RecordFormatError(f"{path}: bad sample value ({exc})") from None
    lpath = labels_path(path)
    if not lpath.exists():
        raise RecordFormatError(f"{path}: missing label file {lpath.name}")
    labels = _parse_labels([t.strip() for t in lpath.read_text().splitlines() if t.strip()], lpath)
    return _finish_record(header[0].strip(), rate, samples, labels, path)


def read_binary_record(path) -> EcgRecord:
    path = Path(path)
    blob = path.read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(blob):
            raise LengthMismatchError(f"{path}: file ends early")
        chunk = blob[pos : pos + n]
        pos += n
        return chunk

    if take(4) != BINARY_MAGIC:
        raise MalformedHeaderError(f"{path}: bad magic")
    (id_len,) = struct.unpack("<I", take(4))
    try:
        patient_id = take(id_len).decode()
    except UnicodeDecodeError:
        raise MalformedHeaderError(f"{path}: patient id is not utf-8") from None
    rate, n_samples = struct.unpack("<IQ", take(12))
    samples = np.frombuffer(take(8 * n_samples), dtype="<f8").astype(np.float64)
    (n_labels,) = struct.unpack("<Q", take(8))
    raw = np.frombuffer(take(n_labels), dtype=np.uint8)
    if pos != len(blob):
        raise LengthMismatchError(f"{path}: {len(blob) - pos} unexpected trailing bytes")
    bad = raw[raw > 1]
    if bad.size:
        raise UnknownLabelError(f"{path}: unknown label byte {int(bad[0])}")
    return _finish_record(patient_id, rate, samples, raw.astype(np.int8), path)


def load_record(source) -> EcgRecord:
    path = Path(source)
    if path.suffix == ".csv":
        return read_csv_record(path)
    if path.suffix == ".ecgbin":
        return read_binary_record(path)
    raise RecordFormatError(f"{path}: unsupported record format (use .csv or .ecgbin)")


def record_files(directory) -> list[Path]:
    directory = Path(directory)
    return sorted(p for p in directory.iterdir() if p.suffix in (".csv", ".ecgbin"))


def write_csv_record(record: EcgRecord, path) -> None:
    path = Path(path)
    lines = [f"{record.patient_id},{record.sample_rate}"] + [repr(float(v)) for v in record.samples]
    path.write_text("\n".join(lines) + "\n")
    labels_path(path).write_text("\n".join(str(int(v)) for v in record.second_labels) + "\n")


def write_binary_record(record: EcgRecord, path) -> None:
    pid = record.patient_id.encode()
    blob = (
        BINARY_MAGIC
        + struct.pack("<I", len(pid))
        + pid
        + struct.pack("<IQ", record.sample_rate, record.samples.size)
        + record.samples.astype("<f8").tobytes()
        + struct.pack("<Q", record.second_labels.size)
        + record.second_labels.astype(np.uint8).tobytes()
    )
    Path(path).write_bytes(blob)


# ---------------------------------------------------------------------------
# Windows
# ---------------------------------------------------------------------------


def normalize(values: np.ndarray) -> np.ndarray:
    """Zero mean, unit variance along the last axis; constant rows map to zeros."""
    values = np.asarray(values, dtype=np.float64)
    if values.shape[-1] == 0:
        raise ValueError("cannot normalize an empty window")
    centered = values - values.mean(axis=-1, keepdims=True)
    std = np.sqrt((centered * centered).mean(axis=-1, keepdims=True))
    safe = np.where(std > 0, std, 1.0)
    return np.where(std > 0, centered / safe, 0.0)


def window_count(seconds: int) -> int:
    return max(0, seconds - (WINDOW_SECONDS - 1))


def window_array(record: EcgRecord, per_window_norm: bool = True) -> WindowSet:
    """All 11 s windows of a record with a 1 s hop, as a :class:`WindowSet`."""
    count = window_count(record.seconds)
    if count == 0:
        warnings.warn(f"{record.patient_id}: record shorter than {WINDOW_SECONDS} s yields no windows", DataWarning,
                      stacklevel=2)
        return WindowSet.empty()
    samples = record.samples if per_window_norm else normalize(record.samples)
    x = sliding_window_view(samples, WINDOW_SAMPLES)[:: record.sample_rate][:count]
    x = normalize(x) if per_window_norm else x.copy()
    starts = np.arange(count)
    return WindowSet(
        x,
        record.second_labels[starts + LABEL_OFFSET].astype(np.int64),
        np.full(count, record.patient_id),
        starts,
        starts.copy(),
    )


def make_windows(record: EcgRecord, per_window_norm: bool = True) -> list[SampleWindow]:
    """Window ``i`` spans seconds ``[i, i + 11)`` and carries the label of second ``i + 1``."""
    return window_array(record, per_window_norm).windows()


# ---------------------------------------------------------------------------
# Splitting and balancing
# ---------------------------------------------------------------------------


def oversample(ws: WindowSet, rng: np.random.Generator, name: str = "partition") -> WindowSet:
    """Duplicate minority-class windows (with replacement) until both classes are equal."""
    pos = np.flatnonzero(ws.y == 1)
    neg = np.flatnonzero(ws.y == 0)
    if pos.size == 0 or neg.size == 0:
        if len(ws):
            warnings.warn(f"{name} holds a single class; balancing skipped", DataWarning, stacklevel=2)
        return ws
    minority, gap = (pos, neg.size - pos.size) if pos.size < neg.size else (neg, pos.size - neg.size)
    extra = rng.choice(minority, size=gap, replace=True)
    return ws.take(np.concatenate([np.arange(len(ws)), extra]))


def partition_sizes(n: int) -> tuple[int, int, int]:
    n_train = n * 8 // 10
    n_val = n // 10
    return n_train, n_val, n - n_train - n_val


def split_windows(windows, seed: int, mode: str = "pooled") -> tuple[WindowSet, WindowSet, WindowSet]:
    """8:1:1 partition without balancing.

    ``pooled`` shuffles all windows together; ``segments`` keeps each
    patient's windows in time order and cuts contiguous 80/10/10 segments.
    """
    ws = windows if isinstance(windows, WindowSet) else WindowSet.from_windows(list(windows))
    if mode == "pooled":
        order = np.random.default_rng(seed).permutation(len(ws))
        n_train, n_val, _ = partition_sizes(len(ws))
        parts = order[:n_train], order[n_train : n_train + n_val], order[n_train + n_val :]
    elif mode == "segments":
        parts = ([], [], [])
        for pid in sorted(set(ws.patient_ids.tolist())):
            idx = np.flatnonzero(ws.patient_ids == pid)
            idx = idx[np.argsort(ws.start_seconds[idx], kind="stable")]
            n_train, n_val, _ = partition_sizes(idx.size)
            for bucket, chunk in zip(parts, (idx[:n_train], idx[n_train : n_train + n_val], idx[n_train + n_val :])):
                bucket.extend(chunk.tolist())
        parts = tuple(np.array(p, dtype=np.int64) for p in parts)
    else:
        raise ValueError(f"unknown split mode {mode!r}")
    return tuple(ws.take(p) for p in parts)


def balance_split(train: WindowSet, validation: WindowSet, test: WindowSet, seed: int) -> DatasetSplit:
    rng = np.random.default_rng([seed, 1])
    return DatasetSplit(oversample(train, rng, "train"), oversample(validation, rng, "validation"), test, seed)


def split_and_balance(windows, seed: int, mode: str = "pooled") -> DatasetSplit:
    return balance_split(*split_windows(windows, seed, mode), seed)


# ---------------------------------------------------------------------------
# Synthetic records
# ---------------------------------------------------------------------------

NORMAL_BEAT_SAMPLES = 128  # 60 bpm
APNEA_BEAT_SAMPLES = 88  # ~87 bpm
_RESP_BEATS = 4  # respiratory cycle in normal beats


@dataclass(frozen=True)
class SynthProfile:
    """Pseudo-ECG recipe for one synthetic patient.

    Normal breathing: beats every ``normal_beat`` samples whose R amplitude
    swings by ``resp_depth`` and whose baseline wanders by ``baseline_amp``
    over a 4-beat respiratory cycle. Apnea seconds: beats every
    ``apnea_beat`` samples at a flat ``apnea_gain`` amplitude with no
    respiratory baseline. Noise is white Gaussian; jitter shifts each beat
    onset by up to ``jitter`` samples.
    """

    duration_s: int
    apnea_episodes: tuple[tuple[int, int], ...] = ()
    noise_std: float = 0.05
    jitter: int = 3
    patient_id: str = "synth"
    normal_beat: int = NORMAL_BEAT_SAMPLES
    apnea_beat: int = APNEA_BEAT_SAMPLES
    apnea_gain: float = 0.7
    resp_depth: float = 0.25
    baseline_amp: float = 0.1

    def __post_init__(self):
        if self.duration_s < 0 or min(self.normal_beat, self.apnea_beat) < 1:
            raise ValueError("duration must be >= 0 and beat intervals >= 1 sample")


def _beat_template() -> np.ndarray:
    t = np.arange(80, dtype=np.float64)
    p_wave = 0.12 * np.exp(-0.5 * ((t - 8) / 4.0) ** 2)
    r_wave = np.exp(-0.5 * ((t - 24) / 2.5) ** 2)
    s_wave = -0.25 * np.exp(-0.5 * ((t - 30) / 2.5) ** 2)
    t_wave = 0.3 * np.exp(-0.5 * ((t - 56) / 8.0) ** 2)
    return p_wave + r_wave + s_wave + t_wave


_TEMPLATE = _beat_template()


def synth_labels(profile: SynthProfile) -> np.ndarray:
    labels = np.zeros(profile.duration_s, dtype=np.int8)
    for start, end in profile.apnea_episodes:
        labels[max(start, 0) : min(end, profile.duration_s)] = 1
    return labels


def synth_record(profile: SynthProfile, seed: int) -> EcgRecord:
    labels = synth_labels(profile)
    rng = np.random.default_rng(seed)
    resp_gain = 1.0 + profile.resp_depth * np.array([0.0, 1.0, 0.0, -1.0])
    n = profile.duration_s * SAMPLE_RATE
    signal = np.zeros(n + _TEMPLATE.size)
    onset = 0
    beat = 0
    while onset < n:
        if labels[onset // SAMPLE_RATE] == 1:
            gain, interval = profile.apnea_gain, profile.apnea_beat
        else:
            gain, interval = resp_gain[beat % _RESP_BEATS], profile.normal_beat
        signal[onset : onset + _TEMPLATE.size] += gain * _TEMPLATE
        beat += 1
        shift = int(rng.integers(-profile.jitter, profile.jitter + 1)) if profile.jitter else 0
        onset += max(interval + shift, 1)
    signal = signal[:n]
    cycle = profile.normal_beat * _RESP_BEATS
    baseline = profile.baseline_amp * np.sin(2 * np.pi * (np.arange(n) % cycle) / cycle)
    signal += np.where(np.repeat(labels, SAMPLE_RATE) == 1, 0.0, baseline)
    if profile.noise_std > 0:
        signal += rng.normal(0.0, profile.noise_std, n)
    return EcgRecord(profile.patient_id, signal, labels, SAMPLE_RATE)


def random_profile(duration_s: int, rng: np.random.Generator, patient_id: str = "synth",
                   episode_s=(15, 40), gap_s=(30, 90), individual: bool = False, **kwargs) -> SynthProfile:
    """Profile with apnea episodes of random length separated by random gaps.

    ``individual`` also draws the patient's physiology: resting heart rate
    between 50 and 75 bpm, an apneic rate 30 to 60% faster, and individual
    apnea amplitude, respiratory depth and baseline wander.
    """
    episodes = []
    t = int(rng.integers(*gap_s))
    while t < duration_s:
        length = int(rng.integers(*episode_s))
        episodes.append((t, min(t + length, duration_s)))
        t += length + int(rng.integers(*gap_s))
    if individual:
        normal = int(rng.integers(102, 154))
        kwargs = {
            "normal_beat": normal,
            "apnea_beat": int(round(normal / rng.uniform(1.3, 1.6))),
            "apnea_gain": float(rng.uniform(0.55, 0.85)),
            "resp_depth": float(rng.uniform(0.15, 0.35)),
            "baseline_amp": float(rng.uniform(0.05, 0.15)),
            **kwargs,
        }
    return SynthProfile(duration_s, tuple(episodes), patient_id=patient_id, **kwargs)
