"""Session I/O, preprocessing filters and labeled window extraction.

On-disk layout of one session ``<id>``::

    <id>.csv          time_s,ch01,...,chMM   (one sample per row)
    <id>_events.csv   onset_s,rating
    <id>_meta.txt     key = value lines: sample_rate_hz, baseline_start_s,
                      baseline_end_s, subject_id

Lines starting with ``#`` are comments and are skipped by the reader.
"""
from __future__ import annotations

import csv
import math
import os
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import signal

PAIN_RATING = 7
PAIN, NO_PAIN = 1, -1


class SessionFormatError(ValueError):
    """Raised when a session file (or one of its companions) is malformed."""


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Session:
    """One recording: M channel series sampled at a common rate."""

    id: str
    sample_rate_hz: float
    channels: np.ndarray  # (M, n_samples)
    events: tuple[tuple[float, int], ...]
    baseline_span_s: tuple[float, float]
    subject_id: str = ""
    channel_names: tuple[str, ...] = ()

    def __post_init__(self):
        ch = _frozen(self.channels)
        if ch.ndim == 1:
            ch = _frozen(ch[None, :])
        object.__setattr__(self, "channels", ch)
        object.__setattr__(self, "events", tuple((float(o), int(r)) for o, r in self.events))
        object.__setattr__(self, "baseline_span_s", tuple(float(v) for v in self.baseline_span_s))
        if not self.channel_names:
            names = tuple(f"ch{i + 1:02d}" for i in range(ch.shape[0]))
            object.__setattr__(self, "channel_names", names)
        self.validate()

    @property
    def n_channels(self) -> int:
        return self.channels.shape[0]

    @property
    def n_samples(self) -> int:
        return self.channels.shape[1]

    @property
    def duration_s(self) -> float:
        return self.n_samples / self.sample_rate_hz

    def validate(self):
        if not self.sample_rate_hz > 0:
            raise SessionFormatError(f"{self.id}: sample rate must be positive")
        if self.channels.shape[0] < 1 or self.channels.shape[1] < 1:
            raise SessionFormatError(f"{self.id}: need at least one channel and one sample")
        if len(self.channel_names) != self.channels.shape[0]:
            raise SessionFormatError(f"{self.id}: channel name count does not match data")
        if not np.all(np.isfinite(self.channels)):
            raise SessionFormatError(f"{self.id}: non-finite sample values")
        start, end = self.baseline_span_s
        if not (0 <= start < end <= self.duration_s + 1e-9):
            raise SessionFormatError(
                f"{self.id}: baseline span ({start}, {end}) outside recording of {self.duration_s} s"
            )
        for onset, rating in self.events:
            if not (0 <= onset <= self.duration_s):
                raise SessionFormatError(
                    f"{self.id}: event onset {onset} s outside recording of {self.duration_s} s"
                )
            if not 0 <= rating <= 10:
                raise SessionFormatError(f"{self.id}: rating {rating} not in 0..10")
            if start <= onset < end:
                raise SessionFormatError(f"{self.id}: event at {onset} s falls inside the baseline span")


@dataclass(frozen=True)
class LabeledWindow:
    session_id: str
    label: int
    samples: np.ndarray  # (M, W)
    onset_s: float
    sample_rate_hz: float = 25.0

    def __post_init__(self):
        object.__setattr__(self, "samples", _frozen(self.samples))
        if self.label not in (PAIN, NO_PAIN):
            raise ValueError(f"label must be +1 or -1, got {self.label}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError(f"window of {self.session_id} at {self.onset_s} s has non-finite samples")


@dataclass(frozen=True)
class SessionSchema:
    """File naming and column conventions for a session on disk."""

    events_suffix: str = "_events.csv"
    meta_suffix: str = "_meta.txt"
    time_column: str = "time_s"
    channel_prefix: str = "ch"
    comment: str = "#"
    meta_keys: tuple[str, ...] = field(
        default=("sample_rate_hz", "baseline_start_s", "baseline_end_s", "subject_id")
    )

    def companions(self, path: Path) -> tuple[Path, Path]:
        path = Path(path)
        stem = path.name[: -len(path.suffix)] if path.suffix else path.name
        return path.with_name(stem + self.events_suffix), path.with_name(stem + self.meta_suffix)


def _data_rows(path: Path, comment: str):
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or (row[0].startswith(comment)):
                continue
            yield lineno, [c.strip() for c in row]


def _parse_float(text: str, path: Path, lineno: int, column: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise SessionFormatError(f"{path}: row {lineno}: column {column!r} is not a number: {text!r}") from None
    if not math.isfinite(value):
        raise SessionFormatError(f"{path}: row {lineno}: column {column!r} is not finite")
    return value


def read_metadata(path: Path, schema: SessionSchema = SessionSchema()) -> dict[str, str]:
    meta = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith(schema.comment):
                continue
            if "=" not in line:
                raise SessionFormatError(f"{path}: line {lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            meta[key] = value
    missing = [k for k in schema.meta_keys if k not in meta]
    if missing:
        raise SessionFormatError(f"{path}: missing metadata keys {missing}")
    return meta


def load_session(path, schema: SessionSchema = SessionSchema()) -> Session:
    """Read and validate one session plus its events and metadata files."""
    path = Path(path)
    if not path.exists():
        raise SessionFormatError(f"{path}: session file not found")
    events_path, meta_path = schema.companions(path)
    session_id = path.stem
    for companion in (events_path, meta_path):
        if not companion.exists():
            raise SessionFormatError(f"session {session_id}: missing companion file {companion}")

    meta = read_metadata(meta_path, schema)
    try:
        rate = float(meta["sample_rate_hz"])
        baseline = (float(meta["baseline_start_s"]), float(meta["baseline_end_s"]))
    except ValueError as exc:
        raise SessionFormatError(f"{meta_path}: {exc}") from None

    rows = _data_rows(path, schema.comment)
    try:
        lineno, header = next(rows)
    except StopIteration:
        raise SessionFormatError(f"{path}: empty file") from None
    if len(header) < 2 or header[0] != schema.time_column:
        raise SessionFormatError(f"{path}: row {lineno}: header must start with {schema.time_column!r}")
    names = header[1:]
    if any(not n.startswith(schema.channel_prefix) for n in names):
        raise SessionFormatError(f"{path}: row {lineno}: channel columns must start with {schema.channel_prefix!r}")

    data = []
    for lineno, row in rows:
        if len(row) != len(header):
            raise SessionFormatError(
                f"{path}: row {lineno}: expected {len(header)} fields, found {len(row)}"
            )
        data.append([_parse_float(v, path, lineno, header[j]) for j, v in enumerate(row)])
    if not data:
        raise SessionFormatError(f"{path}: no samples")
    arr = np.asarray(data)

    events = []
    rows = _data_rows(events_path, schema.comment)
    try:
        lineno, header = next(rows)
    except StopIteration:
        raise SessionFormatError(f"{events_path}: empty events file") from None
    if header != ["onset_s", "rating"]:
        raise SessionFormatError(f"{events_path}: row {lineno}: header must be 'onset_s,rating'")
    for lineno, row in rows:
        if len(row) != 2:
            raise SessionFormatError(f"{events_path}: row {lineno}: expected 2 fields, found {len(row)}")
        onset = _parse_float(row[0], events_path, lineno, "onset_s")
        rating = _parse_float(row[1], events_path, lineno, "rating")
        if rating != int(rating):
            raise SessionFormatError(f"{events_path}: row {lineno}: rating must be an integer")
        events.append((onset, int(rating)))

    return Session(
        id=session_id,
        sample_rate_hz=rate,
        channels=arr[:, 1:].T,
        events=tuple(events),
        baseline_span_s=baseline,
        subject_id=meta["subject_id"],
        channel_names=tuple(names),
    )


def atomic_write_text(path, text: str):
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    with open(tmp, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_session(session: Session, directory, header_comment: str | None = None) -> Path:
    """Write ``session`` in the CSV layout understood by :func:`load_session`."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    prefix = f"# {header_comment}\n" if header_comment else ""

    lines = [prefix + ",".join(("time_s",) + session.channel_names)]
    rate = session.sample_rate_hz
    for i, column in enumerate(session.channels.T):
        lines.append(",".join([repr(i / rate)] + [repr(float(v)) for v in column]))
    main = directory / f"{session.id}.csv"
    atomic_write_text(main, "\n".join(lines) + "\n")

    ev = [prefix + "onset_s,rating"] + [f"{onset!r},{rating}" for onset, rating in session.events]
    atomic_write_text(directory / f"{session.id}_events.csv", "\n".join(ev) + "\n")

    start, end = session.baseline_span_s
    meta = (
        f"{prefix}sample_rate_hz = {rate!r}\nbaseline_start_s = {start!r}\n"
        f"baseline_end_s = {end!r}\nsubject_id = {session.subject_id}\n"
    )
    atomic_write_text(directory / f"{session.id}_meta.txt", meta)
    return main


def lowpass_filter(series, sample_rate_hz: float, cutoff_hz: float = 0.5, order: int = 3) -> np.ndarray:
    """Zero-phase Butterworth low-pass (forward-backward, odd reflection padding).

    Accepts a 1-D series or a 2-D array filtered along the last axis.
    """
    x = np.asarray(series, dtype=float)
    nyquist = sample_rate_hz / 2
    if not 0 < cutoff_hz < nyquist:
        raise ValueError(f"cutoff {cutoff_hz} Hz must lie strictly between 0 and Nyquist ({nyquist} Hz)")
    if order < 1:
        raise ValueError("filter order must be >= 1")
    n = x.shape[-1]
    if n < 3 * order:
        raise ValueError(f"series of length {n} too short for order {order} (need >= {3 * order})")
    # butter() applies the bilinear transform with prewarping at the cutoff
    sos = signal.butter(order, cutoff_hz, btype="low", fs=sample_rate_hz, output="sos")
    return signal.sosfiltfilt(sos, x, axis=-1, padtype="odd", padlen=min(3 * order, n - 1))


def detrend_poly(series, degree: int = 3) -> np.ndarray:
    """Residual of a least-squares polynomial fit in time (last axis)."""
    x = np.asarray(series, dtype=float)
    n = x.shape[-1]
    if degree < 0:
        raise ValueError("degree must be >= 0")
    if n <= degree + 1:
        raise ValueError(f"series of length {n} is degenerate for a degree-{degree} fit")
    u = np.linspace(-1.0, 1.0, n)
    # Legendre columns span the same space as monomials but are well conditioned
    V = np.polynomial.legendre.legvander(u, degree)
    coef, *_ = np.linalg.lstsq(V, np.moveaxis(x, -1, 0).reshape(n, -1), rcond=None)
    fitted = (V @ coef).reshape((n,) + x.shape[:-1])
    return x - np.moveaxis(fitted, 0, -1)


def preprocess_session(
    session: Session,
    lowpass: tuple[float, int] | None = (0.5, 3),
    detrend_degree: int | None = 3,
) -> Session:
    """Apply the optional low-pass and polynomial detrend to every channel."""
    x = session.channels
    if lowpass is not None:
        x = lowpass_filter(x, session.sample_rate_hz, *lowpass)
    if detrend_degree is not None:
        x = detrend_poly(x, detrend_degree)
    return replace(session, channels=x)


def window_samples(window_len_s: float, sample_rate_hz: float) -> int:
    return int(round(window_len_s * sample_rate_hz))


def _session_rng(session_id: str, seed: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), zlib.crc32(session_id.encode())])


def extract_windows(
    session: Session,
    window_len_s: float = 20.0,
    n_baseline: int = 6,
    rng_seed: int = 0,
    pain_rating: int = PAIN_RATING,
) -> list[LabeledWindow]:
    """Cut one pain window per ``pain_rating`` event and ``n_baseline`` baseline windows.

    Baseline windows start at seeded uniformly drawn sample offsets inside the
    baseline span; they may overlap each other but never any stimulus epoch
    ``[onset, onset + window_len_s)`` of any rating.
    """
    rate = session.sample_rate_hz
    W = window_samples(window_len_s, rate)
    n = session.n_samples
    windows = []
    for onset, rating in session.events:
        if rating != pain_rating:
            continue
        start = int(round(onset * rate))
        if start + W > n:
            raise ValueError(
                f"{session.id}: event at {onset} s lacks {window_len_s} s of signal after onset"
            )
        windows.append(LabeledWindow(session.id, PAIN, session.channels[:, start : start + W], onset, rate))

    if n_baseline > 0:
        b0 = int(math.ceil(session.baseline_span_s[0] * rate - 1e-9))
        b1 = int(math.floor(session.baseline_span_s[1] * rate + 1e-9))
        starts = np.arange(b0, min(b1, n) - W + 1)
        for onset, _ in session.events:
            s = int(round(onset * rate))
            starts = starts[(starts + W <= s) | (starts >= s + W)]
        if starts.size == 0:
            raise ValueError(
                f"{session.id}: baseline span {session.baseline_span_s} cannot hold a "
                f"{window_len_s} s window clear of stimuli"
            )
        rng = _session_rng(session.id, rng_seed)
        picks = np.sort(rng.choice(starts, size=n_baseline, replace=starts.size < n_baseline))
        for s in picks:
            windows.append(
                LabeledWindow(session.id, NO_PAIN, session.channels[:, s : s + W], s / rate, rate)
            )
    return windows
