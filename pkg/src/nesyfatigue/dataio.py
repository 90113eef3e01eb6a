"""Recording sessions: on-disk schema, synthetic cohorts and windowing.

On disk a session is three files sharing a participant id::

    eye_<pid>.csv        t,gx,gy,pupil,valid
    fnirs_<pid>.csv      t,ch1,...,ch8
    manifest_<pid>.json  {"participant_id": ..., "phases": [{"start", "end", "phase"}]}

Phase strings are ``alert``, ``induction`` and ``post``.
"""

from __future__ import annotations

import csv
import enum
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import signal

from .exceptions import (
    EmptyPhase,
    InvalidSpec,
    MissingColumn,
    NonMonotonicTimeUnfixable,
    PhaseTooShort,
)

logger = logging.getLogger(__name__)

N_FNIRS_CHANNELS = 8
EYE_COLUMNS = ("t", "gx", "gy", "pupil", "valid")
FNIRS_COLUMNS = ("t",) + tuple(f"ch{i}" for i in range(1, N_FNIRS_CHANNELS + 1))
JITTER_TOLERANCE = 0.10
MAX_OUT_OF_ORDER = 0.01


class Phase(str, enum.Enum):
    ALERT = "alert"
    INDUCTION = "induction"
    POST = "post"

    @property
    def label(self) -> int | None:
        """0 for the alert baseline, 1 for post-induction, None for induction."""
        return {Phase.ALERT: 0, Phase.POST: 1}.get(self)


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class EyeStream:
    t: np.ndarray
    gx: np.ndarray
    gy: np.ndarray
    pupil: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        for name in EYE_COLUMNS:
            object.__setattr__(self, name, _frozen(getattr(self, name)))

    def __len__(self):
        return len(self.t)

    def select(self, mask) -> EyeStream:
        return EyeStream(*(getattr(self, c)[mask] for c in EYE_COLUMNS))


@dataclass(frozen=True)
class FnirsStream:
    t: np.ndarray
    values: np.ndarray  # (n_samples, 8)

    def __post_init__(self):
        object.__setattr__(self, "t", _frozen(self.t))
        values = _frozen(self.values)
        if values.ndim != 2 or values.shape[1] != N_FNIRS_CHANNELS:
            raise MissingColumn(
                f"fNIRS stream needs exactly {N_FNIRS_CHANNELS} channels, got shape {values.shape}"
            )
        object.__setattr__(self, "values", values)

    def __len__(self):
        return len(self.t)

    def select(self, mask) -> FnirsStream:
        return FnirsStream(self.t[mask], self.values[mask])


@dataclass(frozen=True)
class PhaseMark:
    start: float
    end: float
    phase: Phase

    @property
    def duration(self) -> float:
        return self.end - self.start


@dataclass(frozen=True)
class RecordingSession:
    participant_id: str
    eye: EyeStream
    fnirs: FnirsStream
    phase_marks: tuple[PhaseMark, ...]
    eye_hz: float
    fnirs_hz: float


@dataclass(frozen=True)
class RawWindow:
    """One window of raw signal: eye samples at native rate, fNIRS on the aligned grid."""

    participant_id: str
    window_index: int
    phase: Phase
    start: float
    end: float
    eye: EyeStream
    fnirs_t: np.ndarray
    fnirs: np.ndarray  # (n_grid, 8)
    eye_hz: float
    align_hz: float

    @property
    def label(self) -> int:
        return self.phase.label


# ---------------------------------------------------------------------------
# timestamp reconstruction


def reconstruct_timestamps(t, nominal_hz=None, *, stream="stream"):
    """Return ``(order, t_clean, nominal_hz)`` for a raw timestamp column.

    ``order`` indexes the surviving rows (sorted, duplicates dropped keeping the
    first occurrence). When inter-sample jitter exceeds 10 % of the nominal
    period the timestamps are re-derived from the sample index.
    """
    t = np.asarray(t, dtype=float)
    if len(t) < 2:
        return np.arange(len(t)), t.copy(), nominal_hz or 0.0
    n_back = int(np.sum(np.diff(t) < 0))
    if n_back > MAX_OUT_OF_ORDER * len(t):
        raise NonMonotonicTimeUnfixable(
            f"{stream}: {n_back} of {len(t)} samples out of order (limit {MAX_OUT_OF_ORDER:.0%})"
        )
    order = np.argsort(t, kind="stable")
    ts = t[order]
    keep = np.concatenate([[True], np.diff(ts) > 0])
    n_dup = int(len(ts) - keep.sum())
    if n_dup:
        logger.info("%s: collapsed %d duplicate timestamps", stream, n_dup)
    order, ts = order[keep], ts[keep]
    if nominal_hz is None:
        nominal_hz = 1.0 / float(np.median(np.diff(ts)))
    period = 1.0 / nominal_hz
    if np.max(np.abs(np.diff(ts) - period)) > JITTER_TOLERANCE * period:
        logger.info("%s: jitter above %.0f%% of period, re-deriving timestamps", stream, 100 * JITTER_TOLERANCE)
        ts = ts[0] + np.arange(len(ts)) * period
    return order, ts, float(nominal_hz)


# ---------------------------------------------------------------------------
# loading / saving


def _read_csv(path: Path, columns: Sequence[str]) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise MissingColumn(f"{path.name}: empty file") from None
        if header != list(columns):
            missing = [c for c in columns if c not in header]
            extra = [c for c in header if c not in columns]
            raise MissingColumn(
                f"{path.name}: expected columns {list(columns)}, missing {missing}, unexpected {extra}"
            )
        rows = [[float(v) for v in row] for row in reader if row]
    return np.array(rows, dtype=float).reshape(-1, len(columns))


def _fmt(v: float) -> str:
    return repr(float(v))


def _write_csv(path: Path, columns: Sequence[str], data: np.ndarray) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(",".join(columns) + "\n")
        for row in data:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def _parse_phases(raw: Iterable[dict], source: str) -> tuple[PhaseMark, ...]:
    marks = []
    for item in raw:
        try:
            marks.append(PhaseMark(float(item["start"]), float(item["end"]), Phase(item["phase"])))
        except (KeyError, ValueError) as exc:
            raise MissingColumn(f"{source}: malformed phase entry {item!r} ({exc})") from None
    marks.sort(key=lambda m: m.start)
    for a, b in zip(marks, marks[1:]):
        if b.start < a.end:
            raise MissingColumn(f"{source}: phases {a.phase.value} and {b.phase.value} overlap")
    return tuple(marks)


def _phase_mask(t, marks):
    inside = np.zeros(len(t), dtype=bool)
    for m in marks:
        inside |= (t >= m.start) & (t < m.end)
    return inside


def build_session(participant_id, eye_table, fnirs_table, phase_marks, eye_hz=None, fnirs_hz=None):
    """Assemble a session from raw column tables, reconstructing timestamps."""
    order, t_eye, eye_hz = reconstruct_timestamps(eye_table[:, 0], eye_hz, stream=f"eye_{participant_id}")
    eye_rows = eye_table[order]
    order, t_nirs, fnirs_hz = reconstruct_timestamps(fnirs_table[:, 0], fnirs_hz, stream=f"fnirs_{participant_id}")
    nirs_rows = fnirs_table[order]

    eye = EyeStream(t_eye, eye_rows[:, 1], eye_rows[:, 2], eye_rows[:, 3], eye_rows[:, 4])
    fnirs = FnirsStream(t_nirs, nirs_rows[:, 1:])
    eye = eye.select(_phase_mask(eye.t, phase_marks))
    fnirs = fnirs.select(_phase_mask(fnirs.t, phase_marks))
    for m in phase_marks:
        for name, stream in (("eye", eye), ("fnirs", fnirs)):
            if not np.any((stream.t >= m.start) & (stream.t < m.end)):
                raise EmptyPhase(f"{participant_id}: {name} stream has no samples in phase {m.phase.value}")
    return RecordingSession(participant_id, eye, fnirs, tuple(phase_marks), eye_hz, fnirs_hz)


def load_session(path, format=None) -> RecordingSession:
    """Load one session.

    ``path`` is either a ``manifest_<pid>.json`` (csv format: the two modality
    CSVs are read from the same directory) or a single-file ``.json`` session
    holding the streams inline under ``eye`` and ``fnirs``.
    """
    path = Path(path)
    if not path.exists():
        raise MissingColumn(f"{path}: file not found")
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if format is None:
        format = "json" if "eye" in doc else "csv"
    try:
        pid = str(doc["participant_id"])
        phases = _parse_phases(doc["phases"], path.name)
    except KeyError as exc:
        raise MissingColumn(f"{path.name}: missing key {exc}") from None

    if format == "csv":
        eye_path = path.with_name(f"eye_{pid}.csv")
        fnirs_path = path.with_name(f"fnirs_{pid}.csv")
        for p in (eye_path, fnirs_path):
            if not p.exists():
                raise MissingColumn(f"{p.name}: file not found next to {path.name}")
        eye_table = _read_csv(eye_path, EYE_COLUMNS)
        fnirs_table = _read_csv(fnirs_path, FNIRS_COLUMNS)
    elif format == "json":
        try:
            eye_table = np.column_stack([doc["eye"][c] for c in EYE_COLUMNS]).astype(float)
            fnirs_table = np.column_stack([doc["fnirs"][c] for c in FNIRS_COLUMNS]).astype(float)
        except KeyError as exc:
            raise MissingColumn(f"{path.name}: missing column {exc}") from None
    else:
        raise ValueError(f"unknown session format {format!r}")
    return build_session(pid, eye_table, fnirs_table, phases, doc.get("eye_hz"), doc.get("fnirs_hz"))


def save_session(session: RecordingSession, directory) -> list[Path]:
    """Write the three schema files for ``session``; returns the paths written."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    pid = session.participant_id
    eye = session.eye
    eye_path = directory / f"eye_{pid}.csv"
    _write_csv(eye_path, EYE_COLUMNS, np.column_stack([getattr(eye, c) for c in EYE_COLUMNS]))
    fnirs_path = directory / f"fnirs_{pid}.csv"
    _write_csv(fnirs_path, FNIRS_COLUMNS, np.column_stack([session.fnirs.t, session.fnirs.values]))
    manifest = {
        "participant_id": pid,
        "phases": [{"start": m.start, "end": m.end, "phase": m.phase.value} for m in session.phase_marks],
        "eye_hz": session.eye_hz,
        "fnirs_hz": session.fnirs_hz,
    }
    manifest_path = directory / f"manifest_{pid}.json"
    with open(manifest_path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
    return [eye_path, fnirs_path, manifest_path]


def load_directory(directory) -> list[RecordingSession]:
    """Load every ``manifest_*.json`` session in ``directory``, sorted by participant id."""
    directory = Path(directory)
    manifests = sorted(directory.glob("manifest_*.json"))
    if not manifests:
        raise MissingColumn(f"{directory}: no manifest_<pid>.json files found")
    return [load_session(p) for p in manifests]


# ---------------------------------------------------------------------------
# windowing


def window_count(duration, window_s=10.0, overlap=0.5):
    step = window_s * (1.0 - overlap)
    if duration < window_s - 1e-9:
        return 0
    return int(math.floor((duration - window_s) / step + 1e-9)) + 1


def window_bounds(mark: PhaseMark, window_s=10.0, overlap=0.5):
    """Start/end times of every window lying fully inside ``mark``."""
    if mark.duration < window_s - 1e-9:
        raise PhaseTooShort(
            f"{mark.phase.value} phase lasts {mark.duration:g} s, shorter than one {window_s:g} s window"
        )
    step = window_s * (1.0 - overlap)
    n = window_count(mark.duration, window_s, overlap)
    starts = mark.start + step * np.arange(n)
    return [(float(s), float(s + window_s)) for s in starts]


def resample_linear(t, values, grid):
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        return np.interp(grid, t, values)
    return np.column_stack([np.interp(grid, t, values[:, j]) for j in range(values.shape[1])])


def segment_windows(session: RecordingSession, window_s=10.0, overlap=0.5, align_hz=10.0) -> list[RawWindow]:
    """Cut a session into overlapping windows, dropping the induction phase.

    Windows never straddle a phase boundary. Eye samples stay at their native
    rate; fNIRS is linearly interpolated onto an ``align_hz`` grid.
    """
    if window_s <= 0:
        raise ValueError("window_s must be positive")
    if not 0 <= overlap < 1:
        raise ValueError("overlap must lie in [0, 1)")
    n_grid = int(round(window_s * align_hz))
    out = []
    index = 0
    for mark in session.phase_marks:
        if mark.phase is Phase.INDUCTION:
            continue
        for a, b in window_bounds(mark, window_s, overlap):
            eye = session.eye.select((session.eye.t >= a) & (session.eye.t < b))
            grid = a + np.arange(n_grid) / align_hz
            fnirs = resample_linear(session.fnirs.t, session.fnirs.values, grid)
            out.append(
                RawWindow(session.participant_id, index, mark.phase, a, b, eye, grid, fnirs,
                          session.eye_hz, align_hz)
            )
            index += 1
    return out


# ---------------------------------------------------------------------------
# synthetic cohorts


@dataclass(frozen=True)
class SyntheticCohortSpec:
    """Generator settings for a synthetic cohort.

    Four latent drivers (oculomotor dynamics, gaze stability, prefrontal
    activity, cross-modal arousal) shift by ``concept_effect_sizes`` SD units
    between the alert and post phases. ``noise_grade`` optionally gives each
    subject its own within-subject latent noise SD, which degrades that
    subject's class separability.
    """

    n_subjects: int = 6
    windows_per_phase: int = 20
    concept_effect_sizes: tuple[float, ...] = (1.5, 1.5, 1.5, 1.5)
    subject_noise_sd: float = 0.0
    polarity_flips: float = 0.0
    seed: int = 42
    noise_grade: tuple[float, ...] | None = None
    window_s: float = 10.0
    overlap: float = 0.5
    induction_s: float = 30.0
    eye_hz: float = 100.0
    fnirs_hz: float = 7.8125

    def validate(self) -> None:
        if self.n_subjects < 2:
            raise InvalidSpec(f"n_subjects must be >= 2, got {self.n_subjects}")
        if self.windows_per_phase < 4:
            raise InvalidSpec(f"windows_per_phase must be >= 4, got {self.windows_per_phase}")
        if len(self.concept_effect_sizes) != 4 or not all(np.isfinite(self.concept_effect_sizes)):
            raise InvalidSpec("concept_effect_sizes must be 4 finite reals")
        if not (self.subject_noise_sd >= 0 and np.isfinite(self.subject_noise_sd)):
            raise InvalidSpec("subject_noise_sd must be a finite non-negative real")
        if not 0 <= self.polarity_flips <= 1:
            raise InvalidSpec("polarity_flips must be a probability")
        if self.noise_grade is not None:
            if len(self.noise_grade) != self.n_subjects or min(self.noise_grade) < 0:
                raise InvalidSpec("noise_grade needs one non-negative SD per subject")
        if self.window_s <= 0 or not 0 <= self.overlap < 1 or self.induction_s < 0:
            raise InvalidSpec("invalid window geometry")
        if self.eye_hz <= 0 or self.fnirs_hz <= 0:
            raise InvalidSpec("sampling rates must be positive")

    @property
    def phase_s(self) -> float:
        return self.window_s + (self.windows_per_phase - 1) * self.window_s * (1 - self.overlap)


LATENT_HZ = 10.0
LATENT_PHI = 0.9
SLOW_NOISE_PHI = 0.99


def _ar1(rng, n, phi, sd=1.0):
    """Stationary AR(1) with marginal standard deviation ``sd``."""
    innov = rng.standard_normal(n) * sd * math.sqrt(1 - phi * phi)
    x = np.empty(n)
    x[0] = rng.standard_normal() * sd
    # lfilter runs the recursion x[k] = phi x[k-1] + e[k]
    x[1:] = signal.lfilter([1.0], [1.0, -phi], innov[1:], zi=[phi * x[0]])[0]
    return x


def _band_noise(rng, n, fs, lo, hi):
    sos = signal.butter(2, [lo, hi], btype="bandpass", fs=fs, output="sos")
    pad = int(4 * fs / lo)
    x = signal.sosfilt(sos, rng.standard_normal(n + pad))[pad:]
    return x / np.std(x)


def _subject_session(spec: SyntheticCohortSpec, index: int) -> RecordingSession:
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, index]))
    pid = f"S{index + 1:02d}"
    phase_s = spec.phase_s
    marks = (
        PhaseMark(0.0, phase_s, Phase.ALERT),
        PhaseMark(phase_s, phase_s + spec.induction_s, Phase.INDUCTION),
        PhaseMark(phase_s + spec.induction_s, 2 * phase_s + spec.induction_s, Phase.POST),
    )
    total = marks[-1].end

    # latent drivers on a 10 Hz grid
    t_lat = np.arange(int(math.ceil(total * LATENT_HZ)) + 2) / LATENT_HZ
    effect = np.asarray(spec.concept_effect_sizes, dtype=float).copy()
    if spec.polarity_flips > 0 and rng.random() < spec.polarity_flips:
        effect[rng.integers(4)] *= -1
    else:
        rng.random(), rng.integers(4)  # keep downstream draws aligned across flip settings
    offsets = rng.standard_normal(4) * spec.subject_noise_sd
    grade = 0.0 if spec.noise_grade is None else float(spec.noise_grade[index])
    shift = np.where(t_lat >= marks[2].start, 1.0,
                     np.where(t_lat >= marks[1].start, (t_lat - marks[1].start) / max(spec.induction_s, 1e-9), 0.0))
    latents = np.empty((4, len(t_lat)))
    for k in range(4):
        slow = _ar1(rng, len(t_lat), SLOW_NOISE_PHI, grade)
        latents[k] = _ar1(rng, len(t_lat), LATENT_PHI) + effect[k] * shift + offsets[k] + slow
    ocul, stab, pref, cross = latents

    # eye stream at native rate
    n_eye = int(round(total * spec.eye_hz))
    t_eye = np.arange(n_eye) / spec.eye_hz
    lat_eye = [np.interp(t_eye, t_lat, lat) for lat in latents]
    dt = 1.0 / spec.eye_hz

    jitter_sd = 0.05 * np.exp(0.35 * lat_eye[0])
    drift_sd = 0.4 * np.exp(0.35 * lat_eye[1])
    sacc_rate = 0.8 * np.exp(0.3 * lat_eye[0])
    gaze = np.zeros((n_eye, 2))
    pos = np.zeros(2)
    drift_dir = rng.standard_normal((n_eye, 2))
    sacc_draw = rng.random(n_eye)
    sacc_amp = rng.uniform(2.0, 8.0, n_eye)
    sacc_ang = rng.uniform(0, 2 * np.pi, n_eye)
    for i in range(n_eye):
        pos = pos + drift_dir[i] * drift_sd[i] * math.sqrt(dt)
        if sacc_draw[i] < sacc_rate[i] * dt:
            step = sacc_amp[i] * np.array([math.cos(sacc_ang[i]), math.sin(sacc_ang[i])])
            if np.linalg.norm(pos + step) > 12.0:
                step = -step
            pos = pos + step
        gaze[i] = pos
    # saccades take a few samples rather than one
    gaze = signal.lfilter(np.ones(3) / 3, [1.0], gaze, axis=0)
    gaze += rng.standard_normal((n_eye, 2)) * jitter_sd[:, None]

    hippus = _band_noise(rng, n_eye, spec.eye_hz, 0.05, 1.5)
    pupil = 4.0 + 0.12 * np.exp(0.35 * lat_eye[3]) * hippus + 0.01 * rng.standard_normal(n_eye)
    valid = np.ones(n_eye)
    blink_rate = 0.25 * np.exp(0.2 * lat_eye[1])
    blink_dur = 0.15 * np.exp(0.25 * lat_eye[1])
    blink_draw = rng.random(n_eye)
    i = 0
    while i < n_eye:
        if blink_draw[i] < blink_rate[i] * dt:
            n_closed = max(1, int(round(blink_dur[i] * spec.eye_hz)))
            pupil[i:i + n_closed] = 0.0
            valid[i:i + n_closed] = 0.0
            i += n_closed + int(0.5 * spec.eye_hz)
        else:
            i += 1

    # fNIRS at native rate, 8 channels
    n_nirs = int(round(total * spec.fnirs_hz))
    t_nirs = np.arange(n_nirs) / spec.fnirs_hz
    pref_n = np.interp(t_nirs, t_lat, pref)
    cross_n = np.interp(t_nirs, t_lat, cross)
    hemo_amp = np.exp(-0.35 * pref_n)
    fast_amp = 0.5 * np.exp(0.35 * cross_n)
    shared_hemo = _band_noise(rng, n_nirs, spec.fnirs_hz, 0.02, 0.09)
    shared_fast = _band_noise(rng, n_nirs, spec.fnirs_hz, 0.1, 0.19)
    gains = rng.uniform(0.7, 1.3, N_FNIRS_CHANNELS)
    fnirs = np.empty((n_nirs, N_FNIRS_CHANNELS))
    for ch in range(N_FNIRS_CHANNELS):
        own = _band_noise(rng, n_nirs, spec.fnirs_hz, 0.02, 0.15)
        fnirs[:, ch] = gains[ch] * (hemo_amp * (0.8 * shared_hemo + 0.6 * own) + fast_amp * shared_fast)
        fnirs[:, ch] += 0.05 * rng.standard_normal(n_nirs) + 10.0
    eye = EyeStream(t_eye, gaze[:, 0], gaze[:, 1], pupil, valid)
    return RecordingSession(pid, eye, FnirsStream(t_nirs, fnirs), marks, spec.eye_hz, spec.fnirs_hz)


def generate_synthetic_cohort(spec: SyntheticCohortSpec) -> list[RecordingSession]:
    """Deterministic synthetic cohort; subject ``i`` draws from ``SeedSequence([seed, i])``."""
    spec.validate()
    return [_subject_session(spec, i) for i in range(spec.n_subjects)]
