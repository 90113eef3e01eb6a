"""Per-window feature extraction and the feature-table CSV contract."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage, stats

from ..dataio import Phase, RawWindow, RecordingSession, resample_linear, window_bounds
from ..exceptions import MissingColumn, NoChannels, TooFewValidSamples, TooShort
from .complexity import hurst_rs, outlier_proportion, sample_entropy
from .preprocess import FilteredChannels, BlinkEvent, band_power, preprocess_fnirs, preprocess_pupil
from .schema import EYELID_FEATURES, FEATURE_NAMES, N_FEATURES

PUPIL_LF = (0.04, 0.15)
PUPIL_HF = (0.15, 0.5)
FNIRS_VLF = (0.01, 0.04)
FNIRS_LF = (0.04, 0.1)
FNIRS_HF = (0.1, 0.2)
SACCADE_VELOCITY = 30.0  # deg/s
SMOOTH_SAMPLES = 5
GRID_BINS = 8


@dataclass(frozen=True)
class FnirsMontage:
    """Channel groupings (0-based) used by the symmetry block; each channel is its own ROI."""

    left: tuple[int, ...] = (0, 1, 2, 3)
    right: tuple[int, ...] = (4, 5, 6, 7)
    anterior: tuple[int, ...] = (0, 1, 4, 5)
    posterior: tuple[int, ...] = (2, 3, 6, 7)


DEFAULT_MONTAGE = FnirsMontage()


def _ratio(a, b):
    return a / b if b > 0 else 0.0


def _std_corr(a, b):
    if np.std(a) == 0 or np.std(b) == 0:
        return 0.0
    return float(np.corrcoef(a, b)[0, 1])


def _moments(x):
    x = np.asarray(x, dtype=float)
    if np.std(x) == 0:
        return float(np.mean(x)), 0.0, 0.0, 0.0
    return (float(np.mean(x)), float(np.std(x)),
            float(stats.skew(x)), float(np.ptp(x)))


def _mean_std_max(x):
    if len(x) == 0:
        return 0.0, 0.0, 0.0
    return float(np.mean(x)), float(np.std(x)), float(np.max(x))


def extract_pupil_features(clean, fs) -> np.ndarray:
    """16 pupil features in schema order."""
    x = np.asarray(clean, dtype=float)
    if len(x) < 3:
        raise TooShort("pupil features need at least 3 samples")
    mu, sd = float(np.mean(x)), float(np.std(x))
    if sd > 0:
        skew, kurt = float(stats.skew(x)), float(stats.kurtosis(x))
    else:
        skew = kurt = 0.0
    d1 = np.abs(np.diff(x)) * fs
    d2 = np.abs(np.diff(x, 2)) * fs * fs
    lf, hf = band_power(x, fs, [PUPIL_LF, PUPIL_HF])
    out = [mu, sd, float(np.ptp(x)), skew, kurt,
           *_mean_std_max(d1), *_mean_std_max(d2),
           lf, hf, _ratio(lf, hf),
           sample_entropy(x),
           sd / abs(mu) if mu != 0 else 0.0]
    return np.array(out, dtype=float)


def spatial_entropy(x, y, bins=GRID_BINS):
    """Shannon entropy of an 8x8 occupancy grid over the bounding box, scaled to [0, 1]."""
    xr = (x.min(), x.max()) if np.ptp(x) > 0 else (x.min() - 0.5, x.min() + 0.5)
    yr = (y.min(), y.max()) if np.ptp(y) > 0 else (y.min() - 0.5, y.min() + 0.5)
    hist, _, _ = np.histogram2d(x, y, bins=bins, range=[xr, yr])
    p = hist.ravel() / hist.sum()
    p = p[p > 0]
    return float(-(p * np.log(p)).sum() / math.log(bins * bins))


def extract_oculomotor_features(t, gx, gy, valid=None, window_s=None) -> np.ndarray:
    """18 gaze features in schema order from native-rate samples."""
    t = np.asarray(t, dtype=float)
    gx = np.asarray(gx, dtype=float)
    gy = np.asarray(gy, dtype=float)
    if valid is not None:
        ok = np.asarray(valid) > 0.5
        if len(ok) == 0 or ok.mean() < 0.5:
            raise TooFewValidSamples(f"only {ok.mean() if len(ok) else 0:.0%} of gaze samples valid")
        t, gx, gy = t[ok], gx[ok], gy[ok]
    if len(t) < SMOOTH_SAMPLES + 1:
        raise TooShort("too few gaze samples for kinematics")
    if window_s is None:
        window_s = t[-1] - t[0] + np.median(np.diff(t))

    sx = ndimage.uniform_filter1d(gx, SMOOTH_SAMPLES, mode="nearest")
    sy = ndimage.uniform_filter1d(gy, SMOOTH_SAMPLES, mode="nearest")
    vx, vy = np.gradient(sx, t), np.gradient(sy, t)
    speed = np.hypot(vx, vy)
    ax, ay = np.gradient(vx, t), np.gradient(vy, t)
    acc = np.hypot(ax, ay)

    above = speed > SACCADE_VELOCITY
    n_saccades = int(np.sum(np.diff(above.astype(np.int8)) == 1) + above[0])

    moving = speed > 1e-12
    theta = np.arctan2(vy[moving], vx[moving])
    dtheta = np.abs(np.angle(np.exp(1j * np.diff(theta)))) if len(theta) > 1 else np.zeros(0)

    out = [
        float(np.std(gx)), float(np.std(gy)), _std_corr(gx, gy), spatial_entropy(gx, gy),
        float(speed.mean()), float(speed.std()), float(speed.max()), float(np.percentile(speed, 90)),
        *_mean_std_max(acc),
        n_saccades / window_s, float(np.mean(~above)),
        float(np.polyfit(t, gx, 1)[0]), float(np.polyfit(t, gy, 1)[0]),
        float(dtheta.mean()) if len(dtheta) else 0.0, float(dtheta.std()) if len(dtheta) else 0.0,
        sample_entropy(speed),
    ]
    return np.array(out, dtype=float)


def extract_eyelid_features(events: Sequence[BlinkEvent], window_s) -> np.ndarray:
    """8 blink features: rate (/min), duration mean/std, inter-blink interval
    mean/std, PERCLOS total and duration-weighted, and maximum duration."""
    if not events:
        return np.zeros(len(EYELID_FEATURES))
    dur = np.array([e.duration for e in events])
    ibi = np.array([b.start - a.end for a, b in zip(events, events[1:])])
    ibi_mean, ibi_std = (float(ibi.mean()), float(ibi.std())) if len(ibi) else (0.0, 0.0)
    weighted = float(np.sum(dur * dur / dur.max()))
    out = [len(events) / window_s * 60.0, float(dur.mean()), float(dur.std()), ibi_mean, ibi_std,
           float(dur.sum()) / window_s, weighted / window_s, float(dur.max())]
    return np.array(out, dtype=float)


def _slope(y, fs):
    return float(np.polyfit(np.arange(len(y)) / fs, y, 1)[0]) if len(y) > 1 else 0.0


def _pair_stats(a, b, fs):
    diff = a - b
    return [float(diff.mean()), float(diff.std()), _slope(diff, fs), _std_corr(a, b)]


def extract_fnirs_features(filtered: FilteredChannels, fs, montage: FnirsMontage = DEFAULT_MONTAGE) -> np.ndarray:
    """48 fNIRS features in schema order; pruned channels contribute zeros."""
    x, kept = filtered.values, filtered.kept
    if not kept.any():
        raise NoChannels("no surviving fNIRS channels")
    if len(x) < 3:
        raise TooShort("fNIRS features need at least 3 samples")
    m = x[:, kept].mean(axis=1)
    dm = np.diff(m) * fs
    vlf, lf, hf = band_power(m, fs, [FNIRS_VLF, FNIRS_LF, FNIRS_HF])
    out = [*_moments(m), *_moments(dm), vlf, lf, hf, _ratio(lf, hf), _ratio(vlf, lf)]
    for ch in range(x.shape[1]):
        if kept[ch]:
            c = x[:, ch]
            out += [float(c.mean()), float(c.std()), sample_entropy(c)]
        else:
            out += [0.0, 0.0, 0.0]

    def side(chs):
        chs = [c for c in chs if kept[c]]
        return x[:, chs].mean(axis=1) if chs else None

    for a, b in ((montage.left, montage.right), (montage.anterior, montage.posterior)):
        sa, sb = side(a), side(b)
        out += _pair_stats(sa, sb, fs) if sa is not None and sb is not None else [0.0] * 4
    out += [sample_entropy(m), hurst_rs(m), outlier_proportion(m)]
    return np.array(out, dtype=float)


@dataclass(frozen=True)
class FeatureWindow:
    participant_id: str
    window_index: int
    phase: Phase
    values: np.ndarray  # (90,), schema order
    channel_mask: tuple[bool, ...] = (True,) * 8

    @property
    def label(self) -> int:
        return self.phase.label

    @property
    def features(self) -> dict[str, float]:
        return dict(zip(FEATURE_NAMES, self.values.tolist()))


def assemble(pupil, oculo, eyelid, fnirs) -> np.ndarray:
    """Concatenate the four blocks and zero any non-finite entry."""
    v = np.concatenate([pupil, oculo, eyelid, fnirs])
    assert v.shape == (N_FEATURES,)
    return np.nan_to_num(v, nan=0.0, posinf=0.0, neginf=0.0)


def extract_window_features(window: RawWindow, montage: FnirsMontage = DEFAULT_MONTAGE) -> FeatureWindow:
    """Preprocess and featurize a single raw window in isolation."""
    eye = window.eye
    window_s = window.end - window.start
    clean, events = preprocess_pupil(eye.pupil, window.eye_hz, t0=window.start)
    filtered = preprocess_fnirs(window.fnirs, window.align_hz)
    v = assemble(
        extract_pupil_features(clean, window.eye_hz),
        extract_oculomotor_features(eye.t, eye.gx, eye.gy, eye.valid, window_s),
        extract_eyelid_features(events, window_s),
        extract_fnirs_features(filtered, window.align_hz, montage),
    )
    return FeatureWindow(window.participant_id, window.window_index, window.phase, v,
                         tuple(bool(k) for k in filtered.kept))


def _clip_events(events, a, b):
    out = []
    for e in events:
        s, f = max(e.start, a), min(e.end, b)
        if f > s:
            out.append(BlinkEvent(s, f))
    return out


def extract_session_features(session: RecordingSession, window_s=10.0, overlap=0.5, align_hz=10.0,
                             montage: FnirsMontage = DEFAULT_MONTAGE) -> list[FeatureWindow]:
    """Featurize every alert/post window of a session.

    Filtering and blink detection run over each whole phase (a 0.01 Hz
    high-pass is meaningless on a 10 s slice); windows are cut afterwards
    using the same bounds as :func:`nesyfatigue.dataio.segment_windows`.
    """
    out = []
    index = 0
    n_grid = int(round(window_s * align_hz))
    for mark in session.phase_marks:
        if mark.phase is Phase.INDUCTION:
            continue
        bounds = window_bounds(mark, window_s, overlap)
        in_phase = (session.eye.t >= mark.start) & (session.eye.t < mark.end)
        eye = session.eye.select(in_phase)
        clean, events = preprocess_pupil(eye.pupil, session.eye_hz, t0=float(eye.t[0]))
        grid = mark.start + np.arange(int(math.floor(mark.duration * align_hz + 1e-9))) / align_hz
        filtered = preprocess_fnirs(resample_linear(session.fnirs.t, session.fnirs.values, grid), align_hz)
        for a, b in bounds:
            sel = (eye.t >= a) & (eye.t < b)
            j0 = int(round((a - mark.start) * align_hz))
            win = FilteredChannels(filtered.values[j0:j0 + n_grid], filtered.kept)
            v = assemble(
                extract_pupil_features(clean[sel], session.eye_hz),
                extract_oculomotor_features(eye.t[sel], eye.gx[sel], eye.gy[sel], eye.valid[sel], window_s),
                extract_eyelid_features(_clip_events(events, a, b), window_s),
                extract_fnirs_features(win, align_hz, montage),
            )
            out.append(FeatureWindow(session.participant_id, index, mark.phase, v,
                                     tuple(bool(k) for k in filtered.kept)))
            index += 1
    return out


# ---------------------------------------------------------------------------
# feature tables


@dataclass(frozen=True)
class FeatureTable:
    """Row-aligned feature matrix with participant ids, labels and window indices."""

    X: np.ndarray
    y: np.ndarray
    groups: np.ndarray
    window_index: np.ndarray

    def __post_init__(self):
        n = len(self.X)
        if self.X.ndim != 2 or self.X.shape[1] != N_FEATURES:
            raise MissingColumn(f"feature matrix must have {N_FEATURES} columns, got {self.X.shape}")
        if not (len(self.y) == len(self.groups) == len(self.window_index) == n):
            raise ValueError("row count mismatch")

    def __len__(self):
        return len(self.X)

    @classmethod
    def from_windows(cls, windows: Sequence[FeatureWindow]) -> FeatureTable:
        return cls(
            np.array([w.values for w in windows], dtype=float).reshape(-1, N_FEATURES),
            np.array([w.label for w in windows], dtype=int),
            np.array([w.participant_id for w in windows], dtype=object),
            np.array([w.window_index for w in windows], dtype=int),
        )

    @property
    def subjects(self) -> list[str]:
        return sorted(set(self.groups.tolist()))

    def subset(self, mask) -> FeatureTable:
        return FeatureTable(self.X[mask], self.y[mask], self.groups[mask], self.window_index[mask])

    def subject(self, pid) -> FeatureTable:
        return self.subset(self.groups == pid)

    def keys(self) -> list[tuple[str, int]]:
        return list(zip(self.groups.tolist(), self.window_index.tolist()))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            fh.write(",".join(FEATURE_NAMES + ("participant_id", "label")) + "\n")
            for row, pid, lab in zip(self.X, self.groups, self.y):
                fh.write(",".join(repr(float(v)) for v in row) + f",{pid},{int(lab)}\n")

    @classmethod
    def from_csv(cls, path) -> FeatureTable:
        """Read a feature CSV; window indices are row order within each participant."""
        path = Path(path)
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            expected = list(FEATURE_NAMES) + ["participant_id", "label"]
            if header != expected:
                missing = [c for c in expected if header is None or c not in header]
                raise MissingColumn(f"{path.name}: header does not match the feature schema (missing {missing[:5]})")
            X, y, groups = [], [], []
            for row in reader:
                if not row:
                    continue
                X.append([float(v) for v in row[:N_FEATURES]])
                groups.append(row[N_FEATURES])
                y.append(int(row[N_FEATURES + 1]))
        counters: dict[str, int] = {}
        index = []
        for pid in groups:
            index.append(counters.get(pid, 0))
            counters[pid] = index[-1] + 1
        return cls(np.array(X, dtype=float).reshape(-1, N_FEATURES), np.array(y, dtype=int),
                   np.array(groups, dtype=object), np.array(index, dtype=int))


def extract_cohort(sessions, jobs=1, **kwargs) -> FeatureTable:
    """Featurize several sessions into one table (rows grouped by session order)."""
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        from functools import partial

        with ProcessPoolExecutor(jobs) as pool:
            per = list(pool.map(partial(extract_session_features, **kwargs), sessions))
    else:
        per = [extract_session_features(s, **kwargs) for s in sessions]
    return FeatureTable.from_windows([w for ws in per for w in ws])
