"""Leave-one-subject-out harness, fidelity audit, paired statistics and ablations."""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from .estimator import NeSyClassifier
from .exceptions import (AllZeroDifferences, FoldFailed, LeakageDetected, NesyError, SingleClassSubject,
                         TooFewPairs, TooFewSubjects)
from .features import FeatureTable
from .fuzzy import OperatorFamily
from .model import CONCEPT_NAMES, N_CONCEPTS
from .normalize import ParticipantNormalizer, Strategy, make_strategy
from .train import TrainConfig, config_dict

DEFAULT_SEEDS = (42, 123, 456)
SUITES = ("normalization", "concepts", "operators", "thresholds")
FIDELITY_COLUMNS = ("ID", "Acc", "C-Fid", "R-Fid", "R1", "R2", "R3")


@dataclass(frozen=True)
class LosoConfig:
    """Everything that defines one LOSO run apart from the data and seeds."""

    strategy: str = "participant"
    operator_family: str = "product"
    head: str = "logic"
    learn_thresholds: bool = True
    train: TrainConfig = field(default_factory=TrainConfig)
    epsilon: float = 1e-6
    train_rule: str = "participant"
    include_calibration: bool = True
    tag: str = "base"

    def __post_init__(self):
        object.__setattr__(self, "strategy", Strategy.parse(self.strategy).value)
        object.__setattr__(self, "operator_family", OperatorFamily.parse(self.operator_family).value)
        if self.head not in ("logic", "linear"):
            raise ValueError(f"head must be 'logic' or 'linear', got {self.head!r}")

    def make_estimator(self, seed) -> NeSyClassifier:
        t = self.train
        return NeSyClassifier(operator_family=self.operator_family, head=self.head,
                              learn_thresholds=self.learn_thresholds, lambda_div=t.lambda_div,
                              lambda_sparse=t.lambda_sparse, lr=t.lr, weight_decay=t.weight_decay,
                              batch_size=t.batch_size, max_epochs=t.max_epochs, patience=t.patience,
                              grad_clip=t.grad_clip, val_fraction=t.val_fraction, random_state=int(seed))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train"] = config_dict(self.train)
        return d


@dataclass
class SeedTrace:
    """Inference-time activations of one trained model on the held-out windows."""

    C: np.ndarray
    Ct: np.ndarray | None
    f: np.ndarray | None
    yhat: np.ndarray


@dataclass
class FoldReport:
    held_out_subject: str
    seeds: tuple[int, ...]
    seed_accuracies: tuple[float, ...]
    accuracy: float
    window_index: np.ndarray
    y: np.ndarray
    calibration: np.ndarray  # True for windows that fed the subject's baseline
    predictions: np.ndarray  # (n_seeds, n_windows)
    traces: list[SeedTrace] | None
    strategy: str
    operator_family: str
    tag: str = "base"
    knockout_accuracies: dict[int, tuple[float, ...]] = field(default_factory=dict)
    best_epochs: tuple[int, ...] = ()

    def knockout_accuracy(self, concept) -> float:
        return float(np.mean(self.knockout_accuracies[concept]))

    def to_dict(self, with_windows=False) -> dict:
        d = {"held_out_subject": self.held_out_subject, "seeds": list(self.seeds),
             "seed_accuracies": list(self.seed_accuracies), "accuracy": self.accuracy,
             "n_windows": int(len(self.y)), "n_calibration": int(self.calibration.sum()),
             "strategy": self.strategy, "operator_family": self.operator_family, "tag": self.tag,
             "best_epochs": list(self.best_epochs),
             "knockout_accuracies": {CONCEPT_NAMES[k]: list(v) for k, v in sorted(self.knockout_accuracies.items())}}
        if with_windows:
            d["window_index"] = self.window_index.tolist()
            d["y"] = self.y.tolist()
            d["predictions"] = self.predictions.tolist()
        return d


def _score(pred, y, keep):
    return float(np.mean(pred[keep] == y[keep]))


def check_leakage(train_groups, test_subject, normalizer: ParticipantNormalizer | None = None, test_keys=()):
    """Raise :class:`LeakageDetected` unless the fold is clean.

    Clean means no training row belongs to the held-out subject and, when a
    normalizer is given, none of the held-out subject's fatigued windows is
    in its provenance.
    """
    if np.any(np.asarray(train_groups, dtype=object) == test_subject):
        raise LeakageDetected(f"held-out subject {test_subject!r} appears in the training rows")
    if normalizer is None:
        return
    fatigued = {(p, w, lab) for p, w, lab in test_keys if lab == 1}
    bad = fatigued & normalizer.provenance
    if bad:
        raise LeakageDetected(f"{len(bad)} fatigued windows of {test_subject!r} fed a normalizer")
    if normalizer.strategy_ is not Strategy.PARTICIPANT:
        if any(p == test_subject for p, _, _ in normalizer.provenance):
            raise LeakageDetected(f"{test_subject!r} windows fed a strategy without calibration")


def normalize_fold(table: FeatureTable, test_subject, config: LosoConfig):
    """Fit the fold's normalizer; returns ``(X_train, X_test, train_mask, calibration_mask, normalizer)``."""
    test = table.groups == test_subject
    train = ~test
    alert = test & (table.y == 0)
    calibration = None
    if Strategy.parse(config.strategy) is Strategy.PARTICIPANT:
        calibration = (table.X[alert], test_subject, table.window_index[alert])
    norm = make_strategy(config.strategy, table.X[train], table.y[train], table.groups[train],
                         table.window_index[train], calibration, config.epsilon, config.train_rule)
    test_keys = zip(table.groups[test].tolist(), table.window_index[test].tolist(), table.y[test].tolist())
    check_leakage(table.groups[train], test_subject, norm, list(test_keys))
    X_train = norm.transform(table.X[train], table.groups[train])
    X_test = norm.transform(table.X[test], table.groups[test])
    calib_mask = alert[test] if calibration is not None else np.zeros(test.sum(), dtype=bool)
    return X_train, X_test, train, calib_mask, norm


def _run_fold(table: FeatureTable, subject, config: LosoConfig, seeds, knockouts=(),
              estimator_factory: Callable | None = None) -> FoldReport:
    X_train, X_test, train, calib, _ = normalize_fold(table, subject, config)
    y_train, groups_train = table.y[train], table.groups[train]
    test = ~train
    y_test = table.y[test]
    order = np.argsort(table.window_index[test], kind="stable")
    X_test, y_test, calib = X_test[order], y_test[order], calib[order]
    keep = np.ones(len(y_test), dtype=bool) if config.include_calibration else ~calib
    preds, accs, traces, epochs = [], [], [], []
    ko = {k: [] for k in knockouts}
    for seed in seeds:
        est = estimator_factory(seed) if estimator_factory is not None else config.make_estimator(seed)
        if isinstance(est, NeSyClassifier):
            est.fit(X_train, y_train, groups=groups_train)
            tr = est.explain(X_test)
            traces.append(SeedTrace(tr.C, tr.Ct, tr.f, tr.yhat))
            pred = tr.predictions
            epochs.append(est.training_log_.best_epoch)
            for k in knockouts:
                ko[k].append(_score(est.predict(X_test, knockout=(k,)), y_test, keep))
        else:
            est.fit(X_train, y_train)
            pred = np.asarray(est.predict(X_test)).astype(int)
        preds.append(pred)
        accs.append(_score(pred, y_test, keep))
    return FoldReport(subject, tuple(int(s) for s in seeds), tuple(accs), float(np.mean(accs)),
                      table.window_index[test][order], y_test, calib, np.array(preds),
                      traces if traces else None, config.strategy, config.operator_family, config.tag,
                      {k: tuple(v) for k, v in ko.items()}, tuple(epochs))


def _fold_job(args):
    table, subject, config, seeds, knockouts, factory = args
    try:
        return _run_fold(table, subject, config, seeds, knockouts, factory)
    except NesyError as exc:
        raise FoldFailed(subject, exc) from exc


def run_loso(table: FeatureTable, config: LosoConfig = LosoConfig(), seeds: Sequence[int] = DEFAULT_SEEDS,
             knockouts: Sequence[int] = (), estimator_factory: Callable | None = None,
             jobs: int = 1) -> list[FoldReport]:
    """One fold per subject; each fold trains one model per seed and averages.

    ``estimator_factory(seed)`` swaps in any scikit-learn classifier (traces
    and knockouts are then unavailable). ``knockouts`` lists concept indices
    to zero at inference on the same trained models.
    """
    subjects = table.subjects
    if len(subjects) < 2:
        raise TooFewSubjects(f"LOSO needs at least 2 subjects, got {len(subjects)}")
    if not seeds:
        raise ValueError("at least one seed is required")
    work = [(table, s, config, tuple(seeds), tuple(knockouts), estimator_factory) for s in subjects]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            folds = list(pool.map(_fold_job, work))
    else:
        folds = [_fold_job(w) for w in work]
    return sorted(folds, key=lambda f: f.held_out_subject)


def t_interval(values, level=0.95):
    """Student-t confidence interval for the mean (n - 1 degrees of freedom)."""
    values = np.asarray(values, dtype=float)
    n = len(values)
    mean = float(values.mean())
    if n < 2:
        return mean, mean
    half = stats.t.ppf(0.5 + level / 2, n - 1) * values.std(ddof=1) / math.sqrt(n)
    return mean - float(half), mean + float(half)


def summarize(folds: Sequence[FoldReport]) -> dict:
    """Cross-fold mean, SD (ddof = 1) and 95 % t-interval of seed-averaged accuracy."""
    acc = np.array([f.accuracy for f in folds])
    lo, hi = t_interval(acc)
    return {"n_folds": len(folds), "mean": float(acc.mean()),
            "sd": float(acc.std(ddof=1)) if len(acc) > 1 else 0.0, "ci95": [lo, hi]}


# ---------------------------------------------------------------------------
# fidelity audit


def point_biserial(x, y) -> float:
    """Correlation of a continuous ``x`` with binary ``y``; 0 if either is constant.

    Uses the closed form ``(m1 - m0) / s * sqrt(p q)`` with population SD.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y).astype(bool)
    s = x.std()
    p = y.mean()
    if s == 0 or p in (0.0, 1.0):
        return 0.0
    r = (x[y].mean() - x[~y].mean()) / s * math.sqrt(p * (1 - p))
    return float(np.clip(r, -1.0, 1.0))


def _require_both_classes(y, what="subject"):
    if len(np.unique(y)) < 2:
        raise SingleClassSubject(f"{what} needs both alert and fatigued windows")


def concept_fidelity(C, y):
    """Mean absolute point-biserial correlation over the concept columns.

    Returns ``(phi, r)`` with ``r`` the signed per-concept correlations.
    """
    y = np.asarray(y)
    _require_both_classes(y)
    C = np.asarray(C, dtype=float).reshape(len(y), -1)
    r = np.array([point_biserial(C[:, i], y) for i in range(C.shape[1])])
    return float(np.mean(np.abs(r))), r


def rule_discrimination(f, y) -> np.ndarray:
    """Mean firing on fatigued windows minus mean firing on alert windows, per rule."""
    y = np.asarray(y).astype(bool)
    _require_both_classes(y)
    f = np.asarray(f, dtype=float).reshape(len(y), -1)
    return f[y].mean(axis=0) - f[~y].mean(axis=0)


def cohens_d(d_per_subject) -> np.ndarray:
    """Cohort effect size: mean over subjects divided by the between-subject SD (ddof = 1)."""
    d = np.asarray(d_per_subject, dtype=float)
    sd = d.std(axis=0, ddof=1)
    mean = d.mean(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(sd > 0, mean / np.where(sd > 0, sd, 1.0), 0.0)
    return out


@dataclass
class SubjectFidelity:
    subject: str
    accuracy: float
    concept_fidelity: float
    concept_r: np.ndarray
    rule_fidelity: float
    discrimination: np.ndarray

    def row(self) -> dict:
        return {"ID": self.subject, "Acc": self.accuracy, "C-Fid": self.concept_fidelity,
                "R-Fid": self.rule_fidelity, "R1": float(self.discrimination[0]),
                "R2": float(self.discrimination[1]), "R3": float(self.discrimination[2])}


@dataclass
class FidelityReport:
    subjects: list[SubjectFidelity]
    cohort_d: np.ndarray
    r: float
    p: float

    def to_dict(self) -> dict:
        return {"subjects": [dict(s.row(), concept_r=s.concept_r.tolist()) for s in self.subjects],
                "cohens_d": self.cohort_d.tolist(), "fidelity_accuracy_r": self.r,
                "fidelity_accuracy_p": self.p}


def subject_fidelity(fold: FoldReport) -> SubjectFidelity:
    """Fidelity and discrimination per seed, then averaged over seeds."""
    if not fold.traces or fold.traces[0].f is None:
        raise ValueError("fidelity needs logic-head traces")
    phis, rs, rfids, ds = [], [], [], []
    for tr in fold.traces:
        phi, r = concept_fidelity(tr.C, fold.y)
        phis.append(phi)
        rs.append(r)
        rfids.append(concept_fidelity(tr.f, fold.y)[0])
        ds.append(rule_discrimination(tr.f, fold.y))
    return SubjectFidelity(fold.held_out_subject, fold.accuracy, float(np.mean(phis)), np.mean(rs, axis=0),
                           float(np.mean(rfids)), np.mean(ds, axis=0))


def pearson(x, y):
    """Pearson r with a two-sided t-transform p-value; (0, 1) when either side is constant."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n = len(x)
    if n < 3:
        raise TooFewSubjects(f"correlation needs at least 3 subjects, got {n}")
    xc, yc = x - x.mean(), y - y.mean()
    denom = math.sqrt(float(xc @ xc) * float(yc @ yc))
    if denom == 0:
        return 0.0, 1.0
    r = float(np.clip(xc @ yc / denom, -1.0, 1.0))
    if abs(r) == 1.0:
        return r, 0.0
    t = r * math.sqrt((n - 2) / (1 - r * r))
    return r, float(2 * stats.t.sf(abs(t), n - 2))


def fidelity_accuracy_correlation(folds: Sequence[FoldReport], fidelity: Sequence[SubjectFidelity] | None = None):
    fidelity = fidelity if fidelity is not None else [subject_fidelity(f) for f in folds]
    acc = {f.held_out_subject: f.accuracy for f in folds}
    return pearson([s.concept_fidelity for s in fidelity], [acc[s.subject] for s in fidelity])


def fidelity_report(folds: Sequence[FoldReport]) -> FidelityReport:
    subjects = [subject_fidelity(f) for f in folds]
    d = cohens_d([s.discrimination for s in subjects]) if len(subjects) > 1 else np.zeros(3)
    if len(subjects) >= 3:
        r, p = fidelity_accuracy_correlation(folds, subjects)
    else:
        r, p = 0.0, 1.0
    return FidelityReport(subjects, d, r, p)


def write_fidelity_csv(report: FidelityReport, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=FIDELITY_COLUMNS, lineterminator="\n")
        w.writeheader()
        for s in report.subjects:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in s.row().items()})


# ---------------------------------------------------------------------------
# paired comparison


@dataclass(frozen=True)
class WilcoxonResult:
    W: float
    w_plus: float
    w_minus: float
    n: int
    p: float
    rank_biserial: float
    method: str


def _exact_null(doubled_ranks):
    """Counts of the doubled signed-rank sum W+ over all 2^n sign patterns."""
    total = int(sum(doubled_ranks))
    counts = np.zeros(total + 1)
    counts[0] = 1.0
    for r in doubled_ranks:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:len(counts) - r]
        counts = counts + shifted
    return counts


def paired_comparison(a, b, exact_max=25, min_pairs=5) -> WilcoxonResult:
    """Two-sided Wilcoxon signed-rank test on ``a - b``.

    Zero differences are dropped and tied magnitudes get average ranks. The
    null distribution is enumerated exactly for up to ``exact_max`` pairs,
    otherwise a tie-corrected normal approximation with continuity
    correction is used. ``W = min(W+, W-)``.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError("paired samples must have equal length")
    diff = a - b
    diff = diff[diff != 0]
    n = len(diff)
    if n == 0:
        raise AllZeroDifferences("all paired differences are zero")
    if n < min_pairs:
        raise TooFewPairs(f"need at least {min_pairs} non-zero differences, got {n}")
    ranks = stats.rankdata(np.abs(diff))
    w_plus = float(ranks[diff > 0].sum())
    w_minus = float(ranks[diff < 0].sum())
    W = min(w_plus, w_minus)
    rb = abs(w_plus - w_minus) / (w_plus + w_minus)
    if n <= exact_max:
        doubled = np.rint(2 * ranks).astype(int)
        counts = _exact_null(doubled)
        p = 2 * counts[:int(round(2 * W)) + 1].sum() / counts.sum()
        method = "exact"
    else:
        _, tie_counts = np.unique(ranks, return_counts=True)
        var = n * (n + 1) * (2 * n + 1) / 24 - np.sum(tie_counts ** 3 - tie_counts) / 48
        mean = n * (n + 1) / 4
        z = (W - mean + 0.5) / math.sqrt(var) if var > 0 else 0.0
        p = 2 * stats.norm.cdf(min(z, 0.0))
        method = "normal"
    return WilcoxonResult(W, w_plus, w_minus, n, float(min(1.0, p)), float(rb), method)


# ---------------------------------------------------------------------------
# ablations


@dataclass
class AblationRow:
    suite: str
    variant: str
    accuracy: float
    sd: float
    delta_pp: float
    per_fold: tuple[float, ...]
    is_base: bool = False
    wilcoxon_p: float | None = None

    def to_dict(self) -> dict:
        return {"suite": self.suite, "variant": self.variant, "accuracy": self.accuracy, "sd": self.sd,
                "delta_pp": self.delta_pp, "is_base": self.is_base, "wilcoxon_p": self.wilcoxon_p,
                "per_fold": list(self.per_fold)}


def _row(suite, variant, per_fold, base_per_fold, is_base=False):
    per_fold = np.asarray(per_fold, dtype=float)
    base = np.asarray(base_per_fold, dtype=float)
    try:
        p = paired_comparison(per_fold, base).p
    except (AllZeroDifferences, TooFewPairs):
        p = None
    return AblationRow(suite, variant, float(per_fold.mean()),
                       float(per_fold.std(ddof=1)) if len(per_fold) > 1 else 0.0,
                       float(100.0 * (per_fold.mean() - base.mean())), tuple(per_fold.tolist()), is_base, p)


def run_ablations(table: FeatureTable, base: LosoConfig = LosoConfig(), seeds: Sequence[int] = DEFAULT_SEEDS,
                  suites: Sequence[str] = SUITES, operators: Sequence[str] | None = None, jobs: int = 1,
                  base_folds: list[FoldReport] | None = None) -> dict[str, list[AblationRow]]:
    """Run the requested suites; each row carries its accuracy change versus the base run in pp.

    Concept knockouts zero one concept at inference on the base run's models,
    so that suite costs no extra training.
    """
    unknown = set(suites) - set(SUITES)
    if unknown:
        raise ValueError(f"unknown ablation suites: {sorted(unknown)}")
    if base_folds is None:
        knock = range(N_CONCEPTS) if "concepts" in suites and base.head == "logic" else ()
        base_folds = run_loso(table, base, seeds, knockouts=knock, jobs=jobs)
    base_acc = [f.accuracy for f in base_folds]
    out = {}

    def variant_run(suite, name, cfg):
        if cfg == base:
            return _row(suite, name, base_acc, base_acc, is_base=True)
        folds = run_loso(table, replace(cfg, tag=f"{suite}:{name}"), seeds, jobs=jobs)
        return _row(suite, name, [f.accuracy for f in folds], base_acc)

    if "normalization" in suites:
        out["normalization"] = [variant_run("normalization", s.value, replace(base, strategy=s.value))
                                for s in (Strategy.GLOBAL, Strategy.PARTICIPANT, Strategy.NO_CALIBRATION)]
    if "concepts" in suites and base.head == "logic":
        rows = [_row("concepts", "full", base_acc, base_acc, is_base=True)]
        for k in range(N_CONCEPTS):
            rows.append(_row("concepts", f"without_{CONCEPT_NAMES[k]}",
                             [f.knockout_accuracy(k) for f in base_folds], base_acc))
        out["concepts"] = rows
    if "operators" in suites and base.head == "logic":
        fams = [OperatorFamily.parse(o) for o in (operators or [f.value for f in OperatorFamily])]
        out["operators"] = [variant_run("operators", f.value, replace(base, operator_family=f.value)) for f in fams]
    if "thresholds" in suites and base.head == "logic":
        out["thresholds"] = [variant_run("thresholds", name, replace(base, learn_thresholds=learn))
                             for name, learn in (("learned", True), ("fixed_0.5", False))]
    return out


def write_ablation_csv(rows: Sequence[AblationRow], path) -> None:
    cols = ("variant", "accuracy", "sd", "delta_pp", "wilcoxon_p", "is_base")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for r in rows:
            d = r.to_dict()
            w.writerow({c: repr(d[c]) if isinstance(d[c], float) else d[c] for c in cols})
