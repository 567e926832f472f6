"""Quality regression on pooled video features.

Content-disjoint 80:20 splits repeated over many trials; in each, a
linear-kernel SVR is tuned by content-disjoint k-fold cross-validation on the
training part only, refit, and scored on the held-out contents.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import joblib
from joblib import Parallel, delayed
import numpy as np
from sklearn.compose import TransformedTargetRegressor
from sklearn.exceptions import ConvergenceWarning
from sklearn.model_selection import GroupKFold
from sklearn.pipeline import Pipeline
from sklearn.preprocessing import StandardScaler
from sklearn.svm import LinearSVR

from hdrvqa.errors import ProtocolError
from hdrvqa.features import VideoFeature, bank_matrix
from hdrvqa.metrics import MetricsReport, TrialMetrics, score_trial

log = logging.getLogger(__name__)


@dataclass
class QualityLabel:
    video_id: str
    content_id: str
    score: float
    condition: str = ""
    reference_id: str = ""

    def __post_init__(self):
        self.score = float(self.score)
        if not np.isfinite(self.score):
            raise ValueError(f"{self.video_id}: non-finite score")


def read_labels(path: str | os.PathLike) -> list[QualityLabel]:
    """CSV with columns video_id, content_id, score[, condition][, reference_id]."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [QualityLabel(video_id=r["video_id"], content_id=r["content_id"], score=float(r["score"]),
                         condition=r.get("condition") or "", reference_id=r.get("reference_id") or "")
            for r in rows]


@dataclass
class RegressorSpec:
    # C applies to standardised features and labels; held-out error is flat above ~0.1
    # while liblinear's run time grows roughly linearly in C, so the grid stops at 10
    C_grid: list[float] = field(default_factory=lambda: [10.0 ** k for k in range(-3, 2)])
    epsilon_grid: list[float] = field(default_factory=lambda: [0.0, 0.1, 1.0])  # in label stds
    standardize: bool = True

    def __post_init__(self):
        if not self.C_grid or not self.epsilon_grid:
            raise ValueError("regressor grids must be non-empty")
        if any(c <= 0 for c in self.C_grid) or any(e < 0 for e in self.epsilon_grid):
            raise ValueError("C must be positive and epsilon non-negative")


@dataclass
class EvalSplit:
    trial_id: int
    train_ids: list[str]
    test_ids: list[str]
    content_map: dict[str, str]

    def __post_init__(self):
        train_c = {self.content_map[v] for v in self.train_ids}
        test_c = {self.content_map[v] for v in self.test_ids}
        if train_c & test_c:
            raise ProtocolError(f"trial {self.trial_id}: contents {sorted(train_c & test_c)} on both sides")


def make_splits(video_ids: Sequence[str], content_map: Mapping[str, str], ratio: float = 0.8,
                trials: int = 100, seed: int = 0) -> list[EvalSplit]:
    """Content-disjoint train/test splits; ``round(ratio * n_contents)`` contents train per trial."""
    contents = sorted({content_map[v] for v in video_ids})
    if len(contents) < 2:
        raise ProtocolError(f"need at least two contents, got {len(contents)}")
    n_train = min(max(int(round(ratio * len(contents))), 1), len(contents) - 1)
    splits = []
    for t in range(trials):
        rng = np.random.default_rng([seed, t])
        train_c = set(rng.permutation(contents)[:n_train].tolist())
        train = [v for v in video_ids if content_map[v] in train_c]
        test = [v for v in video_ids if content_map[v] not in train_c]
        splits.append(EvalSplit(t, train, test, dict(content_map)))
    return splits


@dataclass
class FittedHead:
    pipeline: TransformedTargetRegressor
    C: float
    epsilon: float
    cv_rmse: float
    dim: int
    mode: str = "NR"


def _make_pipeline(C: float, epsilon: float, standardize: bool) -> TransformedTargetRegressor:
    """Linear epsilon-insensitive SVR on (optionally standardised) features and a standardised target.

    ``epsilon`` is in label standard deviations. liblinear's dual solver is
    used instead of libsvm: same model, but libsvm needs minutes per fit at
    large C. liblinear regularises the intercept, which is harmless once the
    target is centred.
    """
    steps = [("scale", StandardScaler())] if standardize else []
    steps.append(("svr", LinearSVR(C=C, epsilon=epsilon, loss="epsilon_insensitive", dual=True,
                                   tol=1e-5, max_iter=20_000, random_state=0)))
    return TransformedTargetRegressor(regressor=Pipeline(steps), transformer=StandardScaler(),
                                      check_inverse=False)


def _fit(model, X, y):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        return model.fit(X, y)


def cv_fit(X, y, spec: RegressorSpec | None = None, folds: int = 5, seed: int = 0,
           groups: Sequence | None = None) -> FittedHead:
    """Grid-search C and epsilon by k-fold CV RMSE, then refit on all of ``X``.

    ``groups`` (content ids) keep folds content-disjoint. Ties go to the
    smaller C, then the smaller epsilon.
    """
    spec = spec or RegressorSpec()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.shape[0] < folds:
        raise ProtocolError(f"need at least {folds} training videos, got {X.shape[0]}")
    groups = np.asarray(groups) if groups is not None else np.arange(len(y))
    n_groups = np.unique(groups).size
    if n_groups < 2:
        raise ProtocolError("cross-validation needs at least two groups")
    k = min(folds, n_groups)
    label_std = float(y.std())
    if label_std == 0:
        warnings.warn("all training labels are equal; the regressor will predict a constant", RuntimeWarning)

    fold_idx = list(GroupKFold(n_splits=k, shuffle=True, random_state=seed).split(X, y, groups))
    best = None
    for C in sorted(spec.C_grid):
        for frac in sorted(spec.epsilon_grid):
            errs = []
            for tr, va in fold_idx:
                model = _fit(_make_pipeline(C, frac, spec.standardize), X[tr], y[tr])
                errs.append(np.mean((model.predict(X[va]) - y[va]) ** 2))
            score = float(np.sqrt(np.mean(errs)))
            if best is None or score < best[0]:
                best = (score, C, frac)
    score, C, frac = best
    pipeline = _fit(_make_pipeline(C, frac, spec.standardize), X, y)
    # epsilon is reported in label units
    return FittedHead(pipeline, C, frac * label_std, score, X.shape[1])


def predict(head: FittedHead, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.size == 0:
        return np.zeros(0)
    X = np.atleast_2d(X)
    if X.shape[1] != head.dim:
        raise ValueError(f"feature length {X.shape[1]} does not match the fitted head ({head.dim})")
    return head.pipeline.predict(X)


def save_head(path: str | os.PathLike, head: FittedHead) -> None:
    joblib.dump(head, path)


def load_head(path: str | os.PathLike) -> FittedHead:
    head = joblib.load(path)
    if not isinstance(head, FittedHead):
        raise ValueError(f"{path} does not hold a fitted quality head")
    return head


def fr_feature(ref, dist) -> np.ndarray:
    """Element-wise |ref - dist| of two video descriptors."""
    if isinstance(ref, VideoFeature) and isinstance(dist, VideoFeature):
        if ref.checkpoint_hash != dist.checkpoint_hash:
            raise ValueError(f"{ref.video_id} and {dist.video_id} come from different checkpoints")
    a = np.asarray(getattr(ref, "vector", ref), dtype=np.float64).ravel()
    b = np.asarray(getattr(dist, "vector", dist), dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"feature length mismatch: {a.size} vs {b.size}")
    return np.abs(a - b)


def design_matrix(bank: Sequence[VideoFeature], labels: Sequence[QualityLabel], mode: str = "NR") -> np.ndarray:
    ids = [lab.video_id for lab in labels]
    if mode.upper() == "NR":
        return bank_matrix(bank, ids)
    if mode.upper() != "FR":
        raise ValueError(f"mode must be NR or FR, got {mode!r}")
    missing_ref = [lab.video_id for lab in labels if not lab.reference_id]
    if missing_ref:
        raise ProtocolError(f"FR mode needs reference_id for every label, e.g. {missing_ref[:3]}")
    by_id = {f.video_id: f for f in bank}
    rows = []
    for lab in labels:
        if lab.video_id not in by_id or lab.reference_id not in by_id:
            raise ProtocolError(f"missing features for {lab.video_id} or its reference {lab.reference_id}")
        rows.append(fr_feature(by_id[lab.reference_id], by_id[lab.video_id]))
    return np.stack(rows)


@dataclass
class ProtocolResult:
    report: MetricsReport
    trial_ids: list[int]
    excluded: list[dict]
    selected: list[dict]

    def to_dict(self) -> dict:
        return {"report": self.report.to_dict(), "trial_ids": self.trial_ids,
                "excluded": self.excluded, "selected": self.selected}


@dataclass
class TrialPrediction:
    split: EvalSplit
    predictions: np.ndarray
    scores: np.ndarray
    selected: dict


class _Prepared:
    def __init__(self, bank, labels, mode, trials, seed, ratio):
        labels = list(labels)
        self.X = design_matrix(bank, labels, mode)
        self.y = np.array([lab.score for lab in labels])
        ids = [lab.video_id for lab in labels]
        self.row = {v: i for i, v in enumerate(ids)}
        self.content = {lab.video_id: lab.content_id for lab in labels}
        self.splits = make_splits(ids, self.content, ratio, trials, seed)


def _fit_and_predict(prep: _Prepared, split: EvalSplit, spec: RegressorSpec, folds: int, seed: int,
                     audit) -> TrialPrediction:
    tr = [prep.row[v] for v in split.train_ids]
    te = [prep.row[v] for v in split.test_ids]
    if set(split.train_ids) & set(split.test_ids):
        raise ProtocolError(f"trial {split.trial_id}: test videos leaked into training")
    if audit:
        audit(split.trial_id, "fit", list(split.train_ids))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        head = cv_fit(prep.X[tr], prep.y[tr], spec, folds, seed=seed + split.trial_id,
                      groups=[prep.content[v] for v in split.train_ids])
    if audit:
        audit(split.trial_id, "predict", list(split.test_ids))
    return TrialPrediction(split, predict(head, prep.X[te]), prep.y[te], {"C": head.C, "epsilon": head.epsilon})


def trial_predictions(bank: Sequence[VideoFeature], labels: Sequence[QualityLabel],
                      spec: RegressorSpec | None = None, trials: int = 100, mode: str = "NR", seed: int = 0,
                      ratio: float = 0.8, folds: int = 5) -> list[TrialPrediction]:
    """Held-out predictions of every trial, without scoring them."""
    spec = spec or RegressorSpec()
    prep = _Prepared(bank, labels, mode, trials, seed, ratio)
    return [_fit_and_predict(prep, s, spec, folds, seed, None) for s in prep.splits]


def run_protocol(bank: Sequence[VideoFeature], labels: Sequence[QualityLabel],
                 spec: RegressorSpec | None = None, trials: int = 100, mode: str = "NR", seed: int = 0,
                 ratio: float = 0.8, folds: int = 5, workers: int = 1, offset_in_denominator: bool = False,
                 audit: Callable[[int, str, list[str]], None] | None = None) -> ProtocolResult:
    """Repeated split / tune / test evaluation returning per-trial metrics, medians and stds.

    ``audit`` is called as ``audit(trial, stage, video_ids)`` for the "fit"
    and "predict" stages; every trial also checks internally that no test
    video reaches the fit stage. A trial whose fit or metrics fail (for
    example constant predictions) is excluded with a logged warning.
    ``workers > 1`` runs trials in separate processes, except when an audit
    callback is given.
    """
    spec = spec or RegressorSpec()
    prep = _Prepared(bank, labels, mode, trials, seed, ratio)

    def guarded(split: EvalSplit):
        try:
            tp = _fit_and_predict(prep, split, spec, folds, seed, audit)
            metrics = score_trial(tp.predictions, tp.scores, offset_in_denominator=offset_in_denominator)
            return split.trial_id, (metrics, tp.selected), None
        except ProtocolError:
            raise
        except Exception as exc:  # a degenerate trial must not sink a 100-trial run
            return split.trial_id, None, f"{type(exc).__name__}: {exc}"

    if workers > 1 and audit is None:
        # processes, not threads: liblinear reseeds the process-wide C rand() on every fit
        outcomes = Parallel(n_jobs=workers, backend="loky")(delayed(guarded)(s) for s in prep.splits)
    else:
        outcomes = [guarded(s) for s in prep.splits]

    kept, trial_ids, excluded, selected = [], [], [], []
    for tid, result, err in outcomes:
        if err is not None:
            log.warning("trial %d excluded: %s", tid, err)
            excluded.append({"trial": tid, "error": err})
            continue
        kept.append(result[0])
        selected.append(result[1])
        trial_ids.append(tid)
    if not kept:
        raise ProtocolError(f"all {trials} trials failed; first error: {excluded[0]['error']}")
    return ProtocolResult(MetricsReport.from_trials(kept), trial_ids, excluded, selected)


def config_hash(config: Mapping) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True, default=str).encode()).hexdigest()[:16]


def report_body(result: ProtocolResult, config: Mapping) -> str:
    """Deterministic JSON text of a protocol run (no timestamps)."""
    body = {"config": dict(config), "config_hash": config_hash(config), **result.to_dict()}
    return json.dumps(body, indent=1, sort_keys=True) + "\n"


def spec_to_dict(spec: RegressorSpec) -> dict:
    return asdict(spec)
