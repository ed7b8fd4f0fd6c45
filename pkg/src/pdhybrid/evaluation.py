"""Fold plans, confusion matrices and the six-metric evaluation report."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .preprocess import SegmentBatch

METRICS = ("accuracy", "sensitivity", "specificity", "precision", "recall", "f1")


# ----------------------------------------------------------------------------
# fold plans


@dataclass
class Fold:
    train: list
    val: list
    test: list


@dataclass
class FoldPlan:
    """``kfold10`` folds hold segment indices; ``loocv`` folds hold subject ids."""
    strategy: str
    folds: list[Fold]
    seed: int

    def indices(self, batch: SegmentBatch, i: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        f = self.folds[i]
        if self.strategy == "kfold10":
            return (np.asarray(f.train, dtype=np.int64), np.asarray(f.val, dtype=np.int64),
                    np.asarray(f.test, dtype=np.int64))
        sid = batch.subject_ids
        return tuple(np.flatnonzero(np.isin(sid, part)) for part in (f.train, f.val, f.test))

    def to_dict(self) -> dict:
        return {"strategy": self.strategy, "seed": self.seed,
                "folds": [asdict(f) for f in self.folds]}


def make_kfold(batch: SegmentBatch, k: int = 10, seed: int = 0) -> FoldPlan:
    """Seeded shuffle into k near-equal groups; fold i tests group i and validates on group i+1."""
    n = len(batch)
    if k < 3:
        raise ValueError("k must be at least 3 (train/val/test groups)")
    if n < k:
        raise ValueError(f"need at least {k} segments, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    groups = [np.sort(g) for g in np.array_split(perm, k)]
    folds = []
    for i in range(k):
        v = (i + 1) % k
        train = np.sort(np.concatenate([groups[j] for j in range(k) if j not in (i, v)]))
        folds.append(Fold(train.tolist(), groups[v].tolist(), groups[i].tolist()))
    return FoldPlan("kfold10" if k == 10 else f"kfold{k}", folds, seed)


def make_loocv(batch: SegmentBatch, seed: int = 0) -> FoldPlan:
    """One fold per subject; a seeded choice of one other subject validates."""
    subjects = batch.subjects
    if len(subjects) < 3:
        raise ValueError(f"leave-one-subject-out needs at least 3 subjects, got {len(subjects)}")
    folds = []
    for i, s in enumerate(subjects):
        rest = [t for t in subjects if t != s]
        rng = np.random.default_rng([seed, i])
        v = rest[int(rng.integers(len(rest)))]
        folds.append(Fold([t for t in rest if t != v], [v], [s]))
    return FoldPlan("loocv", folds, seed)


def check_plan(plan: FoldPlan, batch: SegmentBatch) -> None:
    """Raise if any fold leaks test data into train/val, or kfold tests miss segments."""
    covered = np.zeros(len(batch), dtype=np.int64)
    for i in range(len(plan.folds)):
        tr, va, te = plan.indices(batch, i)
        if np.intersect1d(tr, te).size or np.intersect1d(va, te).size or np.intersect1d(tr, va).size:
            raise AssertionError(f"fold {i}: train/val/test overlap")
        if plan.strategy == "loocv":
            test_subj = set(batch.subject_ids[te])
            if test_subj & set(batch.subject_ids[tr]) or test_subj & set(batch.subject_ids[va]):
                raise AssertionError(f"fold {i}: test subject appears in train/val")
        covered[te] += 1
    if plan.strategy.startswith("kfold") and not np.all(covered == 1):
        raise AssertionError("kfold test sets do not cover every segment exactly once")


# ----------------------------------------------------------------------------
# metrics


@dataclass
class ConfusionMatrix:
    tp: int = 0
    fn: int = 0
    fp: int = 0
    tn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fn + self.fp + self.tn

    @classmethod
    def from_labels(cls, y_true, y_pred) -> "ConfusionMatrix":
        t = np.asarray(y_true).astype(bool)
        p = np.asarray(y_pred).astype(bool)
        return cls(int(np.sum(t & p)), int(np.sum(t & ~p)), int(np.sum(~t & p)), int(np.sum(~t & ~p)))

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.tp + other.tp, self.fn + other.fn,
                               self.fp + other.fp, self.tn + other.tn)

    def rows(self) -> list[list]:
        return [["PD", self.tp, self.fn], ["HC", self.fp, self.tn]]


def _pct(num: int, den: int) -> float | None:
    return None if den == 0 else 100.0 * num / den


def compute_metrics(cm: ConfusionMatrix) -> dict[str, float | None]:
    """Percent metrics; with only one true class present, only accuracy is reported."""
    out: dict[str, float | None] = {m: None for m in METRICS}
    out["accuracy"] = _pct(cm.tp + cm.tn, cm.total)
    if cm.tp + cm.fn == 0 or cm.fp + cm.tn == 0:
        return out
    sens = _pct(cm.tp, cm.tp + cm.fn)
    out["sensitivity"] = out["recall"] = sens
    out["specificity"] = _pct(cm.tn, cm.tn + cm.fp)
    out["precision"] = prec = _pct(cm.tp, cm.tp + cm.fp)
    if prec is not None and prec + sens > 0:
        out["f1"] = 2 * prec * sens / (prec + sens)
    elif prec is not None:
        out["f1"] = 0.0
    return out


def subject_votes(subject_ids, predicted) -> tuple[list[str], np.ndarray]:
    """Majority vote of segment labels per subject; ties go to PD."""
    subjects = list(dict.fromkeys(str(s) for s in subject_ids))
    sid = np.asarray(subject_ids, dtype=str)
    pred = np.asarray(predicted)
    votes = np.array([int(2 * pred[sid == s].sum() >= (sid == s).sum()) for s in subjects])
    return subjects, votes


@dataclass
class EvaluationReport:
    level: str
    confusion: ConfusionMatrix
    metrics: dict[str, float | None]
    n_items: int
    per_fold: list[dict] = field(default_factory=list)
    curves: list[list[dict]] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"level": self.level, "confusion": asdict(self.confusion), "metrics": self.metrics,
                "n_items": self.n_items, "per_fold": self.per_fold, "curves": self.curves,
                "extra": self.extra}


def report_from_predictions(level: str, labels, probs, subject_ids, threshold: float = 0.5
                            ) -> EvaluationReport:
    from .model import predict_label

    labels = np.asarray(labels)
    pred = predict_label(np.asarray(probs), threshold)
    if level == "segment":
        cm = ConfusionMatrix.from_labels(labels, pred)
        n = len(labels)
    elif level == "subject":
        subjects, votes = subject_votes(subject_ids, pred)
        truth = {str(s): int(l) for s, l in zip(subject_ids, labels)}
        cm = ConfusionMatrix.from_labels([truth[s] for s in subjects], votes)
        n = len(subjects)
    else:
        raise ValueError("level must be segment or subject")
    return EvaluationReport(level, cm, compute_metrics(cm), n)
