"""Mini-batch training, cross-validation, model selection, random search and ablation."""
from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable

import numpy as np

from . import autodiff as ad
from .evaluation import EvaluationReport, FoldPlan, report_from_predictions
from .model import HybridConfig, HybridModel
from .optim import OptimizerState, optimizer_step
from .preprocess import SegmentBatch

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    def __init__(self, message: str, fold: int | None = None):
        self.fold = fold
        super().__init__(message if fold is None else f"fold {fold}: {message}")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 16
    max_epochs: int = 100
    early_stop_patience: int = 10
    seed: int = 0
    optimizer: str = "adam"
    dtype: str = "float64"
    eval_batch_size: int = 64

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("learning_rate, batch_size and max_epochs must be positive")
        if self.early_stop_patience < 0:
            raise ValueError("early_stop_patience must be >= 0")
        if self.dtype not in ("float64", "float32"):
            raise ValueError("dtype must be float64 or float32")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class FoldResult:
    fold: int
    model: HybridModel | None
    curves: list[dict]
    best_epoch: int
    val_loss: float
    val_accuracy: float
    test_index: np.ndarray
    test_probs: np.ndarray
    report: EvaluationReport


def mean_loss(model: HybridModel, batch: SegmentBatch, batch_size: int = 64) -> tuple[float, np.ndarray]:
    probs = model.predict_proba(batch.data, batch_size)
    p = np.clip(probs.astype(np.float64), 1e-7, 1 - 1e-7)
    y = batch.labels
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p))), probs


def train_fold(model_cfg: HybridConfig, train_cfg: TrainConfig, train: SegmentBatch,
               val: SegmentBatch, seed_key=None, val_out: dict | None = None
               ) -> tuple[HybridModel, list[dict], int]:
    """Adam on BCE with early stopping; returns the best-validation-loss parameters.

    ``seed_key`` (defaults to ``train_cfg.seed``) seeds initialization, shuffling
    and dropout so that folds get independent but reproducible streams. If
    ``val_out`` is given it receives the best epoch's validation loss and
    probabilities, which saves scoring the validation set again.
    """
    if len(train) == 0 or len(val) == 0:
        raise ValueError("train_fold needs non-empty train and validation sets")
    key = train_cfg.seed if seed_key is None else seed_key
    ss = np.random.SeedSequence(key if isinstance(key, (list, tuple)) else [key])
    init_seed, shuffle_ss, drop_ss = ss.spawn(3)
    dtype = train_cfg.np_dtype
    model = HybridModel.init(model_cfg, seed=int(init_seed.generate_state(1)[0]), dtype=dtype)
    shuffle_rng = np.random.default_rng(shuffle_ss)
    drop_rng = np.random.default_rng(drop_ss)
    opt = OptimizerState(train_cfg.optimizer, train_cfg.learning_rate)
    params = model.parameter_list()
    x_all = train.data.astype(dtype, copy=False)
    y_all = train.labels.astype(dtype)

    curves: list[dict] = []
    best = (math.inf, 0, None)
    since_best = 0
    for epoch in range(1, train_cfg.max_epochs + 1):
        order = shuffle_rng.permutation(len(train))
        total = 0.0
        for start in range(0, len(order), train_cfg.batch_size):
            idx = np.sort(order[start:start + train_cfg.batch_size])
            if len(idx) < 2 and model_cfg.batchnorm:
                continue
            with ad.Tape() as tape:
                probs = model.forward(ad.Tensor(x_all[idx]), mode="train", rng=drop_rng)
                loss = ad.bce_loss(probs, ad.Tensor(y_all[idx]))
            lv = float(loss.data)
            if not math.isfinite(lv):
                raise DivergenceError(f"non-finite training loss at epoch {epoch}, batch starting {start}")
            ad.backward(loss, tape)
            optimizer_step(params, opt)
            total += lv * len(idx)
        train_loss = total / len(order)
        val_loss, val_probs = mean_loss(model, val, train_cfg.eval_batch_size)
        if not math.isfinite(val_loss):
            raise DivergenceError(f"non-finite validation loss at epoch {epoch}")
        curves.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss})
        log.info("epoch %d train %.4f val %.4f", epoch, train_loss, val_loss)
        if val_loss < best[0]:
            best = (val_loss, epoch, model.copy())
            since_best = 0
            if val_out is not None:
                val_out.update(loss=val_loss, probs=val_probs)
        else:
            since_best += 1
        if since_best >= train_cfg.early_stop_patience:
            break
    return best[2], curves, best[1]


def _run_fold(args) -> FoldResult:
    model_cfg, train_cfg, plan, batch, i = args
    tr, va, te = plan.indices(batch, i)
    val, best_val = batch.subset(va), {}
    try:
        model, curves, best_epoch = train_fold(model_cfg, train_cfg, batch.subset(tr), val,
                                               seed_key=[train_cfg.seed, i], val_out=best_val)
    except DivergenceError as exc:
        raise DivergenceError(str(exc), fold=i) from exc
    val_loss, val_probs = best_val["loss"], best_val["probs"]
    val_acc = float(np.mean((val_probs >= model_cfg.threshold) == val.labels))
    test = batch.subset(te)
    test_probs = model.predict_proba(test.data.astype(train_cfg.np_dtype), train_cfg.eval_batch_size)
    rep = report_from_predictions("segment", test.labels, test_probs, test.subject_ids, model_cfg.threshold)
    return FoldResult(i, model, curves, best_epoch, val_loss, val_acc, te, test_probs, rep)


@dataclass
class CrossvalResult:
    segment: EvaluationReport
    subject: EvaluationReport
    folds: list[FoldResult] = field(default_factory=list)
    test_probs: np.ndarray | None = None


def run_crossval(model_cfg: HybridConfig, train_cfg: TrainConfig, plan: FoldPlan,
                 batch: SegmentBatch, jobs: int = 1,
                 on_fold: Callable[[FoldResult], None] | None = None,
                 keep_models: bool = True) -> CrossvalResult:
    """Train every fold, pool the test predictions and score them at both levels.

    With ``keep_models=False`` only the model that :func:`select_best_fold_model`
    would pick survives; the others are dropped as soon as they lose, which keeps
    leave-one-subject-out memory flat.
    """
    tasks = [(model_cfg, train_cfg, plan, batch, i) for i in range(len(plan.folds))]
    results: list[FoldResult] = []

    def collect(r: FoldResult) -> None:
        if not keep_models and results:
            best = select_best_fold_model([x for x in results if x.model is not None] + [r])
            for x in results + [r]:
                if x is not best:
                    x.model = None
        results.append(r)
        if on_fold:
            on_fold(r)

    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for r in pool.map(_run_fold, tasks):
                collect(r)
    else:
        for t in tasks:
            collect(_run_fold(t))
    probs = np.full(len(batch), np.nan)
    covered = np.zeros(len(batch), dtype=bool)
    for r in results:
        probs[r.test_index] = r.test_probs
        covered[r.test_index] = True
    idx = np.flatnonzero(covered)
    seg = report_from_predictions("segment", batch.labels[idx], probs[idx], batch.subject_ids[idx],
                                  model_cfg.threshold)
    subj = report_from_predictions("subject", batch.labels[idx], probs[idx], batch.subject_ids[idx],
                                   model_cfg.threshold)
    per_fold = [{"fold": r.fold, "best_epoch": r.best_epoch, "val_loss": r.val_loss,
                 "val_accuracy": r.val_accuracy, "n_test": int(len(r.test_index)),
                 "confusion": asdict(r.report.confusion), "metrics": r.report.metrics}
                for r in results]
    for rep in (seg, subj):
        rep.per_fold = per_fold
        rep.curves = [r.curves for r in results]
    return CrossvalResult(seg, subj, results, probs)


def select_best_fold_model(results: list[FoldResult]) -> FoldResult:
    """Highest validation accuracy; ties by lower validation loss, then lower fold index."""
    if not results:
        raise ValueError("no completed folds")
    return min(results, key=lambda r: (-r.val_accuracy, r.val_loss, r.fold))


# ----------------------------------------------------------------------------
# random search


@dataclass
class HyperparamSpace:
    """Search intervals; integer ranges are inclusive, learning rate is log-uniform."""
    conv_arch: tuple[str, ...] = ("vgg13", "vgg16")
    rnn_layers: tuple[int, int] = (1, 3)
    rnn_units: tuple[int, int] = (16, 512)
    attention_nodes: tuple[int, int] = (64, 512)
    fc_layers: tuple[int, int] = (1, 3)
    fc_nodes: tuple[int, int] = (128, 1024)
    learning_rate: tuple[float, float] = (1e-5, 1e-2)
    batch_size: tuple[int, ...] = (16, 32)
    dropout_p: tuple[float, ...] = (0.3, 0.4, 0.5)

    @classmethod
    def point(cls, model_cfg: HybridConfig, train_cfg: TrainConfig) -> "HyperparamSpace":
        return cls((model_cfg.conv_arch,), (model_cfg.rnn_layers,) * 2, (model_cfg.rnn_units,) * 2,
                   (model_cfg.attention_nodes,) * 2, (model_cfg.fc_layers,) * 2,
                   (model_cfg.fc_nodes,) * 2, (train_cfg.learning_rate,) * 2,
                   (train_cfg.batch_size,), (model_cfg.dropout_p,))

    def sample(self, rng: np.random.Generator, base_model: HybridConfig, base_train: TrainConfig
               ) -> tuple[HybridConfig, TrainConfig]:
        def integer(lo_hi):
            return int(rng.integers(lo_hi[0], lo_hi[1] + 1))

        lo, hi = np.log(self.learning_rate[0]), np.log(self.learning_rate[1])
        lr = float(np.exp(rng.uniform(lo, hi))) if hi > lo else float(self.learning_rate[0])
        lr = min(max(lr, self.learning_rate[0]), self.learning_rate[1])
        mc = replace(base_model,
                     conv_arch=str(self.conv_arch[rng.integers(len(self.conv_arch))]),
                     rnn_layers=integer(self.rnn_layers), rnn_units=integer(self.rnn_units),
                     attention_nodes=integer(self.attention_nodes), fc_layers=integer(self.fc_layers),
                     fc_nodes=integer(self.fc_nodes),
                     dropout_p=float(self.dropout_p[rng.integers(len(self.dropout_p))]))
        tc = replace(base_train, learning_rate=lr,
                     batch_size=int(self.batch_size[rng.integers(len(self.batch_size))]))
        return mc, tc


@dataclass
class Trial:
    index: int
    model_config: dict
    train_config: dict
    score: float


def crossval_validation_objective(plan: FoldPlan, batch: SegmentBatch):
    """Mean per-fold validation accuracy of a full cross-validation run."""
    def objective(mc: HybridConfig, tc: TrainConfig) -> float:
        res = run_crossval(mc, tc, plan, batch)
        return float(np.mean([r.val_accuracy for r in res.folds]))
    return objective


def random_search(space: HyperparamSpace, budget: int, objective, seed: int = 0,
                  base_model: HybridConfig | None = None, base_train: TrainConfig | None = None,
                  on_trial: Callable[[Trial], None] | None = None
                  ) -> tuple[HybridConfig, TrainConfig, list[Trial]]:
    """Sample ``budget`` configurations and keep the best objective (first wins ties)."""
    if budget < 1:
        raise ValueError("budget must be >= 1")
    base_model = base_model or HybridConfig()
    base_train = base_train or TrainConfig()
    rng = np.random.default_rng(seed)
    trials, best = [], None
    for i in range(budget):
        mc, tc = space.sample(rng, base_model, base_train)
        score = float(objective(mc, tc))
        t = Trial(i, mc.to_dict(), tc.to_dict(), score)
        trials.append(t)
        if on_trial:
            on_trial(t)
        if best is None or score > best[0]:
            best = (score, mc, tc)
    return best[1], best[2], trials


# ----------------------------------------------------------------------------
# ablation ladder

ABLATION_LADDER = (
    ("VGG13", dict(rnn_kind="none", attention_enabled=False)),
    ("VGG13-BiGRU", dict(rnn_kind="gru", attention_enabled=False)),
    ("VGG13-BiLSTM", dict(rnn_kind="lstm", attention_enabled=False)),
    ("VGG13-BiGRU-Attn", dict(rnn_kind="gru", attention_enabled=True)),
    ("VGG13-BiLSTM-Attn", dict(rnn_kind="lstm", attention_enabled=True)),
)


def run_ablation(batch: SegmentBatch, plan: FoldPlan, train_cfg: TrainConfig,
                 base: HybridConfig | None = None, jobs: int = 1,
                 on_row: Callable[[dict], None] | None = None,
                 precomputed: dict[str, CrossvalResult] | None = None) -> list[dict]:
    """Cross-validate each rung under identical seeds; one row of pooled metrics per rung.

    ``precomputed`` maps rung names to results already produced with the same
    configuration, plan and seeds, so a finished run can be reused instead of retrained.
    """
    base = base or HybridConfig()
    precomputed = precomputed or {}
    rows = []
    for name, overrides in ABLATION_LADDER:
        cfg = replace(base, conv_arch="vgg13", bidirectional=True, **overrides)
        res = precomputed.get(name) or run_crossval(cfg, train_cfg, plan, batch, jobs=jobs,
                                                    keep_models=False)
        row = {"architecture": name, **res.segment.metrics,
               "subject_accuracy": res.subject.metrics["accuracy"],
               "tp": res.segment.confusion.tp, "fn": res.segment.confusion.fn,
               "fp": res.segment.confusion.fp, "tn": res.segment.confusion.tn}
        rows.append(row)
        if on_row:
            on_row(row)
    return rows
