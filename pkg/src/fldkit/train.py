"""Training loop, evaluation metrics, stratified cross-validation,
cross-cohort migration evaluation, and occlusion saliency maps."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .cohort import Cohort
from .errors import (
    DataError,
    NumericalError,
    ParameterError,
    UndefinedMetricError,
)
from .network import Model, ModelConfig, joint_loss
from .tensor import Tensor

METRIC_NAMES = ("accuracy", "sensitivity", "specificity", "ppv", "npv", "auc")


@dataclass(frozen=True)
class Hyperparams:
    lr: float = 1e-3
    batch_size: int = 16
    epochs: int = 40
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    momentum: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0.0:
            raise ParameterError(f"lr must be > 0, got {self.lr}")
        if not isinstance(self.batch_size, int) or self.batch_size < 1:
            raise ParameterError(f"batch_size must be a positive integer, got {self.batch_size!r}")
        if not isinstance(self.epochs, int) or self.epochs < 0:
            raise ParameterError(f"epochs must be a non-negative integer, got {self.epochs!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ParameterError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")

    def to_dict(self) -> dict:
        return {
            "lr": self.lr,
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "optimizer": self.optimizer,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "momentum": self.momentum,
            "seed": self.seed,
        }


class Adam:
    def __init__(self, params: dict[str, Tensor], hyper: Hyperparams):
        self.params = params
        self.hyper = hyper
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self._scratch = {k: np.empty_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        h = self.hyper
        self.t += 1
        bc1 = 1.0 - h.beta1 ** self.t
        bc2 = 1.0 - h.beta2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[k]
            v = self.v[k]
            s = self._scratch[k]
            m *= h.beta1
            np.multiply(g, 1.0 - h.beta1, out=s)
            m += s
            v *= h.beta2
            np.multiply(g, g, out=s)
            s *= 1.0 - h.beta2
            v += s
            np.divide(v, bc2, out=s)
            np.sqrt(s, out=s)
            s += h.eps
            np.divide(m, s, out=s)
            s *= h.lr / bc1
            p.data -= s


class SGD:
    def __init__(self, params: dict[str, Tensor], hyper: Hyperparams):
        self.params = params
        self.hyper = hyper
        self.vel = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        h = self.hyper
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            vel = self.vel[k]
            vel *= h.momentum
            vel -= h.lr * g
            p.data += vel


def _make_optimizer(params: dict[str, Tensor], hyper: Hyperparams):
    return Adam(params, hyper) if hyper.optimizer == "adam" else SGD(params, hyper)


def _nonfinite_param(model: Model) -> str | None:
    for name, p in model.params.items():
        if not np.all(np.isfinite(p.data)):
            return name
    return None


def train(
    cohort: Cohort,
    config: ModelConfig,
    hyper: Hyperparams,
    train_idx: np.ndarray | None = None,
) -> tuple[Model, list[float]]:
    """Train a model on the given cohort rows (all rows by default).

    Standardization statistics are fitted on the training rows only, before
    any optimization. Returns the model and the per-epoch mean training loss.
    """
    if train_idx is None:
        train_idx = np.arange(cohort.n)
    train_idx = np.asarray(train_idx, dtype=np.int64)
    n_train = len(train_idx)
    if n_train == 0:
        raise DataError("training split is empty")
    if hyper.batch_size > n_train:
        raise ParameterError(
            f"batch_size {hyper.batch_size} exceeds training split size {n_train}"
        )

    master = np.random.SeedSequence(hyper.seed)
    init_ss, shuffle_ss, dropout_ss = master.spawn(3)
    model = Model.init(config, np.random.default_rng(init_ss))
    shuffle_rng = np.random.default_rng(shuffle_ss)
    dropout_rng = np.random.default_rng(dropout_ss)

    meta = cohort.feature_matrix(config.indicators) if config.c_mc else None
    images = cohort.image_stack() if config.wants_images else None
    labels = cohort.labels().astype(np.float64)
    aux_raw = cohort.feature_matrix(config.aux_targets) if config.aux_active else None

    model.fit_standardization(
        None if meta is None else meta[train_idx],
        None if aux_raw is None else aux_raw[train_idx],
    )
    aux_std = model.standardize_aux(aux_raw) if aux_raw is not None else None

    history: list[float] = []
    opt = _make_optimizer(model.params, hyper)
    for epoch in range(hyper.epochs):
        perm = train_idx[shuffle_rng.permutation(n_train)]
        batch_losses = []
        for b_start in range(0, n_train, hyper.batch_size):
            rows = perm[b_start:b_start + hyper.batch_size]
            out = model.forward(
                images=None if images is None else images[rows],
                meta_rows=None if meta is None else meta[rows],
                train=True,
                rng=dropout_rng,
            )
            loss = joint_loss(
                out.y_fat,
                labels[rows],
                out.y_aux,
                None if aux_std is None else aux_std[rows],
                config.alpha,
            )
            value = loss.item()
            if not np.isfinite(value):
                culprit = _nonfinite_param(model) or "loss"
                raise NumericalError(
                    f"non-finite loss at epoch {epoch}, batch {b_start // hyper.batch_size}"
                    f" (parameter: {culprit})"
                )
            for p in model.params.values():
                p.zero_grad()
            loss.backward()
            opt.step()
            batch_losses.append(value)
        history.append(float(np.mean(batch_losses)))
    return model, history


# ---- metrics -------------------------------------------------------------


def confusion(labels: np.ndarray, scores: np.ndarray, threshold: float = 0.5) -> tuple[int, int, int, int]:
    """(TP, FP, TN, FN); a score counts as positive iff score >= threshold."""
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    if labels.shape != scores.shape:
        raise ParameterError(f"labels {labels.shape} and scores {scores.shape} differ")
    pred = scores >= threshold
    pos = labels == 1
    tp = int(np.sum(pred & pos))
    fp = int(np.sum(pred & ~pos))
    tn = int(np.sum(~pred & ~pos))
    fn = int(np.sum(~pred & pos))
    return tp, fp, tn, fn


def auc(labels: np.ndarray, scores: np.ndarray) -> float:
    """Area under the ROC curve via the rank (Mann-Whitney) formulation,
    with average ranks for tied scores."""
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    n_pos = int(np.sum(labels == 1))
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(
            f"AUC undefined: {n_pos} positive / {n_neg} negative labels"
        )
    _, inverse, counts = np.unique(scores, return_inverse=True, return_counts=True)
    cum = np.cumsum(counts)
    avg_rank = (cum - counts + 1 + cum) / 2.0
    ranks = avg_rank[inverse]
    rank_sum_pos = float(ranks[labels == 1].sum())
    return (rank_sum_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def roc_points(labels: np.ndarray, scores: np.ndarray) -> list[tuple[float, float]]:
    """(FPR, TPR) points from (0,0) to (1,1), one per distinct threshold."""
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    n_pos = int(np.sum(labels == 1))
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(
            f"ROC undefined: {n_pos} positive / {n_neg} negative labels"
        )
    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_pos = (labels[order] == 1).astype(np.int64)
    cum_tp = np.cumsum(sorted_pos)
    cum_fp = np.cumsum(1 - sorted_pos)
    # keep only the last index of each run of equal scores
    last = np.ones(len(scores), dtype=bool)
    last[:-1] = sorted_scores[:-1] != sorted_scores[1:]
    points = [(0.0, 0.0)]
    for i in np.flatnonzero(last):
        points.append((cum_fp[i] / n_neg, cum_tp[i] / n_pos))
    return points


def _ratio(num: int, den: int) -> float | None:
    return None if den == 0 else num / den


@dataclass
class MetricsReport:
    tp: int
    fp: int
    tn: int
    fn: int
    accuracy: float | None
    sensitivity: float | None
    specificity: float | None
    ppv: float | None
    npv: float | None
    auc: float | None
    threshold: float
    n: int
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "counts": {"tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn},
            "accuracy": self.accuracy,
            "sensitivity": self.sensitivity,
            "specificity": self.specificity,
            "ppv": self.ppv,
            "npv": self.npv,
            "auc": self.auc,
            "threshold": self.threshold,
            "n": self.n,
            "warnings": self.warnings,
        }


def metrics_from_counts(
    tp: int, fp: int, tn: int, fn: int, auc_value: float | None, threshold: float,
    warnings_list: list[str] | None = None,
) -> MetricsReport:
    n = tp + fp + tn + fn
    return MetricsReport(
        tp=tp, fp=fp, tn=tn, fn=fn,
        accuracy=_ratio(tp + tn, n),
        sensitivity=_ratio(tp, tp + fn),
        specificity=_ratio(tn, tn + fp),
        ppv=_ratio(tp, tp + fp),
        npv=_ratio(tn, tn + fn),
        auc=auc_value,
        threshold=threshold,
        n=n,
        warnings=warnings_list or [],
    )


def predict_cohort(model: Model, cohort: Cohort, indices: np.ndarray | None = None) -> np.ndarray:
    """Eval-mode scores for the selected cohort rows."""
    if indices is None:
        indices = np.arange(cohort.n)
    indices = np.asarray(indices, dtype=np.int64)
    cfg = model.config
    meta = cohort.feature_matrix(cfg.indicators)[indices] if cfg.c_mc else None
    images = cohort.image_stack()[indices] if cfg.wants_images else None
    return model.predict_scores(images=images, meta_rows=meta)


def evaluate(
    model: Model,
    cohort: Cohort,
    indices: np.ndarray | None = None,
    threshold: float = 0.5,
) -> MetricsReport:
    if indices is None:
        indices = np.arange(cohort.n)
    indices = np.asarray(indices, dtype=np.int64)
    scores = predict_cohort(model, cohort, indices)
    labels = cohort.labels()[indices]
    tp, fp, tn, fn = confusion(labels, scores, threshold)
    warns: list[str] = []
    try:
        auc_value = auc(labels, scores)
    except UndefinedMetricError as exc:
        auc_value = None
        warns.append(str(exc))
    return metrics_from_counts(tp, fp, tn, fn, auc_value, threshold, warns)


# ---- cross-validation ------------------------------------------------------


@dataclass
class CrossValResult:
    fold_reports: list[MetricsReport]
    fold_rocs: list[list[tuple[float, float]]]
    fold_test_indices: list[np.ndarray]
    mean_metrics: dict[str, float | None]
    sd_metrics: dict[str, float | None]
    warnings: list[str]
    config: dict

    def to_dict(self) -> dict:
        return {
            "folds": [r.to_dict() for r in self.fold_reports],
            "fold_test_indices": [idx.tolist() for idx in self.fold_test_indices],
            "mean": self.mean_metrics,
            "sd": self.sd_metrics,
            "warnings": self.warnings,
            "config": self.config,
        }


def _aggregate(reports: list[MetricsReport]) -> tuple[dict, dict, list[str]]:
    mean: dict[str, float | None] = {}
    sd: dict[str, float | None] = {}
    warns: list[str] = []
    for name in METRIC_NAMES:
        values = []
        for i, r in enumerate(reports):
            v = getattr(r, name)
            if v is None:
                warns.append(f"fold {i}: {name} undefined; excluded from the mean")
            else:
                values.append(v)
        if values:
            mean[name] = float(np.mean(values))
            sd[name] = float(np.std(values, ddof=1)) if len(values) > 1 else 0.0
        else:
            mean[name] = None
            sd[name] = None
            warns.append(f"{name} undefined in every fold")
    return mean, sd, warns


def crossval(
    cohort: Cohort,
    config: ModelConfig,
    hyper: Hyperparams,
    k: int = 7,
    threshold: float = 0.5,
    repeats: int = 1,
    on_fold: "Callable[[int, Model, np.ndarray, np.ndarray], None] | None" = None,
) -> CrossValResult:
    """Stratified k-fold cross-validation, reiterated `repeats` times with
    fresh partitions. Each fold trains from scratch with a derived seed and
    fits standardization on its own training split only."""
    if not isinstance(repeats, int) or repeats < 1:
        raise ParameterError(f"repeats must be a positive integer, got {repeats!r}")
    master = np.random.SeedSequence(hyper.seed)
    rep_seqs = master.spawn(repeats)
    reports: list[MetricsReport] = []
    rocs: list[list[tuple[float, float]]] = []
    test_indices: list[np.ndarray] = []
    fold_counter = 0
    for rep_ss in rep_seqs:
        split_ss, folds_ss = rep_ss.spawn(2)
        split_seed = int(split_ss.generate_state(1)[0])
        folds = cohort.kfold(k, split_seed)
        fold_seed_seqs = folds_ss.spawn(k)
        for fold_i, (train_idx, test_idx) in enumerate(folds):
            fold_seed = int(fold_seed_seqs[fold_i].generate_state(1)[0])
            fold_hyper = Hyperparams(**{**hyper.to_dict(), "seed": fold_seed})
            model, _ = train(cohort, config, fold_hyper, train_idx=train_idx)
            if on_fold is not None:
                on_fold(fold_counter, model, train_idx, test_idx)
            report = evaluate(model, cohort, indices=test_idx, threshold=threshold)
            scores = predict_cohort(model, cohort, test_idx)
            labels = cohort.labels()[test_idx]
            try:
                rocs.append(roc_points(labels, scores))
            except UndefinedMetricError:
                rocs.append([])
            reports.append(report)
            test_indices.append(test_idx)
            fold_counter += 1
    mean, sd, warns = _aggregate(reports)
    snapshot = {
        "model": config.to_dict(),
        "hyper": hyper.to_dict(),
        "k": k,
        "repeats": repeats,
        "threshold": threshold,
    }
    return CrossValResult(
        fold_reports=reports,
        fold_rocs=rocs,
        fold_test_indices=test_indices,
        mean_metrics=mean,
        sd_metrics=sd,
        warnings=warns,
        config=snapshot,
    )


def migrate_eval(model: Model, cohort_b: Cohort, threshold: float = 0.5) -> MetricsReport:
    """Evaluate a frozen model on a different cohort. The model's own
    standardization statistics are kept; nothing is refitted."""
    return evaluate(model, cohort_b, indices=None, threshold=threshold)


# ---- occlusion saliency -----------------------------------------------------


def occlusion_saliency(
    model: Model,
    image: np.ndarray,
    meta_row: np.ndarray | None = None,
    patch: int = 8,
    stride: int = 8,
    fill: float = 0.5,
) -> np.ndarray:
    """Grid of (baseline score - occluded score); positive cells mark regions
    whose occlusion lowers the predicted risk."""
    if not model.config.wants_images:
        raise ParameterError(f"saliency needs an image model, got mode {model.config.mode!r}")
    image = np.asarray(image, dtype=np.float64)
    side = model.config.image_size
    if image.shape != (side, side, 3):
        raise DataError(f"image must be ({side}, {side}, 3), got {image.shape}")
    if not isinstance(patch, int) or patch < 1 or patch > side:
        raise ParameterError(f"patch must be an integer in [1, {side}], got {patch!r}")
    if not isinstance(stride, int) or stride < 1:
        raise ParameterError(f"stride must be a positive integer, got {stride!r}")

    grid = (side - patch) // stride + 1
    if meta_row is not None:
        meta_row = np.asarray(meta_row, dtype=np.float64).reshape(1, -1)
    base = model.predict_scores(images=image[None], meta_rows=meta_row, batch=1)[0]
    occluded = np.repeat(image[None], grid * grid, axis=0)
    for gy in range(grid):
        for gx in range(grid):
            y0, x0 = gy * stride, gx * stride
            occluded[gy * grid + gx, y0:y0 + patch, x0:x0 + patch, :] = fill
    metas_all = None if meta_row is None else np.repeat(meta_row, grid * grid, axis=0)
    scores = model.predict_scores(images=occluded, meta_rows=metas_all, batch=64)
    return (base - scores).reshape(grid, grid)
