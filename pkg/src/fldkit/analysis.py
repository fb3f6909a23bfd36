"""Indicator analysis: Pearson ranking, descriptive statistics with Welch
t-tests, Shapley attribution over a trained predictor, and the two-stage
indicator selection pipeline (correlation screen, then Shapley ranking).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .cohort import Cohort
from .errors import (
    ConfigError,
    DataError,
    DegenerateDataError,
    DimensionError,
    NumericalError,
    ParameterError,
)

# ---- Pearson ---------------------------------------------------------------


def pearson(p: np.ndarray, q: np.ndarray) -> float:
    """Pearson correlation in raw-moment form:
    (n*sum(pq) - sum(p)*sum(q)) / sqrt((n*sum(p^2)-sum(p)^2)(n*sum(q^2)-sum(q)^2)),
    clamped to [-1, 1]."""
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    if p.shape != q.shape:
        raise DimensionError(f"length mismatch: {p.size} vs {q.size}")
    n = p.size
    if n < 2:
        raise DegenerateDataError(f"need at least 2 observations, got {n}")
    sp, sq = p.sum(), q.sum()
    spq = float(p @ q)
    dp = n * float(p @ p) - sp * sp
    dq = n * float(q @ q) - sq * sq
    if dp <= 0.0 or dq <= 0.0:
        raise DegenerateDataError("constant vector has no defined correlation")
    rho = (n * spq - sp * sq) / math.sqrt(dp * dq)
    return float(min(1.0, max(-1.0, rho)))


@dataclass
class CorrelationRanking:
    target: str
    entries: list[tuple[str, float]]  # (name, rho), sorted by |rho| desc
    warnings: list[str] = field(default_factory=list)

    def names(self) -> list[str]:
        return [name for name, _ in self.entries]

    def to_csv(self, path: "str | Path") -> None:
        lines = ["rank,name,rho,abs_rho"]
        for i, (name, rho) in enumerate(self.entries, start=1):
            lines.append(f"{i},{name},{rho!r},{abs(rho)!r}")
        Path(path).write_text("\n".join(lines) + "\n")


def rank_by_pearson(cohort: Cohort, target: str = "label", top_k: int | None = None) -> CorrelationRanking:
    """Rank indicators by |rho| against the target (the 0/1 label by default,
    treated point-biserially, or any other indicator). Constant indicators
    are skipped with a warning. Ties break by name."""
    names = cohort.indicator_names()
    if target == "label":
        tvec = cohort.labels().astype(np.float64)
        candidates = list(names)
    elif target in names:
        tvec = cohort.feature_matrix([target])[:, 0]
        candidates = [n for n in names if n != target]
    else:
        raise DataError(f"target {target!r} not found (use 'label' or an indicator name)")
    if top_k is not None and not (1 <= top_k <= len(candidates)):
        raise ParameterError(f"top_k must be in [1, {len(candidates)}], got {top_k}")

    X = cohort.feature_matrix(candidates)
    scored: list[tuple[str, float]] = []
    warnings: list[str] = []
    for j, name in enumerate(candidates):
        try:
            scored.append((name, pearson(X[:, j], tvec)))
        except DegenerateDataError as exc:
            warnings.append(f"{name}: skipped ({exc})")
    scored.sort(key=lambda e: (-abs(e[1]), e[0]))
    if top_k is not None:
        scored = scored[:top_k]
    return CorrelationRanking(target=target, entries=scored, warnings=warnings)


# ---- descriptive statistics -------------------------------------------------


@dataclass
class SummaryRow:
    name: str
    kind: str
    # per group key ("0", "1", "all"): continuous -> (mean, sd);
    # binary -> (count, percent)
    groups: dict[str, tuple[float, float]]
    p_value: float | None


@dataclass
class SummaryTable:
    rows: list[SummaryRow]
    group_sizes: dict[str, int]
    warnings: list[str] = field(default_factory=list)

    def to_csv(self, path: "str | Path") -> None:
        lines = ["name,kind,group,a,b,p_value"]
        for row in self.rows:
            p = "" if row.p_value is None else repr(row.p_value)
            for group, (a, b) in row.groups.items():
                lines.append(f"{row.name},{row.kind},{group},{a!r},{b!r},{p}")
        Path(path).write_text("\n".join(lines) + "\n")


def summarize(cohort: Cohort) -> SummaryTable:
    """Per indicator and group (label 0, label 1, all): mean and sample sd
    (n-1) for continuous indicators, count and percent for binary ones, plus
    a Welch t-test p-value comparing the two label groups."""
    labels = cohort.labels()
    masks = {"0": labels == 0, "1": labels == 1, "all": np.ones(cohort.n, dtype=bool)}
    for key in ("0", "1"):
        if masks[key].sum() < 2:
            raise DegenerateDataError(f"label group {key} has fewer than 2 members")
    X = cohort.feature_matrix(cohort.indicator_names())
    rows: list[SummaryRow] = []
    warnings: list[str] = []
    for j, spec in enumerate(cohort.indicators):
        col = X[:, j]
        groups: dict[str, tuple[float, float]] = {}
        for key, mask in masks.items():
            vals = col[mask]
            if spec.kind == "binary":
                count = float(vals.sum())
                groups[key] = (count, 100.0 * count / vals.size)
            else:
                groups[key] = (float(vals.mean()), float(vals.std(ddof=1)))
        try:
            _, p = ttest(col[masks["1"]], col[masks["0"]])
        except DegenerateDataError as exc:
            p = None
            warnings.append(f"{spec.name}: t-test skipped ({exc})")
        rows.append(SummaryRow(name=spec.name, kind=spec.kind, groups=groups, p_value=p))
    return SummaryTable(
        rows=rows,
        group_sizes={k: int(m.sum()) for k, m in masks.items()},
        warnings=warnings,
    )


# ---- Welch t-test -----------------------------------------------------------


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, 500):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-12:
            return h
    raise NumericalError(f"incomplete beta did not converge (a={a}, b={b}, x={x})")


def betainc_reg(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b), absolute accuracy ~1e-12."""
    if a <= 0.0 or b <= 0.0:
        raise ParameterError(f"beta parameters must be positive, got a={a}, b={b}")
    if not (0.0 <= x <= 1.0):
        raise ParameterError(f"x must be in [0, 1], got {x}")
    if x == 0.0:
        return 0.0
    if x == 1.0:
        return 1.0
    front = math.exp(
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
        + a * math.log(x) + b * math.log1p(-x)
    )
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def _t_two_sided_p(t: float, nu: float) -> float:
    """Two-sided Student-t p-value via I_x(nu/2, 1/2) with x = nu/(nu+t^2)."""
    x = nu / (nu + t * t)
    p = betainc_reg(nu / 2.0, 0.5, x)
    return float(min(1.0, max(0.0, p)))


def ttest(group_a: np.ndarray, group_b: np.ndarray) -> tuple[float, float]:
    """Welch's unequal-variance t-test; returns (t, two-sided p)."""
    a = np.asarray(group_a, dtype=np.float64).reshape(-1)
    b = np.asarray(group_b, dtype=np.float64).reshape(-1)
    if a.size < 2 or b.size < 2:
        raise DegenerateDataError(f"each group needs >= 2 observations, got {a.size} and {b.size}")
    va, vb = float(a.var(ddof=1)), float(b.var(ddof=1))
    sa, sb = va / a.size, vb / b.size
    se2 = sa + sb
    if se2 <= 0.0:
        raise DegenerateDataError("both groups are constant; t statistic undefined")
    t = (float(a.mean()) - float(b.mean())) / math.sqrt(se2)
    nu = se2 * se2 / (sa * sa / (a.size - 1) + sb * sb / (b.size - 1))
    return t, _t_two_sided_p(t, nu)


# ---- Shapley ----------------------------------------------------------------

# value_fn contract: given a boolean matrix (M, p) of inclusion masks, return
# a float vector (M,) of set-function values. Vectorizing the masks keeps
# model-backed value functions batched.
ValueFn = Callable[[np.ndarray], np.ndarray]

EXACT_LIMIT = 12


def _evaluate(value_fn: ValueFn, masks: np.ndarray) -> np.ndarray:
    values = np.asarray(value_fn(masks), dtype=np.float64).reshape(-1)
    if values.shape[0] != masks.shape[0]:
        raise DimensionError(
            f"value_fn returned {values.shape[0]} values for {masks.shape[0]} masks"
        )
    return values


def shapley_exact(value_fn: ValueFn, n_features: int) -> np.ndarray:
    """Exact Shapley values by subset enumeration: for each feature j,
    phi_j = sum over S not containing j of |S|!(p-|S|-1)!/p! * (v(S+j) - v(S)).
    Hard-limited to p <= 12 (4096 subsets)."""
    p = int(n_features)
    if p < 1:
        raise ParameterError(f"n_features must be >= 1, got {p}")
    if p > EXACT_LIMIT:
        raise ParameterError(
            f"exact enumeration is limited to p <= {EXACT_LIMIT} (got {p}); use shapley_sampled"
        )
    idx = np.arange(2 ** p, dtype=np.int64)
    masks = ((idx[:, None] >> np.arange(p)) & 1).astype(bool)
    values = _evaluate(value_fn, masks)
    sizes = masks.sum(axis=1)
    fact = [math.factorial(i) for i in range(p + 1)]
    weights = np.array([fact[s] * fact[p - s - 1] / fact[p] for s in range(p)])
    phi = np.empty(p, dtype=np.float64)
    for j in range(p):
        without = np.flatnonzero(~masks[:, j])
        with_j = without + (1 << j)
        phi[j] = float(np.sum(weights[sizes[without]] * (values[with_j] - values[without])))
    return phi


def shapley_sampled(
    value_fn: ValueFn,
    n_features: int,
    n_perm: int,
    seed: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Permutation-sampling Shapley estimate: average marginal contribution
    over n_perm uniformly random feature orders. Returns (phi, standard
    error); the SE is ddof-1 over per-permutation marginals (NaN when
    n_perm == 1). Deterministic under seed."""
    p = int(n_features)
    if p < 1:
        raise ParameterError(f"n_features must be >= 1, got {p}")
    if n_perm < 1:
        raise ParameterError(f"n_perm must be >= 1, got {n_perm}")
    rng = np.random.default_rng(seed)
    perms = np.stack([rng.permutation(p) for _ in range(n_perm)])
    onehot = np.eye(p, dtype=bool)[perms]  # (n_perm, p, p)
    prefixes = np.zeros((n_perm, p + 1, p), dtype=bool)
    prefixes[:, 1:] = np.cumsum(onehot, axis=1) > 0
    values = _evaluate(value_fn, prefixes.reshape(-1, p)).reshape(n_perm, p + 1)
    diffs = values[:, 1:] - values[:, :-1]  # marginal of perms[r, k] at slot k
    contrib = np.empty((n_perm, p), dtype=np.float64)
    np.put_along_axis(contrib, perms, diffs, axis=1)
    phi = contrib.mean(axis=0)
    if n_perm > 1:
        se = contrib.std(axis=0, ddof=1) / math.sqrt(n_perm)
    else:
        se = np.full(p, np.nan)
    return phi, se


def imputation_value_fn(
    predict_rows: Callable[[np.ndarray], np.ndarray],
    sample_row: np.ndarray,
    baseline_row: np.ndarray,
) -> ValueFn:
    """Interventional value function: indicators outside the mask are
    replaced by their baseline (training-mean) values, then scored."""
    sample_row = np.asarray(sample_row, dtype=np.float64).reshape(-1)
    baseline_row = np.asarray(baseline_row, dtype=np.float64).reshape(-1)
    if sample_row.shape != baseline_row.shape:
        raise DimensionError("sample and baseline rows must have equal length")

    def value_fn(masks: np.ndarray) -> np.ndarray:
        X = np.where(masks, sample_row[None, :], baseline_row[None, :])
        return predict_rows(X)

    return value_fn


@dataclass
class ShapleyReport:
    names: tuple[str, ...]
    phi: np.ndarray  # (n_samples, p)
    se: np.ndarray | None  # (n_samples, p) for sampled mode
    mode: str  # "exact" | "sampled"
    n_perm: int | None
    seed: int | None
    value_description: str

    def global_mean_abs(self) -> np.ndarray:
        return np.abs(self.phi).mean(axis=0)

    def ranking(self) -> list[tuple[str, float]]:
        scores = self.global_mean_abs()
        order = sorted(range(len(self.names)), key=lambda j: (-scores[j], self.names[j]))
        return [(self.names[j], float(scores[j])) for j in order]


def model_shapley_report(
    predict_rows: Callable[[np.ndarray], np.ndarray],
    X_samples: np.ndarray,
    baseline_row: np.ndarray,
    names: Sequence[str],
    n_perm: int = 2000,
    seed: int = 0,
    exact: bool = False,
    value_description: str = "baseline-mean imputation over model score",
) -> ShapleyReport:
    """Per-sample Shapley attributions for a batched row-scoring model.
    Sample i uses an independent child seed of `seed`, so reports are
    deterministic and independent of sample order."""
    X_samples = np.asarray(X_samples, dtype=np.float64)
    if X_samples.ndim != 2 or X_samples.shape[1] != len(names):
        raise DimensionError(f"X_samples must be (m, {len(names)}), got {X_samples.shape}")
    m, p = X_samples.shape
    child_seeds = np.random.SeedSequence(seed).generate_state(m, dtype=np.uint64)
    phi = np.empty((m, p), dtype=np.float64)
    se = None if exact else np.empty((m, p), dtype=np.float64)
    for i in range(m):
        vf = imputation_value_fn(predict_rows, X_samples[i], baseline_row)
        if exact:
            phi[i] = shapley_exact(vf, p)
        else:
            phi[i], se[i] = shapley_sampled(vf, p, n_perm=n_perm, seed=int(child_seeds[i]))
    return ShapleyReport(
        names=tuple(names),
        phi=phi,
        se=se,
        mode="exact" if exact else "sampled",
        n_perm=None if exact else n_perm,
        seed=seed,
        value_description=value_description,
    )


# ---- selection pipeline -------------------------------------------------------


@dataclass(frozen=True)
class SelectionConfig:
    top_pearson: int = 21
    habit_names: tuple[str, ...] = ("SMOKE", "DRINK")
    gender_name: str = "MALE"
    final_core: tuple[str, ...] = ("BMI", "WEIGHT")
    final_top: int = 7
    shap_samples: int = 64
    shap_n_perm: int = 2000
    seed: int = 0


@dataclass
class SelectionResult:
    stage1: list[str]
    stage1_augmented: list[str]
    final8: list[str]
    final3: list[str]
    provenance: dict

    def to_dict(self) -> dict:
        return {
            "stage1": self.stage1,
            "stage1_augmented": self.stage1_augmented,
            "final8": self.final8,
            "final3": self.final3,
            "provenance": self.provenance,
        }

    def write_json(self, path: "str | Path") -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n")

    @classmethod
    def from_dict(cls, d: dict) -> "SelectionResult":
        return cls(
            stage1=list(d["stage1"]),
            stage1_augmented=list(d["stage1_augmented"]),
            final8=list(d["final8"]),
            final3=list(d["final3"]),
            provenance=dict(d.get("provenance", {})),
        )


def stage1_augmented_names(cohort: Cohort, config: SelectionConfig = SelectionConfig()) -> list[str]:
    """Correlation screen: top-k by |rho| against the label, then the
    hand-added habit indicators appended (if not already ranked in)."""
    count = len(cohort.indicator_names())
    if config.top_pearson > count:
        raise ConfigError(f"top_pearson={config.top_pearson} exceeds indicator count {count}")
    missing = [h for h in config.habit_names if h not in cohort.indicator_names()]
    if missing:
        raise ConfigError(f"habit indicators not in cohort: {', '.join(missing)}")
    ranking = rank_by_pearson(cohort, "label", top_k=config.top_pearson)
    stage1 = ranking.names()
    return stage1 + [h for h in config.habit_names if h not in stage1]


def select_indicators(cohort: Cohort, model, config: SelectionConfig = SelectionConfig()) -> SelectionResult:
    """Two-stage selection: Pearson screen to the augmented set, then global
    Shapley ranking of a model trained on that set. final8 is the top-7 by
    mean |phi| excluding the gender indicator, plus the gender indicator;
    final3 is the core pair + gender intersected with final8."""
    ranking = rank_by_pearson(cohort, "label", top_k=config.top_pearson)
    stage1 = ranking.names()
    augmented = stage1 + [h for h in config.habit_names if h not in stage1]
    missing = [h for h in config.habit_names if h not in cohort.indicator_names()]
    if missing:
        raise ConfigError(f"habit indicators not in cohort: {', '.join(missing)}")
    if config.gender_name not in augmented:
        raise ConfigError(f"gender indicator {config.gender_name!r} not in the augmented set")

    model_names = tuple(model.indicator_names)
    if model_names != tuple(augmented):
        raise ConfigError(
            "model was trained on a different indicator set than the augmented screen: "
            f"model={list(model_names)} vs expected={augmented}"
        )

    rng = np.random.default_rng(config.seed)
    n_samples = min(config.shap_samples, cohort.n)
    sample_idx = np.sort(rng.choice(cohort.n, size=n_samples, replace=False))
    X = cohort.feature_matrix(augmented)[sample_idx]
    report = model_shapley_report(
        predict_rows=model.predict_rows,
        X_samples=X,
        baseline_row=np.asarray(model.input_means, dtype=np.float64),
        names=augmented,
        n_perm=config.shap_n_perm,
        seed=config.seed,
    )
    shap_ranking = report.ranking()

    non_gender = [name for name, _ in shap_ranking if name != config.gender_name]
    if config.final_top > len(non_gender):
        raise ConfigError(f"final_top={config.final_top} exceeds available indicators")
    final8 = non_gender[: config.final_top] + [config.gender_name]
    final3 = [n for n in (*config.final_core, config.gender_name) if n in final8]

    provenance = {
        "pearson": {name: rho for name, rho in ranking.entries},
        "shapley_global": {name: score for name, score in shap_ranking},
        "shap_samples": [int(i) for i in sample_idx],
        "shap_n_perm": config.shap_n_perm,
        "seed": config.seed,
        "value_function": report.value_description,
    }
    return SelectionResult(
        stage1=stage1,
        stage1_augmented=augmented,
        final8=final8,
        final3=final3,
        provenance=provenance,
    )
