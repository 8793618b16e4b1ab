"""Segmentation, key-shot selection and evaluation metrics."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .errors import DomainError, InputError, ShapeError, UndefinedCoefficientError

DEFAULT_BUDGET = 0.15
UNSUPPORTED_PROTOCOLS = ("two-peak", "randomized-kts")


# -- segmentation ----------------------------------------------------------


@dataclass(frozen=True)
class SegmentList:
    """Boundaries ``0 = c_0 < c_1 < ... < c_k = T``; segment j is
    ``[c_j, c_{j+1})``."""

    bounds: tuple

    def __post_init__(self):
        b = tuple(int(x) for x in self.bounds)
        if len(b) < 2 or b[0] != 0 or any(x >= y for x, y in zip(b, b[1:])):
            raise InputError(f"invalid segment boundaries {b}")
        object.__setattr__(self, "bounds", b)

    @classmethod
    def from_change_points(cls, cps, T: int) -> "SegmentList":
        return cls((0, *sorted(int(c) for c in cps), T))

    @property
    def T(self) -> int:
        return self.bounds[-1]

    @property
    def change_points(self) -> list[int]:
        return list(self.bounds[1:-1])

    def segments(self) -> list[tuple[int, int]]:
        return list(zip(self.bounds[:-1], self.bounds[1:]))

    def lengths(self) -> np.ndarray:
        return np.diff(self.bounds)

    def labels(self) -> np.ndarray:
        """Segment index of every frame."""
        return np.repeat(np.arange(len(self)), self.lengths())

    def __len__(self):
        return len(self.bounds) - 1


def segment_scatter_table(features) -> np.ndarray:
    """``J[i, j]`` = within-segment scatter of frames ``[i, j)`` under the
    linear kernel, i.e. ``sum ||x_t - mean||^2``."""
    X = np.asarray(features, dtype=np.float64)
    K = X @ X.T
    T = K.shape[0]
    diag = np.concatenate([[0.0], np.cumsum(np.diag(K))])
    S = np.zeros((T + 1, T + 1))
    S[1:, 1:] = np.cumsum(np.cumsum(K, axis=0), axis=1)
    i = np.arange(T + 1)[:, None]
    j = np.arange(T + 1)[None, :]
    length = np.maximum(j - i, 1)
    block = S[j, j] - S[i, j] - S[j, i] + S[i, i]
    J = (diag[j] - diag[i]) - block / length
    J[j <= i] = np.inf
    return J


def kts_dp(features, n_change_points: int, table: np.ndarray | None = None):
    """Optimal placement of exactly ``n_change_points`` boundaries.

    Returns ``(change_points, total_scatter)``.
    """
    J = segment_scatter_table(features) if table is None else table
    T = J.shape[0] - 1
    m = int(n_change_points)
    if not 0 <= m <= T - 1:
        raise InputError(f"cannot place {m} change points in {T} frames")
    cost = np.full((m + 1, T + 1), np.inf)
    arg = np.zeros((m + 1, T + 1), dtype=int)
    cost[0, 1:] = J[0, 1:]
    for k in range(1, m + 1):
        for end in range(k + 1, T + 1):
            cand = cost[k - 1, k:end] + J[k:end, end]
            best = int(np.argmin(cand))
            cost[k, end] = cand[best]
            arg[k, end] = best + k
    cps, end = [], T
    for k in range(m, 0, -1):
        end = arg[k, end]
        cps.append(end)
    return sorted(cps), float(cost[m, T])


def kts_costs(features, penalty: float = 1.0, max_segments: int | None = None):
    """Penalised cost for 0..max_segments-1 change points."""
    X = np.asarray(features, dtype=np.float64)
    T = X.shape[0]
    if T < 2:
        raise InputError("KTS needs at least two frames")
    if max_segments is None:
        max_segments = math.ceil(T / 15)
    m_max = max(0, min(int(max_segments) - 1, T - 1))
    J = segment_scatter_table(X)
    out = []
    for m in range(m_max + 1):
        cps, scatter = kts_dp(X, m, J)
        pen = 0.0 if m == 0 else penalty * m * (math.log(T / m) + 1.0)
        out.append((scatter + pen, cps))
    return out


def kts_segment(features, penalty: float = 1.0, max_segments: int | None = None) -> SegmentList:
    """Kernel temporal segmentation with a linear kernel; the number of
    change points minimises ``scatter + penalty * m * (log(T/m) + 1)``."""
    costs = kts_costs(features, penalty, max_segments)
    best = min(range(len(costs)), key=lambda m: costs[m][0])
    T = np.asarray(features).shape[0]
    return SegmentList.from_change_points(costs[best][1], T)


# -- key-shot selection ----------------------------------------------------


def budget_frames(T: int, budget: float) -> int:
    # the epsilon absorbs products like 0.15 * 20 = 3.0000000000000004 or 2.9999...
    return int(math.floor(budget * T + 1e-9))


def knapsack(values, weights, capacity: int) -> list[int]:
    """Exact 0/1 knapsack; returns chosen item indices in ascending order."""
    n = len(values)
    best = np.zeros((n + 1, capacity + 1))
    for i in range(1, n + 1):
        w, v = int(weights[i - 1]), float(values[i - 1])
        best[i] = best[i - 1]
        if w <= capacity:
            take = best[i - 1, : capacity + 1 - w] + v
            best[i, w:] = np.maximum(best[i - 1, w:], take)
    chosen, cap = [], capacity
    for i in range(n, 0, -1):
        if best[i, cap] != best[i - 1, cap]:
            chosen.append(i - 1)
            cap -= int(weights[i - 1])
    return sorted(chosen)


@dataclass
class Summary:
    selection: np.ndarray
    budget: float = DEFAULT_BUDGET
    segments: list[int] = field(default_factory=list)

    @property
    def n_selected(self) -> int:
        return int(self.selection.sum())


def knapsack_select(frame_scores, segs: SegmentList, budget: float = DEFAULT_BUDGET) -> Summary:
    scores = np.asarray(frame_scores, dtype=np.float64).ravel()
    if not 0 < budget <= 1:
        raise InputError("budget must lie in (0, 1]")
    if scores.size != segs.T:
        raise ShapeError(f"{scores.size} scores for {segs.T} frames")
    values = [scores[a:b].mean() for a, b in segs.segments()]
    weights = segs.lengths()
    cap = budget_frames(segs.T, budget)
    picks = knapsack(values, weights, cap)
    sel = np.zeros(segs.T, dtype=bool)
    for j in picks:
        a, b = segs.segments()[j]
        sel[a:b] = True
    assert sel.sum() <= cap
    return Summary(sel, budget, picks)


# -- metrics ---------------------------------------------------------------


def f1_keyshot(machine, user_summaries, agg: str = "mean") -> float:
    """Harmonic-mean F-score (percent) against each user summary,
    aggregated by ``mean`` or ``max``."""
    m = np.asarray(getattr(machine, "selection", machine)).astype(bool).ravel()
    users = np.atleast_2d(np.asarray(user_summaries)).astype(bool)
    if users.shape[1] != m.size:
        raise ShapeError(f"machine summary has {m.size} frames, users {users.shape[1]}")
    scores = []
    for u in users:
        overlap = float(np.sum(m & u))
        p = overlap / m.sum() if m.sum() else 0.0
        r = overlap / u.sum() if u.sum() else 0.0
        scores.append(0.0 if p + r == 0 else 2 * p * r / (p + r) * 100.0)
    if agg == "mean":
        return float(np.mean(scores))
    if agg == "max":
        return float(np.max(scores))
    raise InputError(f"unknown aggregation {agg!r}")


def _paired(pred, ref):
    a = np.asarray(pred, dtype=np.float64).ravel()
    b = np.asarray(ref, dtype=np.float64).ravel()
    if a.size != b.size:
        raise ShapeError(f"lengths differ: {a.size} vs {b.size}")
    if a.size < 2:
        raise InputError("need at least two items")
    return a, b


def kendall_tau(pred, ref) -> float:
    """Tie-aware Kendall tau-b."""
    a, b = _paired(pred, ref)
    if np.all(a == a[0]) or np.all(b == b[0]):
        raise UndefinedCoefficientError("tau-b undefined: one side is fully tied")
    return float(stats.kendalltau(a, b, variant="b").statistic)


def spearman_rho(pred, ref) -> float:
    """Pearson correlation of average ranks."""
    a, b = _paired(pred, ref)
    ra = stats.rankdata(a) - (a.size + 1) / 2.0
    rb = stats.rankdata(b) - (b.size + 1) / 2.0
    den = math.sqrt(float(ra @ ra) * float(rb @ rb))
    if den == 0.0:
        raise UndefinedCoefficientError("rho undefined: zero rank variance")
    return float(ra @ rb) / den


@dataclass
class RankCorrelation:
    tau: float
    rho: float
    annotators: int
    skipped_tau: int = 0
    skipped_rho: int = 0


def rank_correlation_protocol(pred, user_scores) -> RankCorrelation:
    """Average tau and rho against each annotator's frame scores; annotators
    for whom a coefficient is undefined are skipped and counted."""
    users = np.atleast_2d(np.asarray(user_scores, dtype=np.float64))
    taus, rhos = [], []
    for u in users:
        try:
            taus.append(kendall_tau(pred, u))
        except UndefinedCoefficientError:
            pass
        try:
            rhos.append(spearman_rho(pred, u))
        except UndefinedCoefficientError:
            pass
    if not taus or not rhos:
        raise UndefinedCoefficientError("no annotator yields a defined coefficient")
    U = users.shape[0]
    return RankCorrelation(float(np.mean(taus)), float(np.mean(rhos)), U,
                           U - len(taus), U - len(rhos))


def inter_annotator_correlation(user_scores) -> RankCorrelation:
    """Each annotator scored against the rest (leave-one-out average), the
    usual 'human' reference row."""
    users = np.atleast_2d(np.asarray(user_scores, dtype=np.float64))
    res = [rank_correlation_protocol(users[i], np.delete(users, i, axis=0))
           for i in range(users.shape[0])]
    return RankCorrelation(float(np.mean([r.tau for r in res])),
                           float(np.mean([r.rho for r in res])), users.shape[0])


# -- correlation curves ----------------------------------------------------


@dataclass
class CorrelationCurve:
    fractions: np.ndarray
    model: np.ndarray
    mean_annotator: np.ndarray
    random_expectation: np.ndarray
    annotators: np.ndarray  # U x samples
    lower: np.ndarray


def _captured(order_scores, importance, ks):
    order = np.argsort(-np.asarray(order_scores, dtype=np.float64), kind="stable")
    cum = np.concatenate([[0.0], np.cumsum(importance[order])])
    return cum[ks] / cum[-1]


def correlation_curve(pred, user_scores, samples: int = 101) -> CorrelationCurve:
    """Fraction of total mean-annotator importance captured by the top-k
    frames when ranked by ``pred``; ``k = round(fraction * T)``."""
    if samples < 2:
        raise InputError("samples must be >= 2")
    users = np.atleast_2d(np.asarray(user_scores, dtype=np.float64))
    importance = users.mean(axis=0)
    if importance.sum() <= 0:
        raise DomainError("mean annotator importance sums to zero")
    T = importance.size
    pred = np.asarray(pred, dtype=np.float64).ravel()
    if pred.size != T:
        raise ShapeError(f"{pred.size} predictions for {T} frames")
    fr = np.linspace(0.0, 1.0, samples)
    ks = np.rint(fr * T).astype(int)
    return CorrelationCurve(
        fractions=fr,
        model=_captured(pred, importance, ks),
        mean_annotator=_captured(importance, importance, ks),
        random_expectation=ks / T,
        annotators=np.array([_captured(u, importance, ks) for u in users]),
        lower=_captured(-importance, importance, ks),
    )


def write_curve_csv(path, curve: CorrelationCurve, comment: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if comment:
            fh.write("# " + comment + "\n")
        w = csv.writer(fh, lineterminator="\n")
        U = curve.annotators.shape[0]
        w.writerow(["fraction", "model", "mean_annotator", "random_expectation"]
                   + [f"annotator_{i}" for i in range(U)])
        for i, f in enumerate(curve.fractions):
            w.writerow([repr(float(x)) for x in
                        (f, curve.model[i], curve.mean_annotator[i],
                         curve.random_expectation[i], *curve.annotators[:, i])])


def curve_svg(curve: CorrelationCurve, size: int = 320) -> str:
    """Self-contained SVG: annotators in red, model in magenta, random
    expectation dashed black."""
    pad = 20
    span = size - 2 * pad

    def poly(ys, style):
        pts = " ".join(f"{pad + x * span:.2f},{pad + (1 - y) * span:.2f}"
                       for x, y in zip(curve.fractions, ys))
        return f'<polyline fill="none" {style} points="{pts}"/>'

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" '
             f'height="{size}" viewBox="0 0 {size} {size}">',
             f'<rect x="{pad}" y="{pad}" width="{span}" height="{span}" '
             'fill="none" stroke="#999"/>']
    for row in curve.annotators:
        parts.append(poly(row, 'stroke="red" stroke-opacity="0.4"'))
    parts.append(poly(curve.random_expectation, 'stroke="black" stroke-dasharray="4 3"'))
    parts.append(poly(curve.model, 'stroke="magenta" stroke-width="2"'))
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


# -- reports ---------------------------------------------------------------


@dataclass
class VideoResult:
    video_id: str
    f1: float
    tau: float
    rho: float
    skipped_annotators: int = 0


def aggregate(results: list[VideoResult]) -> dict:
    if not results:
        return {"f1": None, "tau": None, "rho": None}
    return {k: float(np.mean([getattr(r, k) for r in results]))
            for k in ("f1", "tau", "rho")}


def build_report(results: list[VideoResult], config_echo: dict, **extra) -> dict:
    report = {
        "per_video": {r.video_id: {"f1": r.f1, "tau": r.tau, "rho": r.rho}
                      for r in results},
        "aggregate": aggregate(results),
        "config_echo": config_echo,
        "protocol": {"segmentation": "kts", "unsupported": list(UNSUPPORTED_PROTOCOLS)},
    }
    report.update(extra)
    return report


def write_report(path, report: dict) -> None:
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
