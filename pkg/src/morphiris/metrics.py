"""Verification, detection and morph-vulnerability metrics.

Dissimilarity scores match when ``score < threshold``; similarity scores
when ``score >= threshold``. Detector scores are "higher = more morph-like"
and flag a morph when ``score >= threshold``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

DISSIMILARITY = "dissimilarity"
SIMILARITY = "similarity"


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class ScoreSet:
    mated: tuple[float, ...]
    nonmated: tuple[float, ...]
    polarity: str = DISSIMILARITY

    def __post_init__(self):
        object.__setattr__(self, "mated", tuple(float(x) for x in self.mated))
        object.__setattr__(self, "nonmated", tuple(float(x) for x in self.nonmated))
        if self.polarity not in (DISSIMILARITY, SIMILARITY):
            raise MetricError(f"unknown polarity {self.polarity!r}")
        if not all(math.isfinite(x) for x in self.mated + self.nonmated):
            raise MetricError("scores must be finite")

    def stats(self) -> dict:
        m, n = np.asarray(self.mated), np.asarray(self.nonmated)
        return {"mated": {"n": len(m), "mean": float(m.mean()), "std": float(m.std())} if len(m) else {"n": 0},
                "nonmated": {"n": len(n), "mean": float(n.mean()), "std": float(n.std())} if len(n) else {"n": 0}}


@dataclass(frozen=True)
class DecisionSet:
    """True = classified as morph, for both morph and bona fide presentations."""

    morph_decisions: tuple[bool, ...] = ()
    bonafide_decisions: tuple[bool, ...] = ()


@dataclass(frozen=True)
class MorphAttackRecord:
    """``attempts[system] = (scores of subject A probes, scores of subject B probes)``."""

    morph_id: str
    attempts: tuple[tuple[tuple[float, ...], tuple[float, ...]], ...]

    def __post_init__(self):
        fixed = tuple((tuple(map(float, a)), tuple(map(float, b))) for a, b in self.attempts)
        object.__setattr__(self, "attempts", fixed)

    @property
    def n_systems(self) -> int:
        return len(self.attempts)


# --------------------------------------------------------------- separability

def d_prime(scores: ScoreSet) -> float:
    """|mu_m - mu_n| / sqrt((sigma_m^2 + sigma_n^2) / 2), population deviations."""
    if len(scores.mated) < 2 or len(scores.nonmated) < 2:
        raise MetricError("d' needs at least 2 mated and 2 non-mated scores")
    m = np.asarray(scores.mated)
    n = np.asarray(scores.nonmated)
    denom = math.sqrt(0.5 * (m.var() + n.var()))
    diff = abs(m.mean() - n.mean())
    if denom == 0:
        return 0.0 if diff == 0 else math.inf
    return float(diff / denom)


# ------------------------------------------------------------------------ DET

def _rates(scores: ScoreSet, taus: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    m = np.sort(np.asarray(scores.mated))
    n = np.sort(np.asarray(scores.nonmated))
    below_n = np.searchsorted(n, taus, side="left")
    below_m = np.searchsorted(m, taus, side="left")
    if scores.polarity == DISSIMILARITY:
        fmr = below_n / len(n)
        fnmr = (len(m) - below_m) / len(m)
    else:
        fmr = (len(n) - below_n) / len(n)
        fnmr = below_m / len(m)
    return fmr, fnmr


def det_arrays(scores: ScoreSet) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if not scores.mated or not scores.nonmated:
        raise MetricError("DET needs non-empty mated and non-mated sets")
    taus = np.concatenate([[-np.inf], np.unique(np.asarray(scores.mated + scores.nonmated)), [np.inf]])
    fmr, fnmr = _rates(scores, taus)
    return taus, fmr, fnmr


def det_points(scores: ScoreSet) -> list[tuple[float, float, float]]:
    """(threshold, FMR, FNMR) at -inf, every distinct score, and +inf (ascending)."""
    taus, fmr, fnmr = det_arrays(scores)
    return [(float(t), float(a), float(b)) for t, a, b in zip(taus, fmr, fnmr)]


def rates_at(scores: ScoreSet, tau: float) -> tuple[float, float]:
    fmr, fnmr = _rates(scores, np.array([tau], dtype=np.float64))
    return float(fmr[0]), float(fnmr[0])


def eer(scores: ScoreSet) -> tuple[float, float]:
    """Equal error rate and its threshold.

    An exact FMR == FNMR point is taken as is (lowest threshold on ties);
    otherwise both rates and the threshold are interpolated linearly between
    the two DET points that bracket the crossing.
    """
    taus, fmr, fnmr = det_arrays(scores)
    diff = fmr - fnmr
    exact = np.nonzero(diff == 0)[0]
    if len(exact):
        k = exact[0]
        return float(fmr[k]), float(taus[k])
    cross = np.nonzero(np.sign(diff[:-1]) * np.sign(diff[1:]) < 0)[0]
    k = int(cross[0])
    t = diff[k] / (diff[k] - diff[k + 1])
    rate = fmr[k] + t * (fmr[k + 1] - fmr[k])
    lo, hi = taus[k], taus[k + 1]
    if np.isfinite(lo) and np.isfinite(hi):
        thr = lo + t * (hi - lo)
    else:
        thr = hi if np.isfinite(hi) else lo
    return float(rate), float(thr)


def fnmr_at_fmr(scores: ScoreSet, target_fmr: float) -> tuple[float, float]:
    """Lowest FNMR among DET points with FMR <= target (ties: lower FMR, then lower threshold)."""
    if not 0 < target_fmr < 1:
        raise MetricError("target FMR must lie in (0, 1)")
    taus, fmr, fnmr = det_arrays(scores)
    ok = np.nonzero(fmr <= target_fmr)[0]
    if not len(ok):
        raise MetricError(f"FMR never reaches {target_fmr}")
    k = min(ok, key=lambda i: (fnmr[i], fmr[i], taus[i]))
    return float(fnmr[k]), float(taus[k])


# ----------------------------------------------------------------- detection

def macer(d: DecisionSet) -> float:
    """Share of morphs accepted as bona fide."""
    if not d.morph_decisions:
        raise MetricError("MACER needs at least one morph decision")
    return sum(1 - int(bool(r)) for r in d.morph_decisions) / len(d.morph_decisions)


def bpcer(d: DecisionSet) -> float:
    """Share of bona fide presentations flagged as morphs."""
    if not d.bonafide_decisions:
        raise MetricError("BPCER needs at least one bona fide decision")
    return sum(int(bool(r)) for r in d.bonafide_decisions) / len(d.bonafide_decisions)


def detector_scoreset(morph_scores, bonafide_scores) -> ScoreSet:
    """Detector scores viewed as a similarity DET: FNMR is MACER, FMR is BPCER."""
    return ScoreSet(tuple(morph_scores), tuple(bonafide_scores), SIMILARITY)


def bpcer_at_macer(morph_scores: Sequence[float], bonafide_scores: Sequence[float],
                   target_macer: float) -> tuple[float, float]:
    """BPCER at the highest threshold keeping MACER <= target."""
    if not len(morph_scores) or not len(bonafide_scores):
        raise MetricError("need morph and bona fide scores")
    taus, bp, mc = det_arrays(detector_scoreset(morph_scores, bonafide_scores))
    ok = np.nonzero(mc <= target_macer)[0]
    if not len(ok):
        raise MetricError(f"MACER never reaches {target_macer}")
    k = ok[-1]
    return float(bp[k]), float(taus[k])


def confusion(morph_scores, bonafide_scores, threshold: float) -> dict:
    """Counts with morph as the positive class, flagged when score >= threshold."""
    m = np.asarray(morph_scores, dtype=np.float64)
    b = np.asarray(bonafide_scores, dtype=np.float64)
    tp = int((m >= threshold).sum())
    fp = int((b >= threshold).sum())
    return {"tp": tp, "fp": fp, "tn": int(len(b) - fp), "fn": int(len(m) - tp)}


# --------------------------------------------------------------------- misc

def triplet_loss(d_ap: float, d_an: float, margin: float) -> float:
    return max(d_ap - d_an + margin, 0.0)


def _matches(scores, tau: float, polarity: str) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64)
    return s < tau if polarity == DISSIMILARITY else s >= tau


def mmpmr(records: Sequence[MorphAttackRecord], tau: float, variant: str = "minmax",
          polarity: str = DISSIMILARITY, system: int = 0) -> float:
    """Mated morph presentation match rate of one recognition system.

    ``minmax``: share of morphs whose every contributing subject matches on
    its best attempt. ``prodavg``: mean over morphs of the product of each
    subject's fraction of matching attempts.
    """
    if not records:
        raise MetricError("no morph records")
    if variant not in ("minmax", "prodavg"):
        raise MetricError(f"unknown MMPMR variant {variant!r}")
    total = 0.0
    for rec in records:
        per_subject = rec.attempts[system]
        if any(len(a) == 0 for a in per_subject):
            raise MetricError(f"morph {rec.morph_id}: a subject has no attempts")
        hits = [_matches(a, tau, polarity) for a in per_subject]
        if variant == "minmax":
            total += float(all(h.any() for h in hits))
        else:
            total += float(np.prod([h.mean() for h in hits]))
    return total / len(records)


def rmmr(mmpmr_value: float, fnmr_value: float) -> float:
    """Relative morph match rate; exceeds 1 when rejection is high."""
    return mmpmr_value + fnmr_value


def map_matrix(records: Sequence[MorphAttackRecord], taus_per_system: Sequence[float], max_attempts: int,
               polarity: str = DISSIMILARITY) -> np.ndarray:
    """Morphing attack potential.

    Row i-1, column j-1 holds the share of morphs for which at least j
    systems are fooled with at least i successful attempts for each
    contributing subject. Only the first ``max_attempts`` attempts count.
    """
    if not records:
        raise MetricError("no morph records")
    if max_attempts < 1:
        raise MetricError("max_attempts must be >= 1")
    n_sys = len(taus_per_system)
    levels = np.zeros((len(records), n_sys), dtype=int)
    for r, rec in enumerate(records):
        if rec.n_systems != n_sys:
            raise MetricError(f"morph {rec.morph_id} covers {rec.n_systems} systems, expected {n_sys}")
        for s, (tau, per_subject) in enumerate(zip(taus_per_system, rec.attempts)):
            levels[r, s] = min(int(_matches(a[:max_attempts], tau, polarity).sum()) for a in per_subject)
    out = np.zeros((max_attempts, n_sys))
    for i in range(1, max_attempts + 1):
        fooled = (levels >= i).sum(axis=1)
        for j in range(1, n_sys + 1):
            out[i - 1, j - 1] = float((fooled >= j).mean())
    return out


# ---------------------------------------------------------------------- I/O

def save_det_csv(path, points: Sequence[tuple[float, float, float]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "fmr", "fnmr"])
        for t, a, b in points:
            w.writerow([repr(float(t)), repr(float(a)), repr(float(b))])


def load_det_csv(path) -> list[tuple[float, float, float]]:
    with open(path, newline="") as fh:
        return [(float(r["threshold"]), float(r["fmr"]), float(r["fnmr"])) for r in csv.DictReader(fh)]


def jsonable(x):
    """Replace non-finite floats with None and numpy values with plain Python ones."""
    if isinstance(x, dict):
        return {str(k): jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return jsonable(x.tolist())
    if isinstance(x, (np.floating, float)):
        return float(x) if math.isfinite(x) else None
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x
