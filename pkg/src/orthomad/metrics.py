"""APCER / BPCER / EER / DET for presentation-attack style scores.

Scores are oriented so that a higher score means "more bona fide": a sample
is classified bona fide when ``score >= threshold``. All rates are exact
empirical fractions; nothing is interpolated between thresholds.
"""
from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, Iterable, List, Sequence, Tuple, Union

import numpy as np

from .tensor import ContractError

BONA_FIDE, ATTACK = 1, 0
APCER_TARGETS = (0.01, 0.20)


class ScoreFileError(ValueError):
    pass


@dataclass
class ScoreSet:
    sample_ids: List[str]
    labels: np.ndarray
    scores: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if not (len(self.sample_ids) == len(self.labels) == len(self.scores)):
            raise ContractError("sample_ids, labels and scores must have equal length")
        if not np.all((self.labels == 0) | (self.labels == 1)):
            raise ContractError("labels must be 0 (attack) or 1 (bona fide)")
        if not np.all(np.isfinite(self.scores)):
            raise ContractError("scores must be finite")

    @classmethod
    def from_arrays(cls, labels, scores, sample_ids=None) -> "ScoreSet":
        labels = np.asarray(labels)
        if sample_ids is None:
            sample_ids = [f"s{i:06d}" for i in range(len(labels))]
        return cls(list(sample_ids), labels, scores)

    @property
    def n_attack(self) -> int:
        return int(np.sum(self.labels == ATTACK))

    @property
    def n_bona_fide(self) -> int:
        return int(np.sum(self.labels == BONA_FIDE))

    def __len__(self):
        return len(self.scores)

    def attack_scores(self) -> np.ndarray:
        return self.scores[self.labels == ATTACK]

    def bona_fide_scores(self) -> np.ndarray:
        return self.scores[self.labels == BONA_FIDE]

    def require_both_classes(self) -> None:
        if self.n_attack == 0 or self.n_bona_fide == 0:
            raise ContractError(
                f"need at least one attack and one bona fide score "
                f"(got {self.n_attack} attacks, {self.n_bona_fide} bona fide)")


def candidate_thresholds(scores: np.ndarray) -> np.ndarray:
    """Distinct scores, midpoints between neighbours, and -inf/+inf, ascending."""
    u = np.unique(np.asarray(scores, dtype=np.float64))
    mids = (u[:-1] + u[1:]) / 2
    return np.unique(np.concatenate([[-np.inf, np.inf], u, mids]))


def _counts(ss: ScoreSet, thresholds: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """(attacks accepted, bona fide rejected) at each threshold."""
    att = np.sort(ss.attack_scores())
    bf = np.sort(ss.bona_fide_scores())
    k_att = len(att) - np.searchsorted(att, thresholds, side="left")
    k_bf = np.searchsorted(bf, thresholds, side="left")
    return k_att.astype(np.int64), k_bf.astype(np.int64)


def apcer_bpcer_at(ss: ScoreSet, threshold: float) -> Tuple[float, float]:
    ss.require_both_classes()
    k_att, k_bf = _counts(ss, np.array([threshold], dtype=np.float64))
    return int(k_att[0]) / ss.n_attack, int(k_bf[0]) / ss.n_bona_fide


def eer(ss: ScoreSet) -> Tuple[float, float]:
    """Equal error rate and its threshold.

    Picks the candidate threshold minimising |APCER - BPCER| (smallest
    threshold on ties) and reports the mean of the two rates there.
    """
    ss.require_both_classes()
    na, nb = ss.n_attack, ss.n_bona_fide
    thr = candidate_thresholds(ss.scores)
    k_att, k_bf = _counts(ss, thr)
    # compare k_att/na against k_bf/nb on a common denominator
    gap = np.abs(k_att * nb - k_bf * na)
    i = int(np.argmin(gap))
    value = (int(k_att[i]) * nb + int(k_bf[i]) * na) / (2 * na * nb)
    return value, float(thr[i])


def bpcer_at_apcer(ss: ScoreSet, target: float) -> Tuple[float, float]:
    """Lowest BPCER over thresholds whose APCER does not exceed ``target``."""
    if not 0.0 < target < 1.0:
        raise ContractError(f"target APCER must lie in (0, 1), got {target}")
    ss.require_both_classes()
    na = ss.n_attack
    thr = candidate_thresholds(ss.scores)
    k_att, k_bf = _counts(ss, thr)
    t = Fraction(target)
    ok = [int(k) * t.denominator <= t.numerator * na for k in k_att]
    # APCER is non-increasing in the threshold, so qualifying thresholds form a suffix
    i = ok.index(True)
    return int(k_bf[i]) / ss.n_bona_fide, float(thr[i])


def det_curve(ss: ScoreSet) -> List[Tuple[float, float, float]]:
    """(apcer, bpcer, threshold) at every candidate threshold, ascending."""
    ss.require_both_classes()
    thr = candidate_thresholds(ss.scores)
    k_att, k_bf = _counts(ss, thr)
    na, nb = ss.n_attack, ss.n_bona_fide
    return [(int(a) / na, int(b) / nb, float(t)) for a, b, t in zip(k_att, k_bf, thr)]


@dataclass
class MetricsReport:
    eer: float
    eer_threshold: float
    bpcer_at_apcer: Dict[float, Tuple[float, float]]
    det_points: List[Tuple[float, float, float]] = field(repr=False)
    n_attack: int = 0
    n_bona_fide: int = 0

    def to_json(self) -> dict:
        return {
            "eer": self.eer,
            "eer_threshold": _json_float(self.eer_threshold),
            "bpcer_at_apcer": {
                f"{target:.2f}": {"bpcer": b, "threshold": _json_float(t)}
                for target, (b, t) in sorted(self.bpcer_at_apcer.items())
            },
            "counts": {"attack": self.n_attack, "bona_fide": self.n_bona_fide},
        }

    def summary(self) -> str:
        """One line in percent with two decimals, e.g. ``EER 0.73% | BPCER@APCER=1% 0.73% | ...``."""
        parts = [f"EER {100 * self.eer:.2f}%"]
        for target, (b, _) in sorted(self.bpcer_at_apcer.items()):
            parts.append(f"BPCER@APCER={100 * target:g}% {100 * b:.2f}%")
        return " | ".join(parts)


def _json_float(x: float) -> Union[float, str]:
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return x


def compute_report(ss: ScoreSet, targets: Sequence[float] = APCER_TARGETS) -> MetricsReport:
    e, t = eer(ss)
    return MetricsReport(
        eer=e, eer_threshold=t,
        bpcer_at_apcer={target: bpcer_at_apcer(ss, target) for target in targets},
        det_points=det_curve(ss),
        n_attack=ss.n_attack, n_bona_fide=ss.n_bona_fide,
    )


# ---------------------------------------------------------------------------
# files

SCORE_HEADER = ["sample_id", "label", "score"]


def write_scores(path: Union[str, os.PathLike], ss: ScoreSet) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SCORE_HEADER)
        for sid, lab, s in zip(ss.sample_ids, ss.labels, ss.scores):
            w.writerow([sid, int(lab), repr(float(s))])


def read_scores(path: Union[str, os.PathLike]) -> ScoreSet:
    ids, labels, scores = [], [], []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != SCORE_HEADER:
            raise ScoreFileError(f"{path}: line 1: expected header {','.join(SCORE_HEADER)}")
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != 3:
                raise ScoreFileError(f"{path}: line {line}: expected 3 fields, got {len(row)}")
            try:
                lab, s = int(row[1]), float(row[2])
            except ValueError:
                raise ScoreFileError(f"{path}: line {line}: malformed label or score") from None
            if lab not in (0, 1) or not math.isfinite(s):
                raise ScoreFileError(f"{path}: line {line}: label must be 0/1 and score finite")
            ids.append(row[0])
            labels.append(lab)
            scores.append(s)
    return ScoreSet(ids, np.array(labels, dtype=np.int64), np.array(scores, dtype=np.float64))


def write_report(path: Union[str, os.PathLike], report: MetricsReport) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_json(), fh, indent=2)
        fh.write("\n")


def write_det(path: Union[str, os.PathLike], points: Iterable[Tuple[float, float, float]]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "apcer", "bpcer"])
        for a, b, t in points:
            w.writerow([repr(t), repr(a), repr(b)])
