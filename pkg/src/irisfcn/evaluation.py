"""Segmentation metrics, all-pairs matching, ROC and equal error rate."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .codec import IrisCode, match_min_hd
from .errors import DimensionError, IncomparableCodes, ValidationError

GENUINE, IMPOSTOR = "genuine", "impostor"


@dataclass
class SegScore:
    """Per-image counts and derived rates.

    ``fp_rate`` and ``fn_rate`` are class-normalised:
    ``FP / (FP + TN)`` and ``FN / (FN + TP)``.
    """

    precision: float
    recall: float
    f: float
    tp: int
    fp: int
    tn: int
    fn: int
    fp_rate: float
    fn_rate: float
    e1: float
    degenerate: bool = False


def _harmonic(p, r):
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def seg_metrics(pred, gt) -> SegScore:
    """Precision, recall, F and error rates of one predicted mask.

    When neither mask contains iris pixels the image is scored as perfect
    (P = R = 1) and flagged ``degenerate``.  An empty prediction against a
    non-empty truth has P = 0, and vice versa R = 0.
    """
    p = np.asarray(pred).astype(bool)
    g = np.asarray(gt).astype(bool)
    if p.shape != g.shape:
        raise DimensionError(f"prediction {p.shape} vs ground truth {g.shape}")
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    tn = int(p.size - tp - fp - fn)
    degenerate = tp + fp == 0 and tp + fn == 0
    if degenerate:
        prec = rec = 1.0
    else:
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
    fpr = fp / (fp + tn) if fp + tn else 0.0
    fnr = fn / (fn + tp) if fn + tp else 0.0
    return SegScore(prec, rec, _harmonic(prec, rec), tp, fp, tn, fn, fpr, fnr,
                    (fp + fn) / p.size if p.size else 0.0, degenerate)


def e1(preds, gts) -> float:
    """Mean fraction of pixels on which prediction and truth disagree.

    Accepts a single pair of masks or two equal-length sequences.
    """
    if isinstance(preds, np.ndarray) and preds.ndim == 2:
        preds, gts = [preds], [gts]
    preds, gts = list(preds), list(gts)
    if len(preds) != len(gts) or not preds:
        raise ValidationError("e1 needs equally many (>= 1) predictions and truths")
    total = 0.0
    for p, g in zip(preds, gts):
        p = np.asarray(p).astype(bool)
        g = np.asarray(g).astype(bool)
        if p.shape != g.shape:
            raise DimensionError(f"prediction {p.shape} vs ground truth {g.shape}")
        total += np.count_nonzero(p ^ g) / p.size
    return total / len(preds)


def e2(fp_rates, fn_rates) -> float:
    """Mean over images of ``(FP rate + FN rate) / 2``."""
    fp = np.atleast_1d(np.asarray(fp_rates, dtype=np.float64))
    fn = np.atleast_1d(np.asarray(fn_rates, dtype=np.float64))
    if fp.shape != fn.shape or fp.size == 0:
        raise ValidationError("e2 needs equally many (>= 1) FP and FN rates")
    return float(np.sum(fp + fn) / (2 * fp.size))


@dataclass
class MetricReport:
    names: list
    scores: list

    def _col(self, attr):
        return np.array([getattr(s, attr) for s in self.scores], dtype=np.float64)

    def mean(self, attr) -> float:
        return float(self._col(attr).mean())

    def std(self, attr) -> float:
        return float(self._col(attr).std())

    @property
    def e1(self) -> float:
        return self.mean("e1")

    @property
    def e2(self) -> float:
        return e2(self._col("fp_rate"), self._col("fn_rate"))

    def to_dict(self, extra: dict | None = None) -> dict:
        out = {"count": len(self.scores),
               "degenerate": sum(s.degenerate for s in self.scores),
               "E1": self.e1, "E2": self.e2,
               "per_image": [{"name": n, "P": s.precision, "R": s.recall, "F": s.f,
                              "degenerate": s.degenerate}
                             for n, s in zip(self.names, self.scores)]}
        for key, attr in (("P", "precision"), ("R", "recall"), ("F", "f")):
            out[key] = {"mean": self.mean(attr), "std": self.std(attr)}
        if extra:
            out.update(extra)
        return out


def evaluate_masks(pairs) -> MetricReport:
    """``pairs`` yields ``(name, pred, gt)``; dataset values are per-image means."""
    names, scores = [], []
    for name, pred, gt in pairs:
        names.append(name)
        scores.append(seg_metrics(pred, gt))
    if not scores:
        raise ValidationError("no mask pairs to evaluate")
    return MetricReport(names, scores)


# ---------------------------------------------------------------------------
# matching

@dataclass(frozen=True)
class ScorePair:
    probe_id: str
    gallery_id: str
    label: str
    hd: float
    rotation: int


@dataclass
class ScoreSet:
    pairs: list = field(default_factory=list)
    incomparable: int = 0

    @property
    def genuine(self) -> list:
        return [p.hd for p in self.pairs if p.label == GENUINE]

    @property
    def impostor(self) -> list:
        return [p.hd for p in self.pairs if p.label == IMPOSTOR]

    def sorted(self) -> "ScoreSet":
        return ScoreSet(sorted(self.pairs, key=lambda p: (p.probe_id, p.gallery_id)),
                        self.incomparable)


def _entries(gallery):
    out = []
    for i, item in enumerate(gallery):
        if len(item) == 2:
            identity, code = item
            out.append((str(i), str(identity), code))
        else:
            sid, identity, code = item
            out.append((str(sid), str(identity), code))
    return out


def all_pairs(gallery) -> ScoreSet:
    """Match every unordered pair of ``(id, identity, code)`` entries.

    Two-element ``(identity, code)`` entries are also accepted and numbered
    by position.  Pairs without a jointly valid bit are counted, not scored.
    """
    entries = _entries(gallery)
    if len(entries) < 2:
        raise ValidationError("all_pairs needs at least two codes")
    out = ScoreSet()
    for i in range(len(entries)):
        for j in range(i + 1, len(entries)):
            (pid, pident, pcode), (gid, gident, gcode) = entries[i], entries[j]
            try:
                hd, rot = match_min_hd(pcode, gcode)
            except IncomparableCodes:
                out.incomparable += 1
                continue
            out.pairs.append(ScorePair(pid, gid, GENUINE if pident == gident else IMPOSTOR,
                                       hd, rot))
    return out


def match_gallery(probe_id: str, probe_identity: str, probe: IrisCode, gallery) -> ScoreSet:
    """Match one probe against every gallery entry."""
    out = ScoreSet()
    for gid, gident, gcode in _entries(gallery):
        try:
            hd, rot = match_min_hd(probe, gcode)
        except IncomparableCodes:
            out.incomparable += 1
            continue
        out.pairs.append(ScorePair(probe_id, gid,
                                   GENUINE if gident == probe_identity else IMPOSTOR, hd, rot))
    return out.sorted()


def _lists(scores):
    if isinstance(scores, ScoreSet):
        gen, imp = scores.genuine, scores.impostor
    else:
        gen, imp = scores
    gen = np.sort(np.asarray(gen, dtype=np.float64))
    imp = np.sort(np.asarray(imp, dtype=np.float64))
    if gen.size == 0 or imp.size == 0:
        raise ValidationError("both genuine and impostor scores are required")
    return gen, imp


def roc(scores):
    """``(thresholds, FAR, FRR)`` over the sorted union of observed scores.

    The first point is the threshold ``-inf`` (accept nothing: FAR 0, FRR 1).
    A pair is accepted when its distance is at most the threshold.
    ``scores`` is a :class:`ScoreSet` or a ``(genuine, impostor)`` pair.
    """
    gen, imp = _lists(scores)
    thr = np.unique(np.concatenate([gen, imp]))
    far = np.searchsorted(imp, thr, side="right") / imp.size
    frr = 1.0 - np.searchsorted(gen, thr, side="right") / gen.size
    return (np.concatenate([[-np.inf], thr]), np.concatenate([[0.0], far]),
            np.concatenate([[1.0], frr]))


def crossing(far, frr) -> float:
    """Linear interpolation of FAR = FRR between the first bracketing points."""
    d = np.asarray(far) - np.asarray(frr)
    k = int(np.argmax(d >= 0))
    if d[k] < 0:  # cannot happen once the final threshold accepts everything
        raise ValidationError("FAR never reaches FRR")
    if k == 0 or d[k] == 0:
        return float(far[k])
    lam = -d[k - 1] / (d[k] - d[k - 1])
    return float(far[k - 1] + lam * (far[k] - far[k - 1]))


def eer(scores) -> float:
    _, far, frr = roc(scores)
    return crossing(far, frr)


def separation(scores) -> float:
    """``min impostor hd - max genuine hd``; positive means perfectly separable."""
    gen, imp = _lists(scores)
    return float(imp[0] - gen[-1])


def summary(scores: ScoreSet) -> dict:
    gen, imp = _lists(scores)
    return {"EER": eer(scores), "genuine": int(gen.size), "impostor": int(imp.size),
            "incomparable": scores.incomparable,
            "max_genuine_hd": float(gen[-1]), "min_impostor_hd": float(imp[0]),
            "genuine_mean_hd": float(gen.mean()), "impostor_mean_hd": float(imp.mean())}

