"""Rater and model agreement statistics over per-slide TC scores.

Everything here runs in 64-bit floats regardless of what the networks
used, so the values are reproducible to full double precision against
naive reference implementations.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import UndefinedStatisticError

DEFAULT_CUTOFF = 25.0


def _vector(values, name, min_n=1):
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size < min_n:
        raise UndefinedStatisticError(
            f"{name} needs at least {min_n} values, got {v.size}")
    return v


def _paired(x, y, name, min_n=1):
    xv = _vector(x, name, min_n)
    yv = _vector(y, name, min_n)
    if xv.size != yv.size:
        raise UndefinedStatisticError(
            f"{name} needs equal-length vectors, got {xv.size} and {yv.size}")
    return xv, yv


def pearson(x, y):
    """Product-moment correlation of two score vectors."""
    xv, yv = _paired(x, y, "pearson", min_n=2)
    dx = xv - xv.mean()
    dy = yv - yv.mean()
    sxx = float((dx * dx).sum())
    syy = float((dy * dy).sum())
    if sxx == 0.0 or syy == 0.0:
        raise UndefinedStatisticError(
            "pearson is undefined for zero-variance input")
    return float((dx * dy).sum()) / math.sqrt(sxx * syy)


def lin_ccc(x, y):
    """Lin's concordance correlation coefficient.

    Uses population (1/n) moments: 2*s_xy / (s_x^2 + s_y^2 + (mx - my)^2).
    Two constant vectors agree perfectly when equal (1.0) and not at all
    otherwise (0.0); both cases fall out of the formula except the 0/0 one.
    """
    xv, yv = _paired(x, y, "lin_ccc", min_n=2)
    mx = float(xv.mean())
    my = float(yv.mean())
    dx = xv - mx
    dy = yv - my
    n = xv.size
    # population (1/n) moments, with the common factor n cancelled so the
    # hand-checkable small cases come out exact
    denom = float((dx * dx).sum()) + float((dy * dy).sum()) + n * (mx - my) ** 2
    if denom == 0.0:
        return 1.0
    return 2.0 * float((dx * dy).sum()) / denom


def mae(x, y):
    """Mean absolute difference between paired scores."""
    xv, yv = _paired(x, y, "mae", min_n=1)
    return float(np.abs(xv - yv).mean())


@dataclass(frozen=True)
class ConcordanceReport:
    """Lcc / Pcc / MAE bundle for one candidate-reference pairing."""

    lcc: float
    pcc: float
    mae: float
    n: int

    def to_dict(self):
        return {"lcc": self.lcc, "pcc": self.pcc, "mae": self.mae, "n": self.n}


def concordance(candidate, reference):
    """All three concordance measures for one pair of score vectors."""
    xv, yv = _paired(candidate, reference, "concordance", min_n=2)
    return ConcordanceReport(
        lcc=lin_ccc(xv, yv), pcc=pearson(xv, yv), mae=mae(xv, yv), n=xv.size)


@dataclass(frozen=True)
class AgreementReport:
    """Binary-status agreement at a score cutoff.

    NPA and PPA are reference-relative: the reference column defines the
    positive/negative strata, so swapping candidate and reference changes
    them (but never OPA).
    """

    opa: float
    npa: float
    ppa: float
    cutoff: float
    reference: str = "reference"

    def to_dict(self):
        return {"opa": self.opa, "npa": self.npa, "ppa": self.ppa,
                "cutoff": self.cutoff, "reference": self.reference}


def status_agreement(candidate, reference, cutoff=DEFAULT_CUTOFF,
                     strict=False, reference_name="reference"):
    """Overall / negative / positive percent agreement at ``cutoff``.

    Status is positive at score >= cutoff (score > cutoff with
    ``strict=True``).
    """
    xv, yv = _paired(candidate, reference, "status_agreement", min_n=1)
    if strict:
        cand = xv > cutoff
        ref = yv > cutoff
    else:
        cand = xv >= cutoff
        ref = yv >= cutoff
    n_pos = int(ref.sum())
    n_neg = ref.size - n_pos
    if n_pos == 0:
        raise UndefinedStatisticError(
            "PPA undefined: reference has no positive slides")
    if n_neg == 0:
        raise UndefinedStatisticError(
            "NPA undefined: reference has no negative slides")
    opa = float((cand == ref).sum()) / ref.size
    ppa = float(cand[ref].sum()) / n_pos
    npa = float((~cand[~ref]).sum()) / n_neg
    return AgreementReport(opa=opa, npa=npa, ppa=ppa, cutoff=float(cutoff),
                           reference=reference_name)


def median_consolidate(columns):
    """Per-slide median across rater columns (lower median for even counts)."""
    cols = [_vector(c, "median_consolidate") for c in columns]
    if len(cols) < 2:
        raise UndefinedStatisticError(
            "median_consolidate needs at least 2 columns")
    n = cols[0].size
    for c in cols[1:]:
        if c.size != n:
            raise UndefinedStatisticError(
                "median_consolidate columns differ in length")
    stacked = np.sort(np.stack(cols, axis=0), axis=0)
    return stacked[(len(cols) - 1) // 2].copy()


@dataclass(frozen=True)
class RaterVariability:
    """Per-slide inter-rater variability Delta.

    Delta = sum over unordered rater pairs of |TC_i - TC_j|, divided by
    n*(n-1); with three raters this is the 1/6-normalized pairwise sum.
    ``pair_mean`` rescales to the plain mean over unordered pairs (2x).
    """

    values: np.ndarray
    rater_count: int

    def scaled(self, pair_mean=False):
        return self.values * 2.0 if pair_mean else self.values


def rater_variability(columns):
    cols = [_vector(c, "rater_variability") for c in columns]
    k = len(cols)
    if k < 2:
        raise UndefinedStatisticError(
            "rater_variability needs at least 2 rater columns")
    n = cols[0].size
    for c in cols[1:]:
        if c.size != n:
            raise UndefinedStatisticError(
                "rater_variability columns differ in length")
    total = np.zeros(n, dtype=np.float64)
    for i in range(k):
        for j in range(i + 1, k):
            total += np.abs(cols[i] - cols[j])
    return RaterVariability(values=total / (k * (k - 1)), rater_count=k)


@dataclass(frozen=True)
class CurvePoint:
    """One threshold of a variability-filtered concordance curve.

    Metric cells are NaN when undefined at that threshold (fewer than two
    slides included, or a degenerate stratum); the included fraction is
    always defined.
    """

    threshold: float
    included_fraction: float
    included_n: int
    concordance: ConcordanceReport | None
    agreement: AgreementReport | None

    def row(self):
        c = self.concordance
        a = self.agreement
        nan = math.nan
        return {
            "threshold": self.threshold,
            "lcc": c.lcc if c else nan,
            "pcc": c.pcc if c else nan,
            "mae": c.mae if c else nan,
            "opa": a.opa if a else nan,
            "npa": a.npa if a else nan,
            "ppa": a.ppa if a else nan,
            "included_fraction": self.included_fraction,
        }


def filtered_concordance_curve(candidate, reference, variability, thresholds,
                               cutoff=DEFAULT_CUTOFF, strict=False):
    """Concordance/agreement restricted to slides with Delta <= threshold.

    Returns one CurvePoint per threshold. Points where fewer than two
    slides survive the filter carry no reports; individually degenerate
    statistics (e.g. a stratum emptied by the filter) are dropped the
    same way rather than aborting the curve.
    """
    xv, yv = _paired(candidate, reference, "filtered_concordance_curve")
    delta = variability.values if isinstance(variability, RaterVariability) \
        else _vector(variability, "variability")
    if delta.size != xv.size:
        raise UndefinedStatisticError(
            "variability length does not match score vectors")
    ts = [float(t) for t in thresholds]
    if not ts:
        raise UndefinedStatisticError("thresholds must be nonempty")
    points = []
    for t in ts:
        keep = delta <= t
        m = int(keep.sum())
        frac = m / delta.size
        conc = None
        agree = None
        if m >= 2:
            try:
                conc = concordance(xv[keep], yv[keep])
            except UndefinedStatisticError:
                conc = None
            try:
                agree = status_agreement(xv[keep], yv[keep], cutoff=cutoff,
                                         strict=strict)
            except UndefinedStatisticError:
                agree = None
        points.append(CurvePoint(threshold=t, included_fraction=frac,
                                 included_n=m, concordance=conc,
                                 agreement=agree))
    return points


@dataclass(frozen=True)
class LeaveOneOutEntry:
    column: str
    concordance: ConcordanceReport
    agreement: AgreementReport | None


def leave_one_out_analysis(columns, cutoff=DEFAULT_CUTOFF, strict=False):
    """Each column vs the median of all the others.

    ``columns`` is an ordered mapping of name -> score vector with at
    least 4 entries. Agreement is None when a status stratum is empty.
    """
    names = list(columns)
    if len(names) < 4:
        raise UndefinedStatisticError(
            "leave_one_out_analysis needs at least 4 columns")
    vectors = {k: _vector(columns[k], "leave_one_out_analysis", min_n=2)
               for k in names}
    out = []
    for name in names:
        rest = [vectors[k] for k in names if k != name]
        ref = median_consolidate(rest)
        conc = concordance(vectors[name], ref)
        try:
            agree = status_agreement(vectors[name], ref, cutoff=cutoff,
                                     strict=strict,
                                     reference_name=f"median_excl_{name}")
        except UndefinedStatisticError:
            agree = None
        out.append(LeaveOneOutEntry(column=name, concordance=conc,
                                    agreement=agree))
    return out


@dataclass
class ScoreTable:
    """Aligned per-slide score columns (raters, models, ground truth)."""

    slide_ids: list = field(default_factory=list)
    columns: dict = field(default_factory=dict)

    def __post_init__(self):
        self.slide_ids = [str(s) for s in self.slide_ids]
        self.columns = {str(k): _vector(v, f"column {k}")
                        for k, v in self.columns.items()}
        for k, v in self.columns.items():
            if v.size != len(self.slide_ids):
                raise UndefinedStatisticError(
                    f"column {k} has {v.size} values for "
                    f"{len(self.slide_ids)} slides")

    def __len__(self):
        return len(self.slide_ids)

    def column(self, name):
        if name not in self.columns:
            raise KeyError(f"no score column named {name!r}; "
                           f"have {sorted(self.columns)}")
        return self.columns[name]

    def add_column(self, name, values):
        v = _vector(values, f"column {name}")
        if v.size != len(self.slide_ids):
            raise UndefinedStatisticError(
                f"column {name} has {v.size} values for "
                f"{len(self.slide_ids)} slides")
        self.columns[str(name)] = v

    def subset(self, indices):
        idx = list(indices)
        return ScoreTable(
            slide_ids=[self.slide_ids[i] for i in idx],
            columns={k: v[idx] for k, v in self.columns.items()})

    def save_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["slide_id", *self.columns])
            for i, sid in enumerate(self.slide_ids):
                writer.writerow(
                    [sid, *(repr(float(v[i])) for v in self.columns.values())])

    @classmethod
    def load_csv(cls, path):
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or rows[0][:1] != ["slide_id"]:
            raise UndefinedStatisticError(
                f"{path}: expected a header starting with slide_id")
        names = rows[0][1:]
        slide_ids = []
        data = {k: [] for k in names}
        for row in rows[1:]:
            if not row:
                continue
            slide_ids.append(row[0])
            for k, cell in zip(names, row[1:]):
                data[k].append(float(cell))
        return cls(slide_ids=slide_ids, columns=data)


def curve_rows_to_csv(points, path):
    """Write filtered-curve points as CSV (NaN for undefined cells)."""
    fields = ["threshold", "lcc", "pcc", "mae", "opa", "npa", "ppa",
              "included_fraction"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for p in points:
            writer.writerow({k: repr(v) for k, v in p.row().items()})
