"""Closed-world CMC evaluation, open-world TTR/FTR sweeps, and late score
fusion, plus the CSV formats the CLI emits.

Scoring is embarrassingly parallel over probe x gallery cells against a
read-only network; all curve computation is single-pass and deterministic.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import pipeline
from .network import Network, score_pair
from .pipeline import PersonImage, central_crop, default_stitch_side, resize_half


class EvalError(ValueError):
    """Raised when inputs violate an evaluation contract."""


Label = tuple[str, str, int]


@dataclass
class ScoreMatrix:
    """probes x gallery similarity grid with (identity, camera, index) labels."""

    probe_labels: list[Label]
    gallery_labels: list[Label]
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        p, g = len(self.probe_labels), len(self.gallery_labels)
        if self.values.shape != (p, g):
            raise EvalError(f"values shape {self.values.shape} does not match "
                            f"{p} probes x {g} gallery entries")
        if not np.all(np.isfinite(self.values)):
            raise EvalError("score matrix contains non-finite values")
        for axis, labels in (("probe", self.probe_labels), ("gallery", self.gallery_labels)):
            if len(set(labels)) != len(labels):
                raise EvalError(f"duplicate {axis} labels")

    def gallery_identities(self) -> list[str]:
        return [ident for ident, _, _ in self.gallery_labels]


@dataclass
class CmcCurve:
    """rates[k-1] is the fraction of probes whose true match ranks <= k."""

    rates: np.ndarray
    stddev: np.ndarray | None = None

    @property
    def rank1(self) -> float:
        return float(self.rates[0])


@dataclass(frozen=True)
class OpenWorldPoint:
    threshold: float
    ttr: float
    ftr: float


def _label(p: PersonImage) -> Label:
    return (p.identity, p.camera, p.index)


class PairScorer:
    """Infer-mode scorer binding a network to its preprocessing: stitch side,
    central crop and the training channel means."""

    def __init__(self, net: Network, stitch_side: int | None = None):
        self.net = net
        self.crop = net.config.input_side
        self.stitch_side = stitch_side or int(net.metadata.get(
            "stitch_side", default_stitch_side(self.crop)))
        means = net.channel_means
        self.means = (np.zeros(3, dtype=np.float32) if means is None
                      else np.asarray(means, dtype=np.float32))
        self._half_cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def halves(self, person: PersonImage) -> tuple[np.ndarray, np.ndarray]:
        """Resized stitch half and its horizontal mirror, cached per image."""
        key = id(person)
        got = self._half_cache.get(key)
        if got is None:
            h = resize_half(person, self.stitch_side).astype(self.net.dtype)
            got = (h, np.ascontiguousarray(h[:, :, ::-1]))
            self._half_cache[key] = got
        return got

    def _prep(self, image: np.ndarray) -> np.ndarray:
        x = central_crop(image, self.crop)
        return x - self.means[:, None, None]

    def score(self, a: PersonImage, b: PersonImage, use_tta: bool = False) -> float:
        if not use_tta:
            left, _ = self.halves(a)
            right, _ = self.halves(b)
            x = self._prep(np.concatenate([left, right], axis=2))
            return score_pair(self.net, x, mode="infer")[0]
        return float(np.mean(self.variant_scores(a, b)))

    def variant_scores(self, a: PersonImage, b: PersonImage) -> list[float]:
        """Scores of the 8 flip/swap variants in lexicographic flag order."""
        la, fa = self.halves(a)
        lb, fb = self.halves(b)
        scores = []
        for flip_left, flip_right, swap in pipeline.VARIANT_FLAGS:
            left = fa if flip_left else la
            right = fb if flip_right else lb
            image = np.concatenate([right, left] if swap else [left, right], axis=2)
            scores.append(score_pair(self.net, self._prep(image), mode="infer")[0])
        return scores


def score_matrix(net: Network, probes, gallery, use_tta: bool = False,
                 stitch_side: int | None = None) -> ScoreMatrix:
    """Infer-mode score of every (probe, gallery) pair, probe stitched left.
    With use_tta each cell is the mean of the 8 variant scores."""
    probes, gallery = list(probes), list(gallery)
    if not probes or not gallery:
        raise EvalError("probe and gallery sets must be non-empty")
    scorer = PairScorer(net, stitch_side)
    values = np.empty((len(probes), len(gallery)), dtype=np.float64)
    for i, p in enumerate(probes):
        for j, g in enumerate(gallery):
            values[i, j] = scorer.score(p, g, use_tta=use_tta)
    return ScoreMatrix([_label(p) for p in probes], [_label(g) for g in gallery], values)


def cmc_from_scores(m: ScoreMatrix, tie_policy: str = "pessimistic") -> CmcCurve:
    """One-trial CMC under the closed-world single-shot contract: every probe
    identity appears exactly once in the gallery.

    Pessimistic ties count tied non-matches against the true match; the
    optimistic policy counts only strictly greater scores.
    """
    if tie_policy not in ("pessimistic", "optimistic"):
        raise EvalError(f"unknown tie policy {tie_policy!r}")
    gal_ids = m.gallery_identities()
    if len(set(gal_ids)) != len(gal_ids):
        raise EvalError("gallery has repeated identities: aggregate multi-shot scores first")
    col_of = {ident: j for j, ident in enumerate(gal_ids)}
    n_gallery = len(gal_ids)

    ranks = np.empty(len(m.probe_labels), dtype=np.int64)
    for i, (ident, _, _) in enumerate(m.probe_labels):
        j = col_of.get(ident)
        if j is None:
            raise EvalError(f"probe identity {ident!r} absent from gallery (closed-world)")
        row = m.values[i]
        true_score = row[j]
        greater = int(np.count_nonzero(row > true_score))
        rank = 1 + greater
        if tie_policy == "pessimistic":
            rank += int(np.count_nonzero(row == true_score)) - 1
        ranks[i] = rank
    hist = np.bincount(ranks, minlength=n_gallery + 1)[1:n_gallery + 1]
    rates = np.cumsum(hist) / len(ranks)
    return CmcCurve(rates=rates)


def multishot_aggregate(m: ScoreMatrix, policy: str = "max") -> ScoreMatrix:
    """Collapse gallery columns to one per identity by max (default) or mean."""
    if policy not in ("max", "mean"):
        raise EvalError(f"unknown multishot policy {policy!r}")
    idents = sorted({ident for ident, _, _ in m.gallery_labels})
    cols = {ident: [j for j, (gid, _, _) in enumerate(m.gallery_labels) if gid == ident]
            for ident in idents}
    reducer = np.max if policy == "max" else np.mean
    values = np.column_stack([reducer(m.values[:, cols[i]], axis=1) for i in idents])
    return ScoreMatrix(list(m.probe_labels), [(i, "agg", 0) for i in idents], values)


def cmc_trials(net: Network, probes, gallery_pool, trials: int,
               rng: np.random.Generator | int = 0, shots: int = 1,
               multishot_policy: str = "max", use_tta: bool = False,
               tie_policy: str = "pessimistic",
               stitch_side: int | None = None) -> CmcCurve:
    """Average one-trial CMC curves over random gallery draws.

    Each trial draws `shots` gallery images per identity (all of them when an
    identity has at most `shots`); multi-shot draws are aggregated per
    identity before ranking.  Returns the mean curve with per-rank standard
    deviation.
    """
    if trials < 1:
        raise EvalError(f"trials must be >= 1, got {trials}")
    full = score_matrix(net, probes, gallery_pool, use_tta=use_tta,
                        stitch_side=stitch_side)
    gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    return cmc_trials_from_matrix(full, trials, gen, shots, multishot_policy, tie_policy)


def cmc_trials_from_matrix(full: ScoreMatrix, trials: int, rng: np.random.Generator,
                           shots: int = 1, multishot_policy: str = "max",
                           tie_policy: str = "pessimistic") -> CmcCurve:
    """Trial-average an already computed probe x gallery-pool matrix."""
    idents = sorted({ident for ident, _, _ in full.gallery_labels})
    by_ident = {ident: [j for j, (gid, _, _) in enumerate(full.gallery_labels) if gid == ident]
                for ident in idents}
    curves = []
    for _ in range(trials):
        cols, labels = [], []
        for ident in idents:
            pool = by_ident[ident]
            if shots >= len(pool):
                picks = pool
            else:
                picks = [pool[i] for i in rng.choice(len(pool), size=shots, replace=False)]
            cols.append(picks)
            labels.extend(full.gallery_labels[j] for j in picks)
        sub = ScoreMatrix(list(full.probe_labels), labels,
                          full.values[:, [j for grp in cols for j in grp]])
        if any(len(grp) > 1 for grp in cols):
            sub = multishot_aggregate(sub, multishot_policy)
        curves.append(cmc_from_scores(sub, tie_policy).rates)
    stacked = np.vstack(curves)
    return CmcCurve(rates=stacked.mean(axis=0), stddev=stacked.std(axis=0))


def open_world_sweep(m: ScoreMatrix, target_identities, thresholds=None,
                     target_agg: str = "max") -> list[OpenWorldPoint]:
    """TTR/FTR over a threshold sweep.

    A query is verified at threshold s iff its verification score (max over
    the target gallery, with each target identity's images first aggregated
    by `target_agg`) is >= s.  The default grid is every observed
    verification score plus -inf/+inf sentinels, so the sweep is exact.
    """
    targets = sorted(set(target_identities))
    gal_ids = set(m.gallery_identities())
    missing = [t for t in targets if t not in gal_ids]
    if missing:
        raise EvalError(f"target identities absent from gallery: {missing[:5]}")
    if target_agg not in ("max", "mean"):
        raise EvalError(f"unknown target aggregation {target_agg!r}")

    per_ident = []
    for ident in targets:
        cols = [j for j, (gid, _, _) in enumerate(m.gallery_labels) if gid == ident]
        agg = np.max if target_agg == "max" else np.mean
        per_ident.append(agg(m.values[:, cols], axis=1))
    verif = np.max(np.column_stack(per_ident), axis=1)

    target_set = set(targets)
    is_target = np.array([ident in target_set for ident, _, _ in m.probe_labels])
    n_tq = int(is_target.sum())
    n_ntq = int((~is_target).sum())
    if n_tq == 0 or n_ntq == 0:
        raise EvalError("open-world sweep needs both target and non-target queries")

    if thresholds is None:
        thresholds = np.concatenate([[-np.inf], np.unique(verif), [np.inf]])
    points = []
    for s in thresholds:
        accepted = verif >= s
        points.append(OpenWorldPoint(
            threshold=float(s),
            ttr=float(np.count_nonzero(accepted & is_target)) / n_tq,
            ftr=float(np.count_nonzero(accepted & ~is_target)) / n_ntq))
    return points


def fuse_scores(a: ScoreMatrix, b: ScoreMatrix, normalization: str = "none") -> ScoreMatrix:
    """Elementwise sum of two matchers' scores after optional per-matrix
    normalization (the default none is a plain sum)."""
    if a.probe_labels != b.probe_labels or a.gallery_labels != b.gallery_labels:
        raise EvalError("score matrices must share probe/gallery labels and order")
    return ScoreMatrix(list(a.probe_labels), list(a.gallery_labels),
                       _normalized(a.values, normalization) + _normalized(b.values, normalization))


def _normalized(v: np.ndarray, how: str) -> np.ndarray:
    if how == "none":
        return v.copy()
    if how == "minmax":
        lo, hi = v.min(), v.max()
        return np.zeros_like(v) if hi == lo else (v - lo) / (hi - lo)
    if how == "zscore":
        sd = v.std()
        return np.zeros_like(v) if sd == 0 else (v - v.mean()) / sd
    raise EvalError(f"unknown normalization {how!r}")


def pixel_nn_scores(probes, gallery, resize_to: tuple[int, int] = (64, 32)) -> ScoreMatrix:
    """Raw-pixel nearest-neighbour baseline: negative euclidean distance
    between bilinearly resized images."""
    probes, gallery = list(probes), list(gallery)
    if not probes or not gallery:
        raise EvalError("probe and gallery sets must be non-empty")
    h, w = resize_to

    def flat(person: PersonImage) -> np.ndarray:
        return pipeline.bilinear_resize(person.pixels.astype(np.float64), h, w).ravel()

    pm = np.vstack([flat(p) for p in probes])
    gm = np.vstack([flat(g) for g in gallery])
    d2 = (np.sum(pm * pm, axis=1)[:, None] - 2.0 * pm @ gm.T
          + np.sum(gm * gm, axis=1)[None, :])
    values = -np.sqrt(np.maximum(d2, 0.0))
    return ScoreMatrix([_label(p) for p in probes], [_label(g) for g in gallery], values)


# ---------------------------------------------------------------------------
# CSV formats


def _fmt(x: float) -> str:
    return format(float(x), ".9g")


def label_str(label: Label) -> str:
    ident, cam, idx = label
    return f"{ident}:{cam}:{idx}"


def parse_label(s: str) -> Label:
    parts = s.split(":")
    if len(parts) == 3:
        try:
            return (parts[0], parts[1], int(parts[2]))
        except ValueError:
            pass
    return (s, "", 0)


def write_cmc_csv(curve: CmcCurve, path) -> None:
    """rank,rate[,stddev] rows, rank starting at 1; stddev present only for
    trial-averaged curves."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        if curve.stddev is None:
            w.writerow(["rank", "rate"])
            for k, r in enumerate(curve.rates, start=1):
                w.writerow([k, _fmt(r)])
        else:
            w.writerow(["rank", "rate", "stddev"])
            for k, (r, s) in enumerate(zip(curve.rates, curve.stddev), start=1):
                w.writerow([k, _fmt(r), _fmt(s)])


def read_cmc_csv(path) -> CmcCurve:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    header, body = rows[0], rows[1:]
    rates = np.array([float(r[1]) for r in body])
    stddev = np.array([float(r[2]) for r in body]) if len(header) > 2 else None
    return CmcCurve(rates=rates, stddev=stddev)


def write_openworld_csv(points, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["threshold", "ttr", "ftr"])
        for p in points:
            w.writerow([_fmt(p.threshold), _fmt(p.ttr), _fmt(p.ftr)])


def write_score_csv(m: ScoreMatrix, path) -> None:
    """Exchange format for external fusion: first row gallery labels, first
    column probe labels, cells as decimal scores."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow([""] + [label_str(g) for g in m.gallery_labels])
        for label, row in zip(m.probe_labels, m.values):
            w.writerow([label_str(label)] + [repr(float(v)) for v in row])


def read_score_csv(path) -> ScoreMatrix:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if len(rows) < 2 or len(rows[0]) < 2:
        raise EvalError(f"score CSV {path} is empty or malformed")
    gallery = [parse_label(s) for s in rows[0][1:]]
    probes, values = [], []
    for row in rows[1:]:
        probes.append(parse_label(row[0]))
        values.append([float(v) for v in row[1:]])
    return ScoreMatrix(probes, gallery, np.array(values, dtype=np.float64))
