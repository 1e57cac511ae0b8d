"""Privacy-preserving evaluation statistics and distribution comparison.

Three per-corpus statistics (sequence entropy, visits per unique
location, consecutive travel distances) plus a Jensen-Shannon divergence
between shared-binned histograms of generated vs reference values.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from trajdiff.errors import DataError
from trajdiff.geo import haversine_km

MAX_BINS = 1024


def shannon_entropy(traj) -> float:
    """Entropy (natural log) of the within-sequence location frequencies."""
    traj = np.asarray(traj, dtype=np.int64)
    if traj.size == 0:
        raise DataError("entropy of an empty trajectory is undefined")
    _, counts = np.unique(traj, return_counts=True)
    p = counts / traj.size
    return float(-np.sum(p * np.log(p)))


def visit_counts(traj) -> dict[int, int]:
    """Multiset counts of visits per unique location."""
    traj = np.asarray(traj, dtype=np.int64)
    if traj.size == 0:
        raise DataError("visit counts of an empty trajectory are undefined")
    locs, counts = np.unique(traj, return_counts=True)
    return {int(l): int(c) for l, c in zip(locs, counts)}


def travel_distances(traj, coords) -> np.ndarray:
    """Great-circle km between consecutive locations, via the catalog coordinates."""
    traj = np.asarray(traj, dtype=np.int64)
    coords = np.asarray(coords, dtype=np.float64)
    if traj.size and traj.max() >= coords.shape[0]:
        raise DataError(
            f"token {int(traj.max())} has no coordinates (catalog holds {coords.shape[0]})"
        )
    a, b = coords[traj[:-1]], coords[traj[1:]]
    return haversine_km(a[:, 0], a[:, 1], b[:, 0], b[:, 1])


def freedman_diaconis_bins(values) -> int:
    """Bin count from the Freedman-Diaconis rule, with a sqrt fallback."""
    values = np.asarray(values, dtype=np.float64)
    n = values.size
    if n < 2:
        return 1
    q75, q25 = np.percentile(values, [75, 25])
    iqr = q75 - q25
    span = values.max() - values.min()
    if iqr <= 0.0 or span <= 0.0:
        return max(1, min(MAX_BINS, int(np.ceil(np.sqrt(n)))))
    width = 2.0 * iqr / n ** (1.0 / 3.0)
    return max(1, min(MAX_BINS, int(np.ceil(span / width))))


def shared_histogram(a, b, n_bins: int):
    """Normalized histograms of two samples over shared equal-width bins.

    Returns (edges, p, q). A degenerate shared range collapses to a
    single bin holding all mass on both sides.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise DataError("cannot compare empty samples")
    lo = min(a.min(), b.min())
    hi = max(a.max(), b.max())
    if lo == hi:
        return np.array([lo, hi]), np.array([1.0]), np.array([1.0])
    edges = np.linspace(lo, hi, n_bins + 1)
    p = np.histogram(a, bins=edges)[0].astype(np.float64)
    q = np.histogram(b, bins=edges)[0].astype(np.float64)
    return edges, p / p.sum(), q / q.sum()


def compare_histograms(a, b, n_bins: int) -> float:
    """Jensen-Shannon divergence (natural log) between shared-binned histograms.

    Symmetric, bounded by ln 2; identical samples give 0, disjoint
    supports give ln 2.
    """
    _, p, q = shared_histogram(a, b, n_bins)
    return jensen_shannon(p, q)


def jensen_shannon(p, q) -> float:
    """JSD between two normalized discrete distributions, natural log."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    m = 0.5 * (p + q)

    def kl(x, y):
        mask = x > 0
        return float(np.sum(x[mask] * np.log(x[mask] / y[mask])))

    return 0.5 * kl(p, m) + 0.5 * kl(q, m)


@dataclass
class MetricReport:
    """Statistics of a generated corpus plus divergences vs a reference."""

    entropies: list[float]
    visit_count_histogram: dict[int, float]
    distances: list[float]
    divergences: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "entropies": self.entropies,
            "visit_count_histogram": {str(k): v for k, v in self.visit_count_histogram.items()},
            "distances": self.distances,
            "divergences": self.divergences,
        }


def corpus_stats(trajectories, coords=None):
    """Pooled (entropies, visit-count values, travel distances) of a corpus."""
    entropies, counts, dists = [], [], []
    for traj in trajectories:
        entropies.append(shannon_entropy(traj))
        counts.extend(visit_counts(traj).values())
        if coords is not None:
            dists.extend(travel_distances(traj, coords).tolist())
    return entropies, counts, dists


def evaluate(generated, reference, coords=None) -> MetricReport:
    """Compute the three statistics on both corpora and their divergences.

    Histogram bins follow the Freedman-Diaconis rule on the reference
    corpus and are shared between the two corpora. Travel distances are
    skipped when no catalog coordinates are given.
    """
    if not len(generated) or not len(reference):
        raise DataError("both corpora must be nonempty")
    gen_ent, gen_cnt, gen_dst = corpus_stats(generated, coords)
    ref_ent, ref_cnt, ref_dst = corpus_stats(reference, coords)

    divergences = {
        "entropy": compare_histograms(gen_ent, ref_ent, freedman_diaconis_bins(ref_ent)),
        "visit_counts": compare_histograms(gen_cnt, ref_cnt, freedman_diaconis_bins(ref_cnt)),
    }
    if coords is not None:
        divergences["travel_distance"] = compare_histograms(
            gen_dst, ref_dst, freedman_diaconis_bins(ref_dst)
        )

    count_vals, count_freq = np.unique(np.asarray(gen_cnt), return_counts=True)
    histogram = {int(k): float(v / len(gen_cnt)) for k, v in zip(count_vals, count_freq)}
    return MetricReport(
        entropies=gen_ent,
        visit_count_histogram=histogram,
        distances=gen_dst,
        divergences=divergences,
    )
