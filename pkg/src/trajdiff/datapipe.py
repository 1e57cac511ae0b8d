"""GNSS preprocessing, sequence chunking, and synthetic corpus generation.

The pipeline mirrors the standard mobility preprocessing chain: raw
per-user GNSS points are condensed into staypoints (windows of dwelling
within a small radius), staypoints are aggregated into a catalog of
locations by greedy 100 m clustering, and per-user visit sequences are
chunked into fixed-length trajectories for modelling.

The real study corpus is private, so ``synth_dataset`` builds a
desk-scale substitute: a random catalog plus trajectories from a seeded
exploration/preferential-return process.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from trajdiff.baselines import DEFAULT_GAMMA, DEFAULT_RHO, EprState, epr_step
from trajdiff.errors import DataError
from trajdiff.geo import haversine_km
from trajdiff.rng import substream
from trajdiff.utils import write_text_atomic

DEFAULT_STAY_RADIUS_M = 100.0
DEFAULT_MIN_DWELL_S = 300.0
DEFAULT_AGG_RADIUS_M = 100.0


@dataclass(frozen=True)
class GnssPoint:
    user: str
    timestamp: float  # seconds
    lat: float
    lon: float

    def __post_init__(self):
        if not (-90.0 <= self.lat <= 90.0 and -180.0 <= self.lon <= 180.0):
            raise DataError(f"coordinates out of range: ({self.lat}, {self.lon})")


@dataclass(frozen=True)
class Staypoint:
    lat: float
    lon: float
    start: float
    end: float


@dataclass
class LocationCatalog:
    """Dense location ids with representative coordinates and visit support."""

    coords: np.ndarray  # (D, 2) lat/lon
    support: np.ndarray  # (D,)

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 2)
        self.support = np.asarray(self.support, dtype=np.int64).reshape(-1)
        if self.coords.shape[0] != self.support.shape[0]:
            raise DataError("catalog coords and support lengths differ")

    def __len__(self) -> int:
        return self.coords.shape[0]

    def to_csv(self, path: str | Path) -> None:
        lines = ["id,lat,lon,support"]
        for i in range(len(self)):
            lines.append(
                f"{i},{float(self.coords[i, 0])!r},{float(self.coords[i, 1])!r},{int(self.support[i])}"
            )
        write_text_atomic(path, "\n".join(lines) + "\n")

    @classmethod
    def from_csv(cls, path: str | Path) -> "LocationCatalog":
        path = Path(path)
        if not path.exists():
            raise DataError(f"catalog file not found: {path}")
        coords, support = [], []
        with path.open(newline="") as fh:
            reader = csv.DictReader(fh)
            rows = sorted(reader, key=lambda r: int(r["id"]))
        for i, row in enumerate(rows):
            if int(row["id"]) != i:
                raise DataError(f"catalog ids must be dense from 0, missing {i}")
            coords.append((float(row["lat"]), float(row["lon"])))
            support.append(int(row.get("support", 0)))
        return cls(coords=np.asarray(coords), support=np.asarray(support))


def read_gnss_csv(path: str | Path) -> dict[str, list[GnssPoint]]:
    """Read `user,timestamp,lat,lon` rows into per-user streams sorted by time."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"GNSS file not found: {path}")
    per_user: dict[str, list[GnssPoint]] = {}
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"user", "timestamp", "lat", "lon"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise DataError(f"GNSS file {path} must have columns {sorted(required)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                point = GnssPoint(
                    user=row["user"],
                    timestamp=float(row["timestamp"]),
                    lat=float(row["lat"]),
                    lon=float(row["lon"]),
                )
            except (TypeError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: bad GNSS row: {exc}") from exc
            per_user.setdefault(point.user, []).append(point)
    for user in per_user:
        per_user[user].sort(key=lambda p: p.timestamp)
    return per_user


def _within_radius(points: list[GnssPoint], lat: float, lon: float, radius_m: float) -> bool:
    lats = np.array([p.lat for p in points])
    lons = np.array([p.lon for p in points])
    return bool(np.all(haversine_km(lats, lons, lat, lon) * 1000.0 <= radius_m))


def detect_staypoints(
    points: list[GnssPoint],
    radius_m: float = DEFAULT_STAY_RADIUS_M,
    min_dwell_s: float = DEFAULT_MIN_DWELL_S,
) -> list[Staypoint]:
    """Maximal windows whose points all lie within ``radius_m`` of the window
    centroid and that span at least ``min_dwell_s`` seconds."""
    n = len(points)
    out: list[Staypoint] = []
    i = 0
    while i < n:
        j = i
        lat_sum, lon_sum = points[i].lat, points[i].lon
        while j + 1 < n:
            k = j + 2 - i
            clat = (lat_sum + points[j + 1].lat) / k
            clon = (lon_sum + points[j + 1].lon) / k
            if not _within_radius(points[i : j + 2], clat, clon, radius_m):
                break
            lat_sum += points[j + 1].lat
            lon_sum += points[j + 1].lon
            j += 1
        span = points[j].timestamp - points[i].timestamp
        if span >= min_dwell_s:
            count = j - i + 1
            out.append(
                Staypoint(
                    lat=lat_sum / count,
                    lon=lon_sum / count,
                    start=points[i].timestamp,
                    end=points[j].timestamp,
                )
            )
            i = j + 1
        else:
            i += 1
    return out


def aggregate_locations(
    staypoints_by_user: dict[str, list[Staypoint]],
    radius_m: float = DEFAULT_AGG_RADIUS_M,
) -> tuple[LocationCatalog, dict[str, np.ndarray]]:
    """Greedy first-fit clustering of staypoints into locations.

    A staypoint joins the first existing location whose representative
    lies within ``radius_m`` (the representative is the running centroid
    of its members), otherwise it founds a new location. Users are
    processed in sorted order so the catalog is deterministic.
    """
    if not any(staypoints_by_user.values()):
        raise DataError("no staypoints to aggregate")
    reps: list[list[float]] = []  # [lat, lon]
    members: list[int] = []
    sequences: dict[str, list[int]] = {}
    for user in sorted(staypoints_by_user):
        seq = []
        for sp in sorted(staypoints_by_user[user], key=lambda s: s.start):
            assigned = None
            for loc_id, rep in enumerate(reps):
                d_m = float(haversine_km(rep[0], rep[1], sp.lat, sp.lon)) * 1000.0
                if d_m <= radius_m:
                    assigned = loc_id
                    break
            if assigned is None:
                reps.append([sp.lat, sp.lon])
                members.append(1)
                assigned = len(reps) - 1
            else:
                k = members[assigned]
                reps[assigned][0] = (reps[assigned][0] * k + sp.lat) / (k + 1)
                reps[assigned][1] = (reps[assigned][1] * k + sp.lon) / (k + 1)
                members[assigned] = k + 1
            seq.append(assigned)
        sequences[user] = np.asarray(seq, dtype=np.int64)
    catalog = LocationCatalog(coords=np.asarray(reps), support=np.asarray(members))
    return catalog, sequences


def chunk_sequences(visits, N: int) -> list[np.ndarray]:
    """Non-overlapping consecutive windows of length N; the remainder is dropped."""
    if N < 2:
        raise ValueError(f"chunk length must be >= 2, got {N}")
    visits = np.asarray(visits, dtype=np.int64)
    n_chunks = visits.size // N
    return [visits[i * N : (i + 1) * N].copy() for i in range(n_chunks)]


def synth_dataset(
    seed: int,
    D: int,
    n_users: int,
    len_per_user: int,
    geo_extent_km: float = 30.0,
) -> tuple[LocationCatalog, list[np.ndarray], list[str]]:
    """Desk-scale synthetic corpus: random catalog, EPR-generated visits.

    Returns (catalog, per-user visit sequences, user ids); everything is
    deterministic given ``seed``.
    """
    if D < 4:
        raise DataError(f"need at least 4 locations, got {D}")
    rng = substream(seed, "synth-catalog")
    base_lat, base_lon = 47.0, 8.0
    dlat = geo_extent_km / 111.19
    dlon = geo_extent_km / (111.19 * np.cos(np.radians(base_lat)))
    lats = base_lat + rng.uniform(0.0, dlat, size=D)
    lons = base_lon + rng.uniform(0.0, dlon, size=D)
    coords = np.stack([lats, lons], axis=1)

    trajectories, users = [], []
    support = np.zeros(D, dtype=np.int64)
    for u in range(n_users):
        user_rng = substream(seed, f"synth-user:{u}")
        start = int(user_rng.integers(D))
        state = EprState.start_at(start)
        seq = [start]
        for _ in range(len_per_user - 1):
            seq.append(epr_step(state, D, DEFAULT_RHO, DEFAULT_GAMMA, user_rng))
        seq = np.asarray(seq, dtype=np.int64)
        support += np.bincount(seq, minlength=D)
        trajectories.append(seq)
        users.append(f"user_{u:04d}")
    catalog = LocationCatalog(coords=coords, support=support)
    return catalog, trajectories, users
