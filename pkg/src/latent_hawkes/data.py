"""Check-in records, event logs, ingestion and the experimental splits.

An :class:`EventLog` stores events column-wise (numpy arrays) sorted by
timestamp. Users, venues and categories are integer indices into ordered
vocabularies; a category of ``-1`` marks a latent (missing) category.

Time is measured in hours from the log's epoch. For ISO-8601 input the epoch
is midnight of the earliest event's day, so ``t % 24`` is the hour of day and
``week_anchor`` (weekday of the epoch, Monday = 0) fixes the day of week.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import warnings
from dataclasses import dataclass, replace
from datetime import datetime, timedelta, timezone
from typing import Optional, Sequence, TextIO

import numpy as np

logger = logging.getLogger(__name__)

CSV_COLUMNS = ("user_id", "venue_id", "timestamp", "lat", "lon", "category")
HOURS_PER_WEEK = 168.0
MISSING = -1


class DataError(ValueError):
    """Raised for malformed input data (bad rows, timestamps, vocabularies)."""


@dataclass(frozen=True)
class CheckinEvent:
    user_id: str
    venue_id: str
    timestamp: float
    location: tuple[float, float]
    category: Optional[int] = None

    def __post_init__(self):
        if not math.isfinite(self.timestamp) or self.timestamp < 0:
            raise DataError(f"timestamp must be finite and non-negative, got {self.timestamp}")
        lat, lon = self.location
        if not -90.0 <= lat <= 90.0 or not -180.0 <= lon <= 180.0:
            raise DataError(f"coordinates out of range: {self.location}")


@dataclass(frozen=True)
class DomainBounds:
    t_min: float
    t_max: float
    x_min: float
    x_max: float
    y_min: float
    y_max: float

    @property
    def duration(self) -> float:
        return self.t_max - self.t_min

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    def as_tuple(self) -> tuple[float, ...]:
        return (self.t_min, self.t_max, self.x_min, self.x_max, self.y_min, self.y_max)


@dataclass(frozen=True, eq=False)
class EventLog:
    """Immutable, time-sorted collection of check-ins.

    Attributes
    ----------
    users, venues, categories : int arrays of length N
        Vocabulary indices; ``categories[n] == -1`` for latent events.
    times, lat, lon : float arrays of length N
    category_names, user_ids, venue_ids : tuples
        Ordered vocabularies (K, M and P entries).
    venue_coords : (P, 2) float array
        Authoritative (lat, lon) per venue.
    bounds : DomainBounds
    """

    users: np.ndarray
    venues: np.ndarray
    times: np.ndarray
    lat: np.ndarray
    lon: np.ndarray
    categories: np.ndarray
    category_names: tuple
    user_ids: tuple
    venue_ids: tuple
    venue_coords: np.ndarray
    bounds: DomainBounds
    epoch: Optional[str] = None
    week_anchor: int = 0

    def __post_init__(self):
        n = len(self.times)
        for name in ("users", "venues", "lat", "lon", "categories"):
            if len(getattr(self, name)) != n:
                raise DataError(f"column {name!r} has length {len(getattr(self, name))}, expected {n}")
        if n and np.any(np.diff(self.times) < 0):
            raise DataError("events must be sorted by timestamp")
        if n:
            if self.users.min() < 0 or self.users.max() >= len(self.user_ids):
                raise DataError("user index outside vocabulary")
            if self.venues.min() < 0 or self.venues.max() >= len(self.venue_ids):
                raise DataError("venue index outside vocabulary")
            if self.categories.min() < MISSING or self.categories.max() >= len(self.category_names):
                raise DataError("category index outside vocabulary")
        for arr in (self.users, self.venues, self.times, self.lat, self.lon,
                    self.categories, self.venue_coords):
            arr.setflags(write=False)

    # sizes
    def __len__(self) -> int:
        return len(self.times)

    @property
    def n_categories(self) -> int:
        return len(self.category_names)

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_venues(self) -> int:
        return len(self.venue_ids)

    @property
    def latent_index(self) -> np.ndarray:
        return np.flatnonzero(self.categories == MISSING)

    @property
    def observed_index(self) -> np.ndarray:
        return np.flatnonzero(self.categories != MISSING)

    @property
    def locations(self) -> np.ndarray:
        return np.column_stack([self.lat, self.lon])

    def event(self, n: int) -> CheckinEvent:
        c = int(self.categories[n])
        return CheckinEvent(
            user_id=self.user_ids[self.users[n]],
            venue_id=self.venue_ids[self.venues[n]],
            timestamp=float(self.times[n]),
            location=(float(self.lat[n]), float(self.lon[n])),
            category=None if c == MISSING else c,
        )

    @property
    def events(self) -> list[CheckinEvent]:
        return [self.event(n) for n in range(len(self))]

    def user_events(self, user: int) -> np.ndarray:
        """Positions of ``user``'s events, in time order."""
        return np.flatnonzero(self.users == user)

    def subset(self, mask: np.ndarray, bounds: Optional[DomainBounds] = None) -> "EventLog":
        """Events selected by a boolean mask (or index array); vocabularies kept."""
        idx = np.arange(len(self))[mask]
        return replace(
            self,
            users=self.users[idx].copy(),
            venues=self.venues[idx].copy(),
            times=self.times[idx].copy(),
            lat=self.lat[idx].copy(),
            lon=self.lon[idx].copy(),
            categories=self.categories[idx].copy(),
            venue_coords=self.venue_coords.copy(),
            bounds=bounds or self.bounds,
        )

    def with_categories(self, categories: np.ndarray) -> "EventLog":
        return replace(
            self,
            users=self.users.copy(),
            venues=self.venues.copy(),
            times=self.times.copy(),
            lat=self.lat.copy(),
            lon=self.lon.copy(),
            categories=np.asarray(categories, dtype=np.int64).copy(),
            venue_coords=self.venue_coords.copy(),
        )

    def with_bounds(self, bounds: DomainBounds) -> "EventLog":
        return self.subset(np.ones(len(self), dtype=bool), bounds=bounds)

    def fingerprint(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for arr in (self.users, self.venues, self.times, self.lat, self.lon, self.categories):
            h.update(np.ascontiguousarray(arr).tobytes())
        h.update(json.dumps([self.category_names, self.user_ids, self.venue_ids]).encode())
        return h.hexdigest()


@dataclass(frozen=True, eq=False)
class CategoryAssignment:
    """Values for latent categories, keyed by event position."""

    positions: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        if len(self.positions) != len(self.values):
            raise ValueError("positions and values differ in length")

    def __len__(self) -> int:
        return len(self.positions)

    def as_dict(self) -> dict[int, int]:
        return {int(p): int(v) for p, v in zip(self.positions, self.values)}

    def check(self, log: EventLog) -> None:
        if not np.array_equal(self.positions, log.latent_index):
            raise ValueError("assignment keys do not match the log's latent events")
        if len(self.values) and (self.values.min() < 0 or self.values.max() >= log.n_categories):
            raise ValueError("assigned category outside [0, K)")

    def fill(self, log: EventLog) -> np.ndarray:
        """Full length-N category array with latent slots resolved."""
        self.check(log)
        cats = np.array(log.categories, dtype=np.int64)
        cats[self.positions] = self.values
        return cats

    @classmethod
    def from_dict(cls, mapping: dict[int, int]) -> "CategoryAssignment":
        keys = np.array(sorted(mapping), dtype=np.int64)
        return cls(keys, np.array([mapping[k] for k in keys], dtype=np.int64))


def empty_log(category_names: Sequence[str] = ()) -> EventLog:
    z = np.zeros(0)
    return EventLog(
        users=z.astype(np.int64), venues=z.astype(np.int64), times=z, lat=z.copy(), lon=z.copy(),
        categories=z.astype(np.int64), category_names=tuple(category_names), user_ids=(),
        venue_ids=(), venue_coords=np.zeros((0, 2)), bounds=DomainBounds(0, 0, 0, 0, 0, 0),
    )


def build_log(
    users: Sequence[str],
    venues: Sequence[str],
    times: Sequence[float],
    lat: Sequence[float],
    lon: Sequence[float],
    categories: Sequence[Optional[str]],
    category_names: Optional[Sequence[str]] = None,
    user_ids: Optional[Sequence[str]] = None,
    venue_ids: Optional[Sequence[str]] = None,
    bounds: Optional[DomainBounds] = None,
    epoch: Optional[str] = None,
    week_anchor: int = 0,
) -> EventLog:
    """Assemble an :class:`EventLog` from raw columns (input order, unsorted).

    Vocabularies not supplied are built in first-appearance order of the input
    rows. Venue coordinates come from a venue's first occurrence; later rows
    with different coordinates are snapped to it with a warning.
    """
    n = len(times)
    cat_vocab = list(category_names) if category_names is not None else []
    fixed_cats = category_names is not None
    cat_pos = {c: i for i, c in enumerate(cat_vocab)}
    user_vocab = list(user_ids or [])
    user_pos = {u: i for i, u in enumerate(user_vocab)}
    venue_vocab = list(venue_ids or [])
    venue_pos = {v: i for i, v in enumerate(venue_vocab)}
    coords: dict[int, tuple[float, float]] = {}

    u_idx = np.empty(n, dtype=np.int64)
    v_idx = np.empty(n, dtype=np.int64)
    c_idx = np.empty(n, dtype=np.int64)
    lat_arr = np.asarray(lat, dtype=float).copy()
    lon_arr = np.asarray(lon, dtype=float).copy()
    t_arr = np.asarray(times, dtype=float)
    conflicts = 0
    for i in range(n):
        u = users[i]
        if u not in user_pos:
            user_pos[u] = len(user_vocab)
            user_vocab.append(u)
        u_idx[i] = user_pos[u]
        v = venues[i]
        if v not in venue_pos:
            venue_pos[v] = len(venue_vocab)
            venue_vocab.append(v)
        vi = venue_pos[v]
        v_idx[i] = vi
        if vi not in coords:
            coords[vi] = (lat_arr[i], lon_arr[i])
        elif coords[vi] != (lat_arr[i], lon_arr[i]):
            conflicts += 1
            lat_arr[i], lon_arr[i] = coords[vi]
        c = categories[i]
        if c is None or c == "":
            c_idx[i] = MISSING
        else:
            if c not in cat_pos:
                if fixed_cats:
                    raise DataError(f"row {i + 1}: category {c!r} not in vocabulary")
                cat_pos[c] = len(cat_vocab)
                cat_vocab.append(c)
            c_idx[i] = cat_pos[c]
    if conflicts:
        warnings.warn(f"{conflicts} rows had venue coordinates conflicting with the venue's "
                      "first occurrence; first occurrence kept", stacklevel=2)

    venue_coords = np.zeros((len(venue_vocab), 2))
    for vi, (a, b) in coords.items():
        venue_coords[vi] = (a, b)

    for i in range(n):
        CheckinEvent(str(users[i]), str(venues[i]), float(t_arr[i]), (lat_arr[i], lon_arr[i]))

    order = np.argsort(t_arr, kind="stable")
    if bounds is None:
        bounds = data_bounds(t_arr, lat_arr, lon_arr)
    return EventLog(
        users=u_idx[order], venues=v_idx[order], times=t_arr[order].copy(),
        lat=lat_arr[order], lon=lon_arr[order], categories=c_idx[order],
        category_names=tuple(cat_vocab), user_ids=tuple(user_vocab), venue_ids=tuple(venue_vocab),
        venue_coords=venue_coords, bounds=bounds, epoch=epoch, week_anchor=week_anchor,
    )


def data_bounds(times, lat, lon) -> DomainBounds:
    if len(times) == 0:
        return DomainBounds(0, 0, 0, 0, 0, 0)
    return DomainBounds(
        float(np.min(times)), float(np.max(times)),
        float(np.min(lat)), float(np.max(lat)),
        float(np.min(lon)), float(np.max(lon)),
    )


# --------------------------------------------------------------------------
# CSV ingestion and serialization


@dataclass
class Schema:
    """Column names of the input CSV and optional fixed vocabulary."""

    user_id: str = "user_id"
    venue_id: str = "venue_id"
    timestamp: str = "timestamp"
    lat: str = "lat"
    lon: str = "lon"
    category: str = "category"
    categories: Optional[list] = None
    week_anchor: Optional[int] = None
    bounds: Optional[DomainBounds] = None
    epoch: Optional[str] = None


def _parse_timestamp(raw: str, rownum: int):
    raw = raw.strip()
    try:
        return float(raw)
    except ValueError:
        pass
    try:
        dt = datetime.fromisoformat(raw.replace("Z", "+00:00"))
    except ValueError:
        raise DataError(f"row {rownum}: unparseable timestamp {raw!r}") from None
    if dt.tzinfo is not None:
        dt = dt.astimezone(timezone.utc).replace(tzinfo=None)
    return dt


def ingest(source: TextIO | str, schema: Optional[Schema] = None) -> EventLog:
    """Read a check-in CSV into a sorted :class:`EventLog`.

    ``source`` is a text stream or a string holding the CSV. Timestamps are
    either floats (hours) or ISO-8601; the two kinds may not be mixed. Empty
    category fields become latent events.
    """
    schema = schema or Schema()
    if isinstance(source, str):
        source = io.StringIO(source)
    reader = csv.reader(source)
    try:
        header = next(reader)
    except StopIteration:
        log = empty_log(schema.categories or ())
        return log
    header = [h.strip() for h in header]
    cols = [schema.user_id, schema.venue_id, schema.timestamp, schema.lat, schema.lon, schema.category]
    missing = [c for c in cols if c not in header]
    if missing:
        raise DataError(f"header is missing columns {missing}")
    pos = [header.index(c) for c in cols]

    users, venues, stamps, lats, lons, cats = [], [], [], [], [], []
    for rownum, row in enumerate(reader, start=2):
        if not row or all(not f.strip() for f in row):
            continue
        if len(row) != len(header):
            raise DataError(f"row {rownum}: expected {len(header)} fields, got {len(row)}")
        u, v, ts, la, lo, c = (row[p].strip() for p in pos)
        if not u or not v:
            raise DataError(f"row {rownum}: empty user or venue id")
        try:
            la_f, lo_f = float(la), float(lo)
        except ValueError:
            raise DataError(f"row {rownum}: non-numeric coordinates") from None
        if not (math.isfinite(la_f) and math.isfinite(lo_f)):
            raise DataError(f"row {rownum}: non-finite coordinates")
        users.append(u)
        venues.append(v)
        stamps.append(_parse_timestamp(ts, rownum))
        lats.append(la_f)
        lons.append(lo_f)
        cats.append(c or None)

    week_anchor = schema.week_anchor if schema.week_anchor is not None else 0
    epoch = schema.epoch
    kinds = {isinstance(s, datetime) for s in stamps}
    if len(kinds) > 1:
        raise DataError("cannot mix ISO-8601 and numeric timestamps")
    if stamps and isinstance(stamps[0], datetime):
        if epoch is not None:
            origin = datetime.fromisoformat(epoch)
        else:
            first = min(stamps)
            origin = datetime(first.year, first.month, first.day)
        epoch = origin.isoformat()
        if schema.week_anchor is None:
            week_anchor = origin.weekday()
        times = [(s - origin) / timedelta(hours=1) for s in stamps]
    else:
        times = stamps
    for rownum, t in enumerate(times, start=2):
        if not math.isfinite(t) or t < 0:
            raise DataError(f"row {rownum}: timestamp {t} is negative or non-finite")
        if not -90 <= lats[rownum - 2] <= 90 or not -180 <= lons[rownum - 2] <= 180:
            raise DataError(f"row {rownum}: coordinates out of range")

    log = build_log(users, venues, times, lats, lons, cats,
                    category_names=schema.categories, bounds=schema.bounds,
                    epoch=epoch, week_anchor=week_anchor)
    return log


def load_csv(path, schema: Optional[Schema] = None) -> EventLog:
    """Ingest ``path``; a sidecar ``<path>.json`` manifest fixes the vocabulary."""
    from pathlib import Path

    path = Path(path)
    schema = schema or Schema()
    sidecar = sidecar_path(path)
    if sidecar.exists():
        meta = json.loads(sidecar.read_text())
        if schema.categories is None:
            schema = replace(schema, categories=list(meta["categories"]))
        if schema.week_anchor is None and "week_anchor" in meta:
            schema = replace(schema, week_anchor=int(meta["week_anchor"]))
        if schema.bounds is None and meta.get("bounds"):
            schema = replace(schema, bounds=DomainBounds(*meta["bounds"]))
        if schema.epoch is None and meta.get("epoch"):
            schema = replace(schema, epoch=meta["epoch"])
    with open(path, newline="", encoding="utf-8") as fh:
        return ingest(fh, schema)


def sidecar_path(path):
    from pathlib import Path

    path = Path(path)
    return path.with_name(path.name + ".json")


def serialize(log: EventLog, stream: TextIO, extra: Optional[dict[str, Sequence]] = None) -> None:
    """Write ``log`` as CSV (numeric hour timestamps, ``repr`` float precision)."""
    writer = csv.writer(stream, lineterminator="\n")
    extra = extra or {}
    writer.writerow(list(CSV_COLUMNS) + list(extra))
    for n in range(len(log)):
        c = int(log.categories[n])
        row = [
            log.user_ids[log.users[n]],
            log.venue_ids[log.venues[n]],
            repr(float(log.times[n])),
            repr(float(log.lat[n])),
            repr(float(log.lon[n])),
            "" if c == MISSING else log.category_names[c],
        ]
        row += [col[n] for col in extra.values()]
        writer.writerow(row)


def log_manifest(log: EventLog) -> dict:
    return {
        "categories": list(log.category_names),
        "week_anchor": log.week_anchor,
        "bounds": list(log.bounds.as_tuple()),
        "epoch": log.epoch,
    }


def save_csv(log: EventLog, path, extra: Optional[dict[str, Sequence]] = None) -> None:
    """Write CSV plus sidecar manifest, each atomically."""
    from .io import atomic_write

    buf = io.StringIO()
    serialize(log, buf, extra)
    atomic_write(path, buf.getvalue())
    atomic_write(sidecar_path(path), json.dumps(log_manifest(log), indent=2) + "\n")


# --------------------------------------------------------------------------
# splits and masking


def temporal_split(
    log: EventLog,
    train_weeks: Optional[float],
    test_weeks: float = 0.0,
    tolerance_hours: float = 0.0,
) -> tuple[EventLog, EventLog]:
    """Split into a training window and the test window that follows it.

    The training window is ``[t_min, t_min + 168 * train_weeks)``; the test
    window runs from there to the end of the combined window. ``train_weeks``
    of ``None`` puts the whole log in the training split. Events past the
    combined window are dropped. Both halves keep the full vocabularies and
    the spatial bounds of ``log``; their time bounds are the window edges.
    """
    b = log.bounds
    if train_weeks is None:
        empty = log.subset(np.zeros(len(log), dtype=bool),
                           bounds=replace(b, t_min=b.t_max, t_max=b.t_max))
        return log, empty
    if train_weeks < 0 or test_weeks < 0:
        raise ValueError("week counts must be non-negative")
    boundary = b.t_min + train_weeks * HOURS_PER_WEEK
    end = boundary + test_weeks * HOURS_PER_WEEK
    if end > b.t_max + tolerance_hours + 1e-9:
        raise DataError(
            f"window of {train_weeks + test_weeks} weeks ends at {end:.3f} h, "
            f"beyond the data extent {b.t_max:.3f} h")
    t = log.times
    train = log.subset(t < boundary, bounds=replace(b, t_max=boundary))
    test = log.subset((t >= boundary) & (t <= end), bounds=replace(b, t_min=boundary, t_max=end))
    return train, test


def inject_missingness(log: EventLog, fraction: float, seed: int) -> tuple[EventLog, CategoryAssignment]:
    """Hide the category of ``round(fraction * N)`` uniformly chosen events.

    Returns the masked log and the ground-truth assignment of the hidden slots.
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must lie in (0, 1), got {fraction}")
    if len(log.latent_index):
        raise ValueError("log already has latent events")
    n = len(log)
    n_hide = int(math.floor(fraction * n + 0.5))
    rng = np.random.default_rng(seed)
    hide = np.sort(rng.choice(n, size=n_hide, replace=False))
    truth = CategoryAssignment(hide.astype(np.int64), log.categories[hide].astype(np.int64))
    cats = np.array(log.categories, dtype=np.int64)
    cats[hide] = MISSING
    return log.with_categories(cats), truth


def remove_latent(log: EventLog) -> EventLog:
    """Drop events whose category is latent (keeps bounds and vocabularies)."""
    return log.subset(log.categories != MISSING)


def concat(first: EventLog, second: EventLog) -> EventLog:
    """Join two logs over the same vocabularies (e.g. train followed by test)."""
    if (first.category_names != second.category_names or first.user_ids != second.user_ids
            or first.venue_ids != second.venue_ids):
        raise ValueError("logs have different vocabularies")
    times = np.concatenate([first.times, second.times])
    order = np.argsort(times, kind="stable")
    b1, b2 = first.bounds, second.bounds
    bounds = DomainBounds(min(b1.t_min, b2.t_min), max(b1.t_max, b2.t_max),
                          min(b1.x_min, b2.x_min), max(b1.x_max, b2.x_max),
                          min(b1.y_min, b2.y_min), max(b1.y_max, b2.y_max))

    def cat(name):
        return np.concatenate([getattr(first, name), getattr(second, name)])[order]

    return replace(first, users=cat("users"), venues=cat("venues"), times=times[order],
                   lat=cat("lat"), lon=cat("lon"), categories=cat("categories"),
                   venue_coords=first.venue_coords.copy(), bounds=bounds)


def with_vocabulary(log: EventLog, user_ids: Sequence[str], venue_ids: Sequence[str]) -> EventLog:
    """Re-index ``log`` onto larger user and venue vocabularies (a superset of its own)."""
    upos = {u: i for i, u in enumerate(user_ids)}
    vpos = {v: i for i, v in enumerate(venue_ids)}
    try:
        umap = np.array([upos[u] for u in log.user_ids], dtype=np.int64)
        vmap = np.array([vpos[v] for v in log.venue_ids], dtype=np.int64)
    except KeyError as exc:
        raise DataError(f"id {exc.args[0]!r} missing from the target vocabulary") from None
    coords = np.zeros((len(venue_ids), 2))
    coords[vmap] = log.venue_coords
    return replace(log, users=umap[log.users] if len(log) else log.users.copy(),
                   venues=vmap[log.venues] if len(log) else log.venues.copy(),
                   times=log.times.copy(), lat=log.lat.copy(), lon=log.lon.copy(),
                   categories=log.categories.copy(), user_ids=tuple(user_ids),
                   venue_ids=tuple(venue_ids), venue_coords=coords)


def unify(first: EventLog, second: EventLog) -> tuple[EventLog, EventLog]:
    """Give two logs the same user and venue vocabularies (first's ids keep their indices).

    Category vocabularies must already agree; a venue seen in both keeps the
    first log's coordinates.
    """
    if first.category_names != second.category_names:
        raise DataError("logs have different category vocabularies")
    known_u, known_v = set(first.user_ids), set(first.venue_ids)
    users = list(first.user_ids) + [u for u in second.user_ids if u not in known_u]
    venues = list(first.venue_ids) + [v for v in second.venue_ids if v not in known_v]
    a = with_vocabulary(first, users, venues)
    b = with_vocabulary(second, users, venues)
    coords = b.venue_coords.copy()
    coords[:len(first.venue_ids)] = first.venue_coords
    a = replace(a, venue_coords=coords)
    b = replace(b, venue_coords=coords.copy())
    return a, b
