"""Rating data: loading, n-core filtering, temporal splits, sensitive groups.

Tables are columnar (numpy arrays) and treated as immutable once built.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

FORMATS = ("ml100k-tab", "ml1m-coloncolon", "amazon-csv")
ATTRIBUTES = ("gender", "activity")

# Group labels. S0 = 0, S1 = 1.
S0, S1 = 0, 1
GENDER_GROUP = {"F": S0, "M": S1}

# Default Amazon column order: item,user,rating,timestamp.
AMAZON_COLUMNS = {"item": 0, "user": 1, "rating": 2, "timestamp": 3}


class DataError(Exception):
    """Raised for malformed input files or inconsistent data."""


class ConfigurationError(ValueError):
    """Raised for invalid parameters."""


class EmptyResultError(DataError):
    """Raised when filtering removes every record."""


@dataclass(frozen=True)
class RatingTable:
    users: np.ndarray
    items: np.ndarray
    ratings: np.ndarray
    timestamps: np.ndarray
    rating_range: tuple[float, float] = (1.0, 5.0)

    def __post_init__(self):
        n = len(self.users)
        if not (len(self.items) == len(self.ratings) == len(self.timestamps) == n):
            raise DataError("column lengths differ")

    @classmethod
    def from_records(cls, records, rating_range=(1.0, 5.0)) -> "RatingTable":
        arr = list(records)
        if not arr:
            return cls.empty(rating_range)
        u, i, r, t = zip(*arr)
        return cls(
            np.asarray(u, dtype=np.int64),
            np.asarray(i, dtype=np.int64),
            np.asarray(r, dtype=np.float64),
            np.asarray(t, dtype=np.int64),
            rating_range,
        )

    @classmethod
    def empty(cls, rating_range=(1.0, 5.0)) -> "RatingTable":
        return cls(
            np.empty(0, np.int64),
            np.empty(0, np.int64),
            np.empty(0, np.float64),
            np.empty(0, np.int64),
            rating_range,
        )

    @property
    def rating_count(self) -> int:
        return len(self.users)

    @property
    def user_count(self) -> int:
        return len(np.unique(self.users))

    @property
    def item_count(self) -> int:
        return len(np.unique(self.items))

    def __len__(self) -> int:
        return self.rating_count

    def take(self, mask_or_index) -> "RatingTable":
        return RatingTable(
            self.users[mask_or_index],
            self.items[mask_or_index],
            self.ratings[mask_or_index],
            self.timestamps[mask_or_index],
            self.rating_range,
        )

    def records(self):
        """Iterate ``(user, item, rating, timestamp)`` tuples."""
        return zip(
            self.users.tolist(),
            self.items.tolist(),
            self.ratings.tolist(),
            self.timestamps.tolist(),
        )

    def canonical(self) -> "RatingTable":
        """Same records sorted by (user, item); used for order-free comparisons."""
        order = np.lexsort((self.items, self.users))
        return self.take(order)

    def equals(self, other: "RatingTable") -> bool:
        a, b = self.canonical(), other.canonical()
        return (
            len(a) == len(b)
            and np.array_equal(a.users, b.users)
            and np.array_equal(a.items, b.items)
            and np.array_equal(a.ratings, b.ratings)
            and np.array_equal(a.timestamps, b.timestamps)
        )

    def validate(self) -> None:
        lo, hi = self.rating_range
        bad = (self.ratings < lo) | (self.ratings > hi)
        if bad.any():
            raise DataError(f"{int(bad.sum())} ratings outside [{lo}, {hi}]")
        pairs = self.users * (int(self.items.max(initial=0)) + 1) + self.items
        if len(np.unique(pairs)) != len(pairs):
            raise DataError("duplicate (user, item) pairs")

    def stats_line(self) -> str:
        return f"users={self.user_count} items={self.item_count} ratings={self.rating_count}"


@dataclass(frozen=True)
class SplitTable:
    train: RatingTable
    validation: RatingTable
    test: RatingTable

    def __len__(self) -> int:
        return len(self.train) + len(self.validation) + len(self.test)


@dataclass(frozen=True)
class SensitiveAssignment:
    attribute_name: str
    group_of: dict[int, int] = field(default_factory=dict)

    def members(self, group: int) -> list[int]:
        return sorted(u for u, g in self.group_of.items() if g == group)

    def __getitem__(self, user: int) -> int:
        return self.group_of[user]


def _parse_lines(path: Path, sep: str, fmt: str, columns=None) -> RatingTable:
    cols = columns or {"user": 0, "item": 1, "rating": 2, "timestamp": 3}
    width = max(cols.values()) + 1
    users, items, ratings, stamps = [], [], [], []
    with open(path, encoding="latin-1") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = next(csv.reader([line])) if sep == "," else line.split(sep)
            if len(parts) < width:
                raise DataError(f"{path}:{lineno}: expected {width} fields for {fmt}, got {len(parts)}")
            try:
                if fmt == "amazon-csv":
                    users.append(parts[cols["user"]].strip())
                    items.append(parts[cols["item"]].strip())
                else:
                    users.append(int(parts[cols["user"]]))
                    items.append(int(parts[cols["item"]]))
                ratings.append(float(parts[cols["rating"]]))
                stamps.append(int(float(parts[cols["timestamp"]])))
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: cannot parse {line!r} ({exc})") from None
    if fmt == "amazon-csv":
        # Amazon IDs are strings; map them to dense integers in first-seen order.
        users = _densify(users)
        items = _densify(items)
    if not users:
        return RatingTable.empty()
    return RatingTable(
        np.asarray(users, dtype=np.int64),
        np.asarray(items, dtype=np.int64),
        np.asarray(ratings, dtype=np.float64),
        np.asarray(stamps, dtype=np.int64),
    )


def _densify(keys):
    index: dict[str, int] = {}
    return [index.setdefault(k, len(index)) for k in keys]


def load_ratings(path, format: str, columns: dict[str, int] | None = None) -> RatingTable:
    """Load a ratings file.

    Args:
        path: ratings file (``u.data``, ``ratings.dat`` or an Amazon CSV).
        format: one of ``ml100k-tab``, ``ml1m-coloncolon``, ``amazon-csv``.
        columns: column mapping for ``amazon-csv`` (defaults to
            ``item,user,rating,timestamp``).

    Raises:
        ConfigurationError: unknown format.
        DataError: a line that does not parse; the message carries the line number.
    """
    if format not in FORMATS:
        raise ConfigurationError(f"unknown format {format!r}; expected one of {FORMATS}")
    path = Path(path)
    if not path.exists():
        raise DataError(f"ratings file not found: {path}")
    if format == "ml100k-tab":
        table = _parse_lines(path, "\t", format)
    elif format == "ml1m-coloncolon":
        table = _parse_lines(path, "::", format)
    else:
        table = _parse_lines(path, ",", format, columns or AMAZON_COLUMNS)
    table.validate()
    return table


def load_demographics(path, format: str) -> dict[int, str]:
    """Read the gender column from ``u.user`` (pipe, field 2) or ``users.dat`` (``::``, field 1)."""
    if format == "ml100k-tab":
        sep, field_idx = "|", 2
    elif format == "ml1m-coloncolon":
        sep, field_idx = "::", 1
    else:
        raise ConfigurationError(f"no demographics file for format {format!r}")
    out: dict[int, str] = {}
    with open(path, encoding="latin-1") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(sep)
            try:
                out[int(parts[0])] = parts[field_idx]
            except (IndexError, ValueError):
                raise DataError(f"{path}:{lineno}: cannot parse {line!r}") from None
    return out


def ncore_filter(table: RatingTable, n: int) -> RatingTable:
    """Drop users and items with fewer than ``n`` ratings until nothing changes."""
    if n < 1:
        raise ConfigurationError(f"n must be >= 1, got {n}")
    keep = np.ones(len(table), dtype=bool)
    users, items = table.users, table.items
    # dense codes so bincount stays small
    _, ucode = np.unique(users, return_inverse=True)
    _, icode = np.unique(items, return_inverse=True)
    while True:
        ucount = np.bincount(ucode[keep], minlength=ucode.max(initial=-1) + 1)
        icount = np.bincount(icode[keep], minlength=icode.max(initial=-1) + 1)
        new_keep = keep & (ucount[ucode] >= n) & (icount[icode] >= n)
        if np.array_equal(new_keep, keep):
            break
        keep = new_keep
    if len(table) and not keep.any():
        raise EmptyResultError(f"{n}-core filter removed every record")
    return table.take(keep)


def temporal_split(table: RatingTable, fractions=(0.8, 0.1, 0.1)) -> SplitTable:
    """Per-user chronological split.

    For a user with ``c`` records the last ``floor(0.1 c)`` go to test, the
    ``floor(0.1 c)`` before them to validation and the rest to train (for the
    default fractions). Ties on timestamp are broken by item id.
    """
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ConfigurationError(f"split fractions must be three non-negatives summing to 1, got {fractions}")
    _, val_frac, test_frac = fractions
    order = np.lexsort((table.items, table.timestamps, table.users))
    users = table.users[order]
    starts = np.flatnonzero(np.r_[True, users[1:] != users[:-1]]) if len(users) else np.empty(0, int)
    ends = np.r_[starts[1:], len(users)]
    part = np.zeros(len(users), dtype=np.int8)  # 0 train, 1 val, 2 test
    for s, e in zip(starts, ends):
        c = e - s
        n_test = int(np.floor(test_frac * c + 1e-9))
        n_val = int(np.floor(val_frac * c + 1e-9))
        part[e - n_test:e] = 2
        part[e - n_test - n_val:e - n_test] = 1
    sorted_table = table.take(order)
    return SplitTable(
        sorted_table.take(part == 0),
        sorted_table.take(part == 1),
        sorted_table.take(part == 2),
    )


def assign_sensitive(
    table: RatingTable,
    attribute: str,
    demographics: dict[int, str] | None = None,
    activity_threshold_quantile: float = 0.5,
) -> SensitiveAssignment:
    """Assign every user of ``table`` to S0 or S1.

    ``gender``: F -> S0, M -> S1 from ``demographics``.
    ``activity``: S1 when the user's rating count in ``table`` (pass the train
    split) is strictly above the given quantile of all users' counts.
    """
    users, counts = np.unique(table.users, return_counts=True)
    if attribute == "gender":
        if demographics is None:
            raise ConfigurationError("gender attribute requires a demographics map")
        missing = [int(u) for u in users if int(u) not in demographics]
        if missing:
            raise DataError(f"users missing from demographics: {missing[:20]}{'...' if len(missing) > 20 else ''}")
        group_of = {}
        for u in users.tolist():
            g = demographics[u].strip().upper()
            if g not in GENDER_GROUP:
                raise DataError(f"user {u}: unknown gender code {demographics[u]!r}")
            group_of[u] = GENDER_GROUP[g]
        return SensitiveAssignment("gender", group_of)
    if attribute == "activity":
        if not 0.0 < activity_threshold_quantile < 1.0:
            raise ConfigurationError("activity_threshold_quantile must lie in (0, 1)")
        threshold = np.quantile(counts, activity_threshold_quantile)
        return SensitiveAssignment(
            "activity",
            {u: (S1 if c > threshold else S0) for u, c in zip(users.tolist(), counts.tolist())},
        )
    raise ConfigurationError(f"unknown attribute {attribute!r}; expected one of {ATTRIBUTES}")


@dataclass(frozen=True)
class PreparedData:
    """Filtered table, its split and the group assignment, ready for training."""

    table: RatingTable
    split: SplitTable
    groups: SensitiveAssignment


DATASET_FILES = {
    "ml-100k": ("ml100k-tab", "u.data", "u.user"),
    "ml-1m": ("ml1m-coloncolon", "ratings.dat", "users.dat"),
    "amazon-movies": ("amazon-csv", "ratings.csv", None),
}


def prepare(data_dir, dataset: str = "ml-100k", n_core: int = 20, attribute: str = "gender") -> PreparedData:
    """Load, filter, split and label one of the known datasets from ``data_dir``."""
    if dataset not in DATASET_FILES:
        raise ConfigurationError(f"unknown dataset {dataset!r}; expected one of {sorted(DATASET_FILES)}")
    fmt, ratings_name, users_name = DATASET_FILES[dataset]
    data_dir = Path(data_dir)
    ratings_path = data_dir / ratings_name
    if not ratings_path.exists():
        expected = [ratings_name] + ([users_name] if users_name else [])
        raise DataError(f"missing raw file {ratings_path}; expected {expected} in {data_dir}")
    table = ncore_filter(load_ratings(ratings_path, fmt), n_core)
    split = temporal_split(table)
    if attribute == "gender":
        if users_name is None:
            raise ConfigurationError(f"dataset {dataset} has no gender attribute")
        users_path = data_dir / users_name
        if not users_path.exists():
            raise DataError(f"missing demographics file {users_path}")
        groups = assign_sensitive(table, "gender", load_demographics(users_path, fmt))
    else:
        groups = assign_sensitive(split.train, attribute)
    logger.info("prepared %s: %s", dataset, table.stats_line())
    return PreparedData(table, split, groups)
