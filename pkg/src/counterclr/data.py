"""Explicit-feedback rating datasets with an observation indicator.

Two on-disk formats are supported:

* canonical TSV: UTF-8 lines ``user<TAB>item<TAB>rating``, ``#``-comment
  lines skipped; raw ids are remapped to dense 0-based indices in order
  of first appearance.
* dense matrix: whitespace-separated numbers, one row per line, 0
  meaning unobserved (the format the Coat dataset ships in).

Datasets are immutable after construction and safe to share read-only
across threads.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .errors import ArgumentError, DataFormatError

__all__ = [
    "RatingScale",
    "InteractionDataset",
    "DataSplit",
    "load_triples",
    "load_triples_indexed",
    "load_coat_matrix",
    "save_triples",
    "save_dense_matrix",
    "split",
]


@dataclasses.dataclass(frozen=True)
class RatingScale:
    """Closed rating interval [r_min, r_max]."""

    r_min: float
    r_max: float

    def __post_init__(self):
        if not self.r_min < self.r_max:
            raise ArgumentError(
                f"rating scale needs r_min < r_max, got [{self.r_min}, {self.r_max}]"
            )

    @property
    def midpoint(self):
        return 0.5 * (self.r_min + self.r_max)

    @property
    def span(self):
        return self.r_max - self.r_min

    def contains(self, values):
        values = np.asarray(values)
        return bool(np.all(values >= self.r_min) and np.all(values <= self.r_max))


class InteractionDataset:
    """Users, items, and the observed (user, item, rating) triples.

    `users`, `items`, `ratings` are parallel arrays in insertion order.
    `user_ids`/`item_ids` retain the raw identifiers (index -> raw id)
    when the dataset came from a file with non-dense ids; they default
    to the stringified dense indices.
    """

    def __init__(self, n_users, n_items, users, items, ratings, scale,
                 user_ids=None, item_ids=None):
        self.n_users = int(n_users)
        self.n_items = int(n_items)
        self.users = np.asarray(users, dtype=np.int64)
        self.items = np.asarray(items, dtype=np.int64)
        self.ratings = np.asarray(ratings, dtype=np.float64)
        self.scale = scale
        self.user_ids = list(user_ids) if user_ids is not None else [
            str(u) for u in range(self.n_users)
        ]
        self.item_ids = list(item_ids) if item_ids is not None else [
            str(i) for i in range(self.n_items)
        ]
        self._validate()

    def _validate(self):
        if not (len(self.users) == len(self.items) == len(self.ratings)):
            raise DataFormatError("triple arrays have mismatched lengths")
        if self.n_observed:
            if self.users.min() < 0 or self.users.max() >= self.n_users:
                raise DataFormatError("user index out of range")
            if self.items.min() < 0 or self.items.max() >= self.n_items:
                raise DataFormatError("item index out of range")
            if not self.scale.contains(self.ratings):
                raise DataFormatError(
                    f"rating outside scale [{self.scale.r_min}, {self.scale.r_max}]"
                )
            keys = self.users * self.n_items + self.items
            if len(np.unique(keys)) != len(keys):
                raise DataFormatError("duplicate (user, item) pair")

    @property
    def n_observed(self):
        return len(self.ratings)

    def triples(self):
        for u, i, r in zip(self.users, self.items, self.ratings):
            yield int(u), int(i), float(r)

    def pair_set(self):
        return set(zip(self.users.tolist(), self.items.tolist()))

    def dense(self):
        """(mask, ratings) as N x M float arrays; unobserved cells are 0."""
        mask = np.zeros((self.n_users, self.n_items))
        values = np.zeros((self.n_users, self.n_items))
        mask[self.users, self.items] = 1.0
        values[self.users, self.items] = self.ratings
        return mask, values

    def replace_triples(self, users, items, ratings):
        return InteractionDataset(
            self.n_users, self.n_items, users, items, ratings, self.scale,
            user_ids=self.user_ids, item_ids=self.item_ids,
        )

    def __eq__(self, other):
        if not isinstance(other, InteractionDataset):
            return NotImplemented
        return (
            self.n_users == other.n_users
            and self.n_items == other.n_items
            and self.scale == other.scale
            and np.array_equal(self.users, other.users)
            and np.array_equal(self.items, other.items)
            and np.array_equal(self.ratings, other.ratings)
            and self.user_ids == other.user_ids
            and self.item_ids == other.item_ids
        )

    def __repr__(self):
        return (
            f"InteractionDataset(n_users={self.n_users}, n_items={self.n_items}, "
            f"n_observed={self.n_observed})"
        )


@dataclasses.dataclass
class DataSplit:
    """Disjoint train/validation(/test) views over one rating universe."""

    train: InteractionDataset
    validation: InteractionDataset
    test: InteractionDataset | None = None

    def __post_init__(self):
        parts = [self.train, self.validation] + (
            [self.test] if self.test is not None else []
        )
        first = parts[0]
        for part in parts[1:]:
            if (part.n_users, part.n_items, part.scale) != (
                first.n_users, first.n_items, first.scale,
            ):
                raise DataFormatError("split parts disagree on universe or scale")
        seen = set()
        for part in parts:
            pairs = part.pair_set()
            if seen & pairs:
                raise DataFormatError("split parts share (user, item) pairs")
            seen |= pairs


def _parse_rating(token, lineno):
    try:
        return float(token)
    except ValueError:
        raise DataFormatError(f"non-numeric rating {token!r}", line=lineno) from None


def load_triples(path, scale):
    """Load canonical TSV triples, remapping ids by first appearance."""
    user_index, item_index = {}, {}
    users, items, ratings = [], [], []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            fields = line.split("\t")
            if len(fields) != 3:
                raise DataFormatError(
                    f"expected 3 tab-separated fields, got {len(fields)}",
                    line=lineno,
                )
            raw_u, raw_i, raw_r = fields
            rating = _parse_rating(raw_r, lineno)
            if not (scale.r_min <= rating <= scale.r_max):
                raise DataFormatError(
                    f"rating {rating} outside scale "
                    f"[{scale.r_min}, {scale.r_max}]",
                    line=lineno,
                )
            u = user_index.setdefault(raw_u, len(user_index))
            i = item_index.setdefault(raw_i, len(item_index))
            if (u, i) in seen:
                raise DataFormatError(
                    f"duplicate (user, item) pair ({raw_u!r}, {raw_i!r})",
                    line=lineno,
                )
            seen.add((u, i))
            users.append(u)
            items.append(i)
            ratings.append(rating)
    return InteractionDataset(
        len(user_index), len(item_index), users, items, ratings, scale,
        user_ids=list(user_index), item_ids=list(item_index),
    )


def load_triples_indexed(path, scale, n_users, n_items):
    """Load TSV triples whose ids already are dense 0-based indices.

    Used for files this package wrote itself (simulator output), where
    the universe size must survive even when some users or items have no
    observations.
    """
    users, items, ratings = [], [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            fields = line.split("\t")
            if len(fields) != 3:
                raise DataFormatError(
                    f"expected 3 tab-separated fields, got {len(fields)}",
                    line=lineno,
                )
            try:
                u, i = int(fields[0]), int(fields[1])
            except ValueError:
                raise DataFormatError(
                    f"non-integer index in {fields[:2]!r}", line=lineno
                ) from None
            if not (0 <= u < n_users and 0 <= i < n_items):
                raise DataFormatError(
                    f"index ({u}, {i}) outside universe "
                    f"{n_users} x {n_items}",
                    line=lineno,
                )
            users.append(u)
            items.append(i)
            ratings.append(_parse_rating(fields[2], lineno))
    return InteractionDataset(n_users, n_items, users, items, ratings, scale)


def load_coat_matrix(path, scale):
    """Load a dense whitespace-separated matrix; 0 means unobserved."""
    rows = []
    width = None
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            try:
                row = [float(tok) for tok in line.split()]
            except ValueError:
                raise DataFormatError("non-numeric matrix entry", line=lineno) from None
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise DataFormatError(
                    f"ragged row: expected {width} columns, got {len(row)}",
                    line=lineno,
                )
            for value in row:
                if value != 0.0 and not (scale.r_min <= value <= scale.r_max):
                    raise DataFormatError(
                        f"value {value} outside {{0}} union "
                        f"[{scale.r_min}, {scale.r_max}]",
                        line=lineno,
                    )
            rows.append(row)
    matrix = np.asarray(rows, dtype=np.float64)
    if matrix.size == 0:
        return InteractionDataset(0, 0, [], [], [], scale)
    users, items = np.nonzero(matrix)
    return InteractionDataset(
        matrix.shape[0], matrix.shape[1], users, items, matrix[users, items], scale
    )


def save_triples(dataset, path):
    """Write canonical TSV in stored order, using the retained raw ids."""
    with open(path, "w", encoding="utf-8") as fh:
        for u, i, r in dataset.triples():
            fh.write(f"{dataset.user_ids[u]}\t{dataset.item_ids[i]}\t{r!r}\n")


def save_dense_matrix(matrix, path):
    """Write a dense matrix one row per line (Coat-style layout)."""
    matrix = np.asarray(matrix)
    with open(path, "w", encoding="utf-8") as fh:
        for row in matrix:
            fh.write(" ".join(repr(float(v)) for v in row))
            fh.write("\n")


def split(dataset, val_fraction, seed):
    """Assign each triple to validation with probability `val_fraction`.

    The assignment is a pure function of (dataset, val_fraction, seed):
    one uniform draw per triple in stored order.
    """
    if not 0.0 < val_fraction < 1.0:
        raise ArgumentError(f"val_fraction must be in (0, 1), got {val_fraction}")
    if dataset.n_observed < 2:
        raise ArgumentError("need at least 2 observed triples to split")
    rng = np.random.default_rng(seed)
    to_val = rng.random(dataset.n_observed) < val_fraction
    train = dataset.replace_triples(
        dataset.users[~to_val], dataset.items[~to_val], dataset.ratings[~to_val]
    )
    validation = dataset.replace_triples(
        dataset.users[to_val], dataset.items[to_val], dataset.ratings[to_val]
    )
    return DataSplit(train=train, validation=validation)
