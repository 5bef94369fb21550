"""Rating files, MNAR-train / MAR-test splits and a synthetic split generator.

Two input layouts are read: a dense whitespace matrix where 0 means missing
(the Coat distribution) and delimited ``user item rating`` lines (Yahoo R3
style).  A :class:`SplitDataset` carries MNAR train and validation triples and
the MAR test triples over one :class:`PairSpace`.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional

import numpy as np

from .archive import read_archive, write_archive
from .core import ConfigError, DomainError, PairSpace, SeededRng
from .metrics import POSITIVE_THRESHOLD, EvalSet, binarize

log = logging.getLogger(__name__)

DATASET_MAGIC = b"TDRDATA\x01"


class ParseError(ValueError):
    pass


class FileFormat(str, Enum):
    ASCII_MATRIX = "ASCII_MATRIX"
    DELIMITED_TRIPLES = "DELIMITED_TRIPLES"


@dataclass(frozen=True)
class RatingFileSpec:
    format: FileFormat = FileFormat.DELIMITED_TRIPLES
    delimiter: Optional[str] = None  # None splits on any whitespace
    scale: int = 5
    zero_means_missing: bool = True


@dataclass
class Triples:
    users: np.ndarray
    items: np.ndarray
    ratings: np.ndarray

    def __post_init__(self):
        self.users = np.asarray(self.users, dtype=np.int64)
        self.items = np.asarray(self.items, dtype=np.int64)
        self.ratings = np.asarray(self.ratings, dtype=np.float64)
        if not (self.users.shape == self.items.shape == self.ratings.shape) or self.users.ndim != 1:
            raise ValueError("triple arrays must be 1-d and of equal length")

    def __len__(self) -> int:
        return int(self.users.size)

    def take(self, idx) -> "Triples":
        return Triples(self.users[idx], self.items[idx], self.ratings[idx])

    def keys(self, space: PairSpace) -> np.ndarray:
        return space.flat(self.users, self.items)

    def as_set(self):
        return {(int(u), int(i), float(r)) for u, i, r in zip(self.users, self.items, self.ratings)}


@dataclass
class IdMap:
    """Dense index <-> raw id token, in order of first appearance."""

    users: List[str] = field(default_factory=list)
    items: List[str] = field(default_factory=list)

    def __post_init__(self):
        self._u = {k: n for n, k in enumerate(self.users)}
        self._i = {k: n for n, k in enumerate(self.items)}

    def user(self, token: str) -> int:
        if token not in self._u:
            self._u[token] = len(self.users)
            self.users.append(token)
        return self._u[token]

    def item(self, token: str) -> int:
        if token not in self._i:
            self._i[token] = len(self.items)
            self.items.append(token)
        return self._i[token]


def _check_scale(rating: float, spec: RatingFileSpec, where: str):
    if not 1 <= rating <= spec.scale:
        raise ParseError(f"{where}: rating {rating:g} outside the 1..{spec.scale} scale")


def load_matrix(path, spec: RatingFileSpec = RatingFileSpec(FileFormat.ASCII_MATRIX)) -> Triples:
    """One triple per nonzero cell of a rectangular integer matrix."""
    users, items, ratings = [], [], []
    width = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            toks = line.split(spec.delimiter) if spec.delimiter else line.split()
            if not toks:
                continue
            try:
                row = [int(t) for t in toks]
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: non-integer token ({exc})") from None
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise ParseError(f"{path}:{lineno}: row has {len(row)} columns, expected {width}")
            u = lineno - 1
            for i, v in enumerate(row):
                if v == 0 and spec.zero_means_missing:
                    continue
                _check_scale(v, spec, f"{path}:{lineno}")
                users.append(u)
                items.append(i)
                ratings.append(v)
    return Triples(np.array(users, dtype=np.int64), np.array(items, dtype=np.int64),
                   np.array(ratings, dtype=np.float64))


def load_triples(path, spec: RatingFileSpec = RatingFileSpec(), id_map: Optional[IdMap] = None):
    """Parse ``user item rating`` lines; returns ``(triples, id_map, n_duplicates)``.

    Raw ids are remapped to dense indices (pass an existing ``id_map`` to share
    indices across files).  For a repeated (user, item) the last line wins.
    """
    id_map = id_map if id_map is not None else IdMap()
    seen: Dict[tuple, float] = {}
    dupes = 0
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            toks = line.split(spec.delimiter) if spec.delimiter else line.split()
            toks = [t.strip() for t in toks]
            if len(toks) < 3:
                raise ParseError(f"{path}:{lineno}: expected 'user item rating', got {line.rstrip()!r}")
            try:
                rating = float(toks[2])
            except ValueError:
                raise ParseError(f"{path}:{lineno}: bad rating {toks[2]!r}") from None
            if rating == 0 and spec.zero_means_missing:
                continue
            _check_scale(rating, spec, f"{path}:{lineno}")
            key = (id_map.user(toks[0]), id_map.item(toks[1]))
            if key in seen:
                dupes += 1
                del seen[key]  # re-insert so order follows the last occurrence
            seen[key] = rating
    if dupes:
        log.warning("%s: %d duplicate (user, item) lines, kept the last of each", path, dupes)
    if seen:
        ui = np.array(list(seen.keys()), dtype=np.int64)
        tr = Triples(ui[:, 0], ui[:, 1], np.array(list(seen.values())))
    else:
        tr = Triples(np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0))
    return tr, id_map, dupes


def scale_ratings(ratings, scale: int = 5) -> np.ndarray:
    return (np.asarray(ratings, dtype=np.float64) - 1.0) / (scale - 1.0)


@dataclass
class SplitDataset:
    space: PairSpace
    train: Triples
    val: Triples
    test: Triples
    scale: int = 5
    threshold: float = POSITIVE_THRESHOLD
    meta: dict = field(default_factory=dict)
    id_map: Optional[IdMap] = None

    def eval_set(self, part: str) -> EvalSet:
        t = getattr(self, part)
        return EvalSet(t.users, t.items, binarize(t.ratings, self.threshold),
                       scale_ratings(t.ratings, self.scale))

    def train_labels(self) -> np.ndarray:
        return binarize(self.train.ratings, self.threshold).astype(np.float64)

    def exposure(self) -> np.ndarray:
        """Dense 0/1 matrix of training exposures (validation pairs count as unexposed)."""
        o = np.zeros(self.space.shape, dtype=np.int8)
        o[self.train.users, self.train.items] = 1
        return o

    def save(self, path) -> None:
        arrays = {}
        for part in ("train", "val", "test"):
            t = getattr(self, part)
            arrays[f"{part}.users"] = t.users
            arrays[f"{part}.items"] = t.items
            arrays[f"{part}.ratings"] = t.ratings
        header = {"n_users": self.space.n_users, "n_items": self.space.n_items, "scale": self.scale,
                  "threshold": self.threshold, "meta": self.meta,
                  "id_map": None if self.id_map is None else {"users": self.id_map.users,
                                                              "items": self.id_map.items}}
        write_archive(path, DATASET_MAGIC, header, arrays)

    @classmethod
    def load(cls, path) -> "SplitDataset":
        head, arrays = read_archive(path, DATASET_MAGIC)

        def part(name):
            return Triples(arrays[f"{name}.users"], arrays[f"{name}.items"], arrays[f"{name}.ratings"])

        ids = head.get("id_map")
        return cls(PairSpace(head["n_users"], head["n_items"]), part("train"), part("val"), part("test"),
                   head["scale"], head["threshold"], head["meta"],
                   None if ids is None else IdMap(list(ids["users"]), list(ids["items"])))


def make_split(mnar: Triples, mar: Triples, val_fraction: float = 0.1, seed: int = 0,
               space: Optional[PairSpace] = None, scale: int = 5) -> SplitDataset:
    """Carve a seeded validation share out of the MNAR triples; MAR is the test set.

    MNAR pairs that also occur in the MAR set are dropped from the MNAR side
    so the test pairs stay disjoint from training and validation.
    """
    if not 0.0 < val_fraction < 0.5:
        raise ConfigError(f"val_fraction must be in (0, 0.5), got {val_fraction}")
    if len(mnar) == 0 or len(mar) == 0:
        raise DomainError("both MNAR and MAR partitions must be nonempty")
    if space is None:
        space = PairSpace(int(max(mnar.users.max(), mar.users.max())) + 1,
                          int(max(mnar.items.max(), mar.items.max())) + 1)
    overlap = np.isin(mnar.keys(space), mar.keys(space))
    if overlap.any():
        log.info("dropping %d MNAR pairs that also appear in the MAR set", int(overlap.sum()))
        mnar = mnar.take(~overlap)
    gen = SeededRng(seed).child("split").generator("val")
    perm = gen.permutation(len(mnar))
    n_val = int(round(val_fraction * len(mnar)))
    if n_val == 0 or n_val == len(mnar):
        raise DomainError("validation carve left an empty partition")
    val_idx, train_idx = np.sort(perm[:n_val]), np.sort(perm[n_val:])
    meta = {"val_fraction": val_fraction, "seed": seed, "dropped_overlap": int(overlap.sum())}
    return SplitDataset(space, mnar.take(train_idx), mnar.take(val_idx), mar, scale, meta=meta)


def synthetic_split(n_users: int = 200, n_items: int = 300, seed: int = 0, obs_rate: float = 0.08,
                    alpha: float = 0.5, test_per_user: int = 16, rank: int = 4,
                    label_noise: float = 0.1, val_fraction: float = 0.1) -> SplitDataset:
    """Offline stand-in for an MNAR/MAR benchmark.

    True five-point ratings come from a low-rank score matrix.  Training
    exposure is rating dependent (``p ~ alpha^max(1, 5 - R)`` with an item
    popularity factor, rescaled to ``obs_rate``), so high ratings are
    over-represented.  The test set draws ``test_per_user`` items uniformly per
    user from the unexposed pairs.  Observed ratings are the true ones with a
    ``label_noise`` chance of moving one step.
    """
    from .synthgen import lowrank_rating_source  # local import: synthgen pulls in training deps

    root = SeededRng(seed).child("synthetic-split")
    _, _, _, R = lowrank_rating_source(n_users, n_items, rank=rank, density=0.0, rng=root.child("truth"))
    gen = root.generator("exposure")
    pop = np.exp(gen.normal(0.0, 0.5, n_items))[None, :]
    p = alpha ** np.maximum(1, 5 - R) * pop
    p = np.minimum(p * obs_rate / p.mean(), 1.0)
    o = gen.random(R.shape) < p

    noise = root.generator("noise")
    step = noise.choice([-1, 1], size=R.shape) * (noise.random(R.shape) < label_noise)
    observed = np.clip(R + step, 1, 5)

    mu, mi = np.nonzero(o)
    mnar = Triples(mu, mi, observed[mu, mi])
    tgen = root.generator("test")
    tu, ti = [], []
    for u in range(n_users):
        free = np.flatnonzero(~o[u])
        pick = tgen.choice(free, size=min(test_per_user, free.size), replace=False)
        tu.append(np.full(pick.size, u))
        ti.append(np.sort(pick))
    tu, ti = np.concatenate(tu), np.concatenate(ti)
    mar = Triples(tu, ti, observed[tu, ti])
    split = make_split(mnar, mar, val_fraction, seed, PairSpace(n_users, n_items))
    split.meta.update({"source": "synthetic", "obs_rate": obs_rate, "alpha": alpha,
                       "test_per_user": test_per_user, "label_noise": label_noise})
    return split
