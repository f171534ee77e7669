"""Triple store, inverse augmentation, subgraph extraction, reification and sharding.

A knowledge graph is held as a :class:`TripleStore` (vocabularies plus an
``(N_T, 3)`` index array) and turned into three sparse indicator matrices
(subject, relation, object) for traversal as matrix algebra.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Iterable, Sequence

import numpy as np

INVERSE_PREFIX = "<inv>-"
KG_MAGIC = b"DKG1"


class KGError(ValueError):
    pass


class ParseError(KGError):
    def __init__(self, lineno: int, msg: str):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


@dataclass(frozen=True)
class TripleStore:
    entities: tuple[str, ...]
    relations: tuple[str, ...]
    triples: np.ndarray  # (N_T, 3) int64 rows of (subject, relation, object)
    _entity_index: dict = field(init=False, repr=False, compare=False)
    _relation_index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        triples = np.asarray(self.triples, dtype=np.int64).reshape(-1, 3)
        triples.setflags(write=False)
        object.__setattr__(self, "triples", triples)
        object.__setattr__(self, "entities", tuple(self.entities))
        object.__setattr__(self, "relations", tuple(self.relations))
        object.__setattr__(self, "_entity_index", {e: i for i, e in enumerate(self.entities)})
        object.__setattr__(self, "_relation_index", {r: i for i, r in enumerate(self.relations)})
        if len(self._entity_index) != len(self.entities):
            raise KGError("duplicate entity identifiers")
        if len(self._relation_index) != len(self.relations):
            raise KGError("duplicate relation identifiers")
        if len(triples):
            s, p, o = triples.T
            if s.min() < 0 or o.min() < 0 or p.min() < 0:
                raise KGError("negative triple index")
            if max(s.max(), o.max()) >= self.n_entities or p.max() >= self.n_relations:
                raise KGError("triple index outside vocabulary")

    @property
    def n_entities(self) -> int:
        return len(self.entities)

    @property
    def n_relations(self) -> int:
        return len(self.relations)

    @property
    def n_triples(self) -> int:
        return len(self.triples)

    def entity_index(self, name: str) -> int:
        try:
            return self._entity_index[name]
        except KeyError:
            raise KGError(f"unknown entity {name!r}") from None

    def relation_index(self, name: str) -> int:
        try:
            return self._relation_index[name]
        except KeyError:
            raise KGError(f"unknown relation {name!r}") from None

    def has_entity(self, name: str) -> bool:
        return name in self._entity_index

    def named_triples(self) -> list[tuple[str, str, str]]:
        E, R = self.entities, self.relations
        return [(E[s], R[p], E[o]) for s, p, o in self.triples.tolist()]

    def __eq__(self, other):
        if not isinstance(other, TripleStore):
            return NotImplemented
        return (
            self.entities == other.entities
            and self.relations == other.relations
            and np.array_equal(self.triples, other.triples)
        )

    def __hash__(self):
        return hash((self.entities, self.relations, self.triples.tobytes()))


def from_named_triples(named: Iterable[tuple[str, str, str]]) -> TripleStore:
    """Build a store, assigning indices in first-appearance order and dropping exact duplicates."""
    ent: dict[str, int] = {}
    rel: dict[str, int] = {}
    seen: set[tuple[int, int, int]] = set()
    rows = []
    for s, p, o in named:
        si = ent.setdefault(s, len(ent))
        pi = rel.setdefault(p, len(rel))
        oi = ent.setdefault(o, len(ent))
        key = (si, pi, oi)
        if key in seen:
            continue
        seen.add(key)
        rows.append(key)
    return TripleStore(tuple(ent), tuple(rel), np.array(rows, dtype=np.int64).reshape(-1, 3))


def ingest_triples(reader: Iterable[str]) -> TripleStore:
    """Parse ``subject<TAB>relation<TAB>object`` lines. Blank and ``#`` lines are skipped."""

    def rows():
        for lineno, line in enumerate(reader, start=1):
            line = line.rstrip("\r\n")
            if not line.strip() or line.startswith("#"):
                continue
            fields = line.split("\t")
            if len(fields) != 3:
                raise ParseError(lineno, f"expected 3 tab-separated fields, got {len(fields)}")
            if not all(fields):
                raise ParseError(lineno, "empty identifier")
            yield tuple(fields)

    return from_named_triples(rows())


def add_inverse_relations(store: TripleStore) -> TripleStore:
    for r in store.relations:
        if r.startswith(INVERSE_PREFIX):
            raise KGError(f"relation {r!r} already carries the inverse prefix")
    relations = store.relations + tuple(INVERSE_PREFIX + r for r in store.relations)
    t = store.triples
    inv = np.stack([t[:, 2], t[:, 1] + store.n_relations, t[:, 0]], axis=1)
    return TripleStore(store.entities, relations, np.concatenate([t, inv]))


def strip_inverse(relation: str) -> str:
    return relation[len(INVERSE_PREFIX):] if relation.startswith(INVERSE_PREFIX) else relation


def _inverse_partner(store: TripleStore) -> dict[tuple[int, int, int], int]:
    """Map each triple key to the row index of its inverse twin, where one exists."""
    rel_of = {}
    for i, r in enumerate(store.relations):
        if r.startswith(INVERSE_PREFIX) and strip_inverse(r) in store._relation_index:
            j = store._relation_index[strip_inverse(r)]
            rel_of[i] = j
            rel_of[j] = i
    if not rel_of:
        return {}
    rows = {tuple(row): i for i, row in enumerate(store.triples.tolist())}
    partner = {}
    for (s, p, o), i in rows.items():
        if p in rel_of:
            j = rows.get((o, rel_of[p], s))
            if j is not None:
                partner[i] = j
    return partner


def extract_subgraph(store: TripleStore, seeds: Iterable[str], hops: int) -> TripleStore:
    """Keep the facts reachable from ``seeds`` within ``hops`` forward expansions.

    Expansion follows triple subjects only. When a kept triple has an inverse
    twin in the store, the twin is kept too, since both encode one fact.
    """
    seeds = list(seeds)
    if not seeds:
        raise KGError("seed set is empty")
    if hops < 1:
        raise KGError(f"hops must be >= 1, got {hops}")
    frontier = np.zeros(store.n_entities, dtype=bool)
    for s in seeds:
        frontier[store.entity_index(s)] = True

    t = store.triples
    keep = np.zeros(store.n_triples, dtype=bool)
    for _ in range(hops):
        hit = frontier[t[:, 0]]
        keep |= hit
        reached = np.zeros_like(frontier)
        reached[t[hit, 2]] = True
        frontier = frontier | reached

    for i, j in _inverse_partner(store).items():
        if keep[i]:
            keep[j] = True
    return _compact(store, keep)


def _compact(store: TripleStore, keep: np.ndarray) -> TripleStore:
    t = store.triples[keep]
    ent_used = np.zeros(store.n_entities, dtype=bool)
    ent_used[t[:, 0]] = True
    ent_used[t[:, 2]] = True
    rel_used = np.zeros(store.n_relations, dtype=bool)
    rel_used[t[:, 1]] = True
    ent_map = np.cumsum(ent_used) - 1
    rel_map = np.cumsum(rel_used) - 1
    new = np.stack([ent_map[t[:, 0]], rel_map[t[:, 1]], ent_map[t[:, 2]]], axis=1)
    entities = tuple(e for e, u in zip(store.entities, ent_used) if u)
    relations = tuple(r for r, u in zip(store.relations, rel_used) if u)
    return TripleStore(entities, relations, new)


# -- sparse layout -----------------------------------------------------------


@dataclass(frozen=True)
class CSRMatrix:
    """Compressed-row sparse matrix with the two products traversal needs."""

    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray
    shape: tuple[int, int]
    _rows: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        rows = np.repeat(np.arange(self.shape[0], dtype=np.int64), np.diff(self.indptr))
        object.__setattr__(self, "_rows", rows)

    @classmethod
    def one_per_row(cls, columns: np.ndarray, n_cols: int) -> "CSRMatrix":
        columns = np.asarray(columns, dtype=np.int64)
        n = len(columns)
        return cls(
            np.arange(n + 1, dtype=np.int64), columns.copy(), np.ones(n), (n, int(n_cols))
        )

    @property
    def nnz(self) -> int:
        return len(self.indices)

    def matvec(self, x: np.ndarray) -> np.ndarray:
        """``A @ x``"""
        return np.bincount(self._rows, weights=self.data * x[self.indices], minlength=self.shape[0])

    def rmatvec(self, v: np.ndarray) -> np.ndarray:
        """``A.T @ v``; accumulates in row order, so results are deterministic."""
        return np.bincount(self.indices, weights=self.data * v[self._rows], minlength=self.shape[1])

    def row_slice(self, start: int, end: int) -> "CSRMatrix":
        lo, hi = self.indptr[start], self.indptr[end]
        return CSRMatrix(
            self.indptr[start : end + 1] - lo,
            self.indices[lo:hi],
            self.data[lo:hi],
            (end - start, self.shape[1]),
        )

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.shape)
        np.add.at(out, (self._rows, self.indices), self.data)
        return out


@dataclass(frozen=True)
class ReifiedMatrices:
    m_s: CSRMatrix
    m_p: CSRMatrix
    m_o: CSRMatrix

    @property
    def n_triples(self) -> int:
        return self.m_s.shape[0]

    @property
    def n_entities(self) -> int:
        return self.m_s.shape[1]

    @property
    def n_relations(self) -> int:
        return self.m_p.shape[1]

    def row_slice(self, start: int, end: int) -> "ReifiedMatrices":
        return ReifiedMatrices(
            self.m_s.row_slice(start, end),
            self.m_p.row_slice(start, end),
            self.m_o.row_slice(start, end),
        )


@dataclass(frozen=True)
class ShardedMatrices:
    shards: tuple[ReifiedMatrices, ...]
    shard_ranges: tuple[tuple[int, int], ...]

    @property
    def n_triples(self) -> int:
        return self.shard_ranges[-1][1] if self.shard_ranges else 0

    @property
    def n_entities(self) -> int:
        return self.shards[0].n_entities

    @property
    def n_relations(self) -> int:
        return self.shards[0].n_relations


def reify(store: TripleStore) -> ReifiedMatrices:
    t = store.triples
    return ReifiedMatrices(
        CSRMatrix.one_per_row(t[:, 0], store.n_entities),
        CSRMatrix.one_per_row(t[:, 1], store.n_relations),
        CSRMatrix.one_per_row(t[:, 2], store.n_entities),
    )


def shard_ranges(n_rows: int, k: int) -> list[tuple[int, int]]:
    """Contiguous ranges of near-equal size; the first ``n_rows % k`` ranges get one extra row."""
    base, extra = divmod(n_rows, k)
    ranges, start = [], 0
    for i in range(k):
        end = start + base + (1 if i < extra else 0)
        ranges.append((start, end))
        start = end
    return ranges


def partition(m: ReifiedMatrices, k: int) -> ShardedMatrices:
    if not 1 <= k <= max(1, m.n_triples):
        raise KGError(f"shard count {k} outside [1, {max(1, m.n_triples)}]")
    ranges = shard_ranges(m.n_triples, k)
    return ShardedMatrices(tuple(m.row_slice(a, b) for a, b in ranges), tuple(ranges))


@dataclass(frozen=True)
class KnowledgeGraph:
    """A store bundled with its (possibly sharded) traversal matrices."""

    store: TripleStore
    matrices: ReifiedMatrices | ShardedMatrices

    @classmethod
    def build(cls, store: TripleStore, shards: int = 1) -> "KnowledgeGraph":
        m = reify(store)
        return cls(store, m if shards == 1 else partition(m, shards))


# -- serialization -----------------------------------------------------------


def _write_str(f: BinaryIO, s: str) -> None:
    b = s.encode("utf-8")
    f.write(struct.pack("<Q", len(b)))
    f.write(b)


def _read_exact(f: BinaryIO, n: int) -> bytes:
    b = f.read(n)
    if len(b) != n:
        raise KGError("truncated knowledge-graph file")
    return b


def _read_str(f: BinaryIO) -> str:
    (n,) = struct.unpack("<Q", _read_exact(f, 8))
    return _read_exact(f, n).decode("utf-8")


def save_store(store: TripleStore, f: BinaryIO) -> None:
    f.write(KG_MAGIC)
    f.write(struct.pack("<QQQ", store.n_entities, store.n_relations, store.n_triples))
    for e in store.entities:
        _write_str(f, e)
    for r in store.relations:
        _write_str(f, r)
    f.write(store.triples.astype("<u8").tobytes())


def load_store(f: BinaryIO) -> TripleStore:
    magic = f.read(4)
    if magic != KG_MAGIC:
        raise KGError(f"not a knowledge-graph file (magic {magic!r})")
    n_e, n_r, n_t = struct.unpack("<QQQ", _read_exact(f, 24))
    entities = [_read_str(f) for _ in range(n_e)]
    relations = [_read_str(f) for _ in range(n_r)]
    triples = np.frombuffer(_read_exact(f, 24 * n_t), dtype="<u8").astype(np.int64)
    return TripleStore(tuple(entities), tuple(relations), triples.reshape(-1, 3))


def write_tsv(store: TripleStore, f) -> None:
    for s, p, o in store.named_triples():
        f.write(f"{s}\t{p}\t{o}\n")


def read_store(path) -> TripleStore:
    with open(path, "rb") as f:
        return load_store(f)


def write_store(store: TripleStore, path) -> None:
    with open(path, "wb") as f:
        save_store(store, f)


def brute_force_objects(store: TripleStore, subject: int, relation: int) -> dict[int, int]:
    """Count of matching triples per object, by plain enumeration. Used as a traversal oracle."""
    counts: dict[int, int] = {}
    for s, p, o in store.triples.tolist():
        if s == subject and p == relation:
            counts[o] = counts.get(o, 0) + 1
    return counts


__all__: Sequence[str] = [
    "INVERSE_PREFIX",
    "KGError",
    "ParseError",
    "TripleStore",
    "CSRMatrix",
    "ReifiedMatrices",
    "ShardedMatrices",
    "KnowledgeGraph",
    "from_named_triples",
    "ingest_triples",
    "add_inverse_relations",
    "strip_inverse",
    "extract_subgraph",
    "reify",
    "partition",
    "shard_ranges",
    "save_store",
    "load_store",
    "read_store",
    "write_store",
    "write_tsv",
    "brute_force_objects",
]
