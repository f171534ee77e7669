"""Synthetic multi-entity QA data, dataset files, and Hits@1 evaluation."""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .kgstore import INVERSE_PREFIX, KGError, TripleStore, add_inverse_relations, from_named_triples
from .kgstore import KnowledgeGraph
from .model import ModelParams, Prediction, predict

INV = INVERSE_PREFIX


class DatasetError(ValueError):
    pass


def tokenize(text: str) -> tuple[str, ...]:
    return tuple(text.lower().split())


@dataclass(frozen=True)
class QuestionSample:
    question: str
    entities: tuple[tuple[str, tuple[str, ...]], ...]  # (entity id, mention tokens)
    answers: tuple[str, ...]
    hop_depth: int = 1
    mentions: tuple[str, ...] = ()
    chains: tuple[tuple[str, ...], ...] | None = None  # gold relation chain per entity, if known

    @property
    def question_tokens(self) -> tuple[str, ...]:
        return tokenize(self.question)

    @property
    def n_entities(self) -> int:
        return len(self.entities)

    def to_record(self) -> dict:
        rec = {
            "question": self.question,
            "entities": [{"id": e, "mention": m} for (e, _), m in zip(self.entities, self.mentions)],
            "answers": list(self.answers),
            "hops": self.hop_depth,
        }
        if self.chains is not None:
            rec["chains"] = [list(c) for c in self.chains]
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "QuestionSample":
        ents = rec["entities"]
        mentions = tuple(str(e["mention"]) for e in ents)
        chains = rec.get("chains")
        return cls(
            question=str(rec["question"]),
            entities=tuple((str(e["id"]), tokenize(m)) for e, m in zip(ents, mentions)),
            answers=tuple(str(a) for a in rec["answers"]),
            hop_depth=int(rec["hops"]),
            mentions=mentions,
            chains=None if chains is None else tuple(tuple(c) for c in chains),
        )


def make_sample(question, entities: Sequence[tuple[str, str]], answers, hops=1, chains=None):
    """Build a sample from ``(entity id, mention text)`` pairs."""
    return QuestionSample(
        question=question,
        entities=tuple((e, tokenize(m)) for e, m in entities),
        answers=tuple(answers),
        hop_depth=hops,
        mentions=tuple(m for _, m in entities),
        chains=None if chains is None else tuple(tuple(c) for c in chains),
    )


# -- dataset files -----------------------------------------------------------------


def save_dataset(samples: Iterable[QuestionSample], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for s in samples:
            f.write(json.dumps(s.to_record(), sort_keys=True, ensure_ascii=False) + "\n")


def load_dataset(path, store: TripleStore | None = None) -> list[QuestionSample]:
    """Read one JSON record per line; ids are checked against ``store`` when given."""
    samples = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                s = QuestionSample.from_record(rec)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise DatasetError(f"{path}:{lineno}: malformed record ({e})") from None
            if not s.entities:
                raise DatasetError(f"{path}:{lineno}: record has no entities")
            if not s.answers:
                raise DatasetError(f"{path}:{lineno}: record has no answers")
            if not s.question_tokens:
                raise DatasetError(f"{path}:{lineno}: empty question")
            if store is not None:
                for e in [e for e, _ in s.entities] + list(s.answers):
                    if not store.has_entity(e):
                        raise DatasetError(f"{path}:{lineno}: unknown entity {e!r}")
            samples.append(s)
    return samples


# -- oracle ----------------------------------------------------------------------


class Oracle:
    """Set-based traversal over the named triple list, independent of the matrix path."""

    def __init__(self, store: TripleStore):
        self.adj: dict[tuple[str, str], set[str]] = {}
        for s, p, o in store.named_triples():
            self.adj.setdefault((s, p), set()).add(o)

    def step(self, entities: Iterable[str], relation: str) -> set[str]:
        out: set[str] = set()
        for e in entities:
            out |= self.adj.get((e, relation), set())
        return out

    def chain(self, entity: str, relations: Sequence[str]) -> set[str]:
        cur = {entity}
        for r in relations:
            cur = self.step(cur, r)
        return cur

    def answer(self, entities: Sequence[str], chains: Sequence[Sequence[str]]) -> set[str]:
        sets = [self.chain(e, c) for e, c in zip(entities, chains)]
        return set.intersection(*sets) if sets else set()


def intersection_required(oracle: Oracle, sample: QuestionSample) -> bool:
    """True when the sample has two entities and neither branch alone narrows to one answer."""
    if sample.n_entities < 2 or sample.chains is None:
        return False
    return all(
        len(oracle.chain(e, c)) >= 2 for (e, _), c in zip(sample.entities[:2], sample.chains[:2])
    )


# -- synthetic generator ------------------------------------------------------------


@dataclass(frozen=True)
class GeneratorConfig:
    n_actors: int = 10
    n_films: int = 12
    n_characters: int = 40
    min_cast: int = 3
    recurring: int = 8  # characters that appear in a second film, possibly recast
    n_train: int = 500
    n_dev: int = 100
    n_test: int = 100
    two_entity_fraction: float = 0.5
    intersect_share: float = 0.6  # of two-entity questions, share that need intersection


ONE_ENTITY_TEMPLATES = [
    ("film", ("character",), [
        "which characters appear in {0}",
        "name a character from {0}",
        "who is a character in {0}",
        "what characters are in {0}",
    ]),
    ("character", (INV + "played",), [
        "who played {0}",
        "which actor portrayed {0}",
        "who was the actor behind {0}",
        "who has played the role of {0}",
    ]),
    ("actor", ("acted_in",), [
        "what films did {0} act in",
        "which movies feature {0}",
        "{0} appeared in which film",
        "name a film starring {0}",
    ]),
    ("character", (INV + "character",), [
        "which films feature {0}",
        "in what movie does {0} appear",
        "name a film that has {0}",
        "{0} is a character in which film",
    ]),
    ("actor", ("acted_in", "character"), [
        "which characters appear in films {0} acted in",
        "name a character from a movie starring {0}",
        "what characters share a film with {0}",
    ]),
    ("character", (INV + "character", INV + "acted_in"), [
        "which actors appear in films featuring {0}",
        "who acted in a movie with {0}",
        "name an actor from a film where {0} appears",
    ]),
    ("film", (INV + "acted_in", "played"), [
        "which characters were played by the cast of {0}",
        "what roles have the actors of {0} played",
        "name a role played by someone in {0}",
    ]),
]

# (order of mentions, chains in mention order, templates)
INTERSECT_TEMPLATES = [
    (("actor", "film"), (("played",), ("character",)), [
        "who did {0} play in {1}",
        "which character did {0} portray in {1}",
        "what role did {0} have in {1}",
        "{0} played which character in {1}",
        "who was {0} in {1}",
        "name the role {0} played in {1}",
    ]),
    (("film", "actor"), (("character",), ("played",)), [
        "in {0} who did {1} play",
        "which {0} character was played by {1}",
    ]),
]

SINGLE_BRANCH_TEMPLATES = [
    (("character", "film"), ((INV + "played",), (INV + "acted_in",)), [
        "who played {0} in {1}",
        "which actor portrayed {0} in {1}",
        "who was {0} in {1}",
        "who was the actor behind {0} in {1}",
        "{0} in {1} was played by whom",
        "name the actor who played {0} in {1}",
    ]),
]

_ONSETS = "b d f g k l m n p r s t v z br dr gr kr pl st tr".split()
_VOWELS = "a e i o u ai ea".split()
_CODAS = "n r l s k th x m".split()


def _pseudo_words(rng: np.random.Generator, n: int) -> list[str]:
    words: list[str] = []
    seen: set[str] = set()
    while len(words) < n:
        w = "".join(
            rng.choice(_ONSETS) + rng.choice(_VOWELS) for _ in range(2)
        ) + rng.choice(_CODAS)
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words


@dataclass
class SyntheticData:
    store: TripleStore  # inverse-augmented
    mentions: dict[str, str]
    train: list[QuestionSample]
    dev: list[QuestionSample]
    test: list[QuestionSample]
    kinds: dict[str, str] = field(default_factory=dict)  # question text -> question type


def _build_kg(cfg: GeneratorConfig, rng) -> tuple[TripleStore, dict[str, str], dict[str, str]]:
    names = _pseudo_words(rng, cfg.n_actors + cfg.n_films + cfg.n_characters)
    actors = [f"actor_{i:02d}" for i in range(cfg.n_actors)]
    films = [f"film_{i:02d}" for i in range(cfg.n_films)]
    chars = [f"char_{i:02d}" for i in range(cfg.n_characters)]
    ids = actors + films + chars
    kind = {e: e.split("_")[0] for e in ids}
    mention = {}
    for e, nm in zip(ids, names):
        mention[e] = {"actor": "actor ", "film": "film ", "char": "character "}[kind[e]] + nm

    order = rng.permutation(cfg.n_characters)
    casts: list[list[str]] = [[] for _ in films]
    for j, ci in enumerate(order):
        casts[j % cfg.n_films].append(chars[ci])
    for ci in rng.choice(cfg.n_characters, size=cfg.recurring, replace=False):
        c = chars[ci]
        options = [f for f in range(cfg.n_films) if c not in casts[f]]
        casts[int(rng.choice(options))].append(c)

    named = []
    for f, cast in zip(films, casts):
        for c in cast:
            a = actors[int(rng.integers(cfg.n_actors))]
            named += [(a, "played", c), (f, "character", c), (a, "acted_in", f)]
    store = add_inverse_relations(from_named_triples(named))
    return store, mention, kind


def generate_synthetic(cfg: GeneratorConfig = GeneratorConfig(), seed: int = 0) -> SyntheticData:
    if min(cfg.n_actors, cfg.n_films, cfg.n_characters, cfg.n_train, cfg.n_dev, cfg.n_test) <= 0:
        raise DatasetError("all generator sizes must be positive")
    if cfg.n_characters < cfg.min_cast * cfg.n_films:
        raise DatasetError(
            f"constraint failed: {cfg.n_characters} characters cannot give each of "
            f"{cfg.n_films} films a cast of {cfg.min_cast}"
        )
    if cfg.recurring > cfg.n_characters or cfg.n_films < 2 and cfg.recurring:
        raise DatasetError("constraint failed: too many recurring characters for the film count")
    rng = np.random.default_rng(seed)
    store, mention, kind = _build_kg(cfg, rng)
    oracle = Oracle(store)
    by_kind: dict[str, list[str]] = {}
    for e in store.entities:
        by_kind.setdefault(kind[e], []).append(e)
    kind_key = {"actor": "actor", "film": "film", "character": "char"}

    one, inter, single = [], [], []
    for k, chain, templates in ONE_ENTITY_TEMPLATES:
        for e in by_kind[kind_key[k]]:
            ans = oracle.chain(e, chain)
            ans.discard(e)
            if not ans:
                continue
            for tpl in templates:
                one.append(
                    make_sample(tpl.format(mention[e]), [(e, mention[e])], sorted(ans), len(chain), [chain])
                )

    roles = sorted({(a, f) for a, p, f in store.named_triples() if p == "acted_in"})
    for a, f in roles:
        ca, cf = oracle.chain(a, ("played",)), oracle.chain(f, ("character",))
        both = ca & cf
        if len(ca) < 2 or len(cf) < 2 or len(both) != 1:
            continue
        ents = {"actor": a, "film": f}
        for order, chains, templates in INTERSECT_TEMPLATES:
            es = [ents[o] for o in order]
            assert oracle.answer(es, chains) == both
            for tpl in templates:
                q = tpl.format(*(mention[e] for e in es))
                inter.append(make_sample(q, [(e, mention[e]) for e in es], sorted(both), 1, chains))

    for c in by_kind["char"]:
        players = oracle.chain(c, (INV + "played",))
        if len(players) != 1:
            continue
        for f in sorted(oracle.chain(c, (INV + "character",))):
            for order, chains, templates in SINGLE_BRANCH_TEMPLATES:
                es = [c, f]
                ans = oracle.answer(es, chains)
                if ans != players:
                    continue
                for tpl in templates:
                    q = tpl.format(*(mention[e] for e in es))
                    single.append(make_sample(q, [(e, mention[e]) for e in es], sorted(ans), 1, chains))

    n_total = cfg.n_train + cfg.n_dev + cfg.n_test
    n_two = int(round(n_total * cfg.two_entity_fraction))
    n_inter = int(round(n_two * cfg.intersect_share))
    wanted = {
        "one_entity": (one, n_total - n_two),
        "intersection_required": (inter, n_inter),
        "single_branch": (single, n_two - n_inter),
    }
    splits: dict[str, list[QuestionSample]] = {"train": [], "dev": [], "test": []}
    kinds: dict[str, str] = {}
    for name, (pool, n) in wanted.items():
        if len(pool) < n:
            raise DatasetError(
                f"constraint failed: need {n} {name.replace('_', '-')} questions "
                f"but the KG supports only {len(pool)}; enlarge the KG or shrink the splits"
            )
        picked = [pool[i] for i in rng.choice(len(pool), size=n, replace=False)]
        for s in picked:
            kinds[s.question] = name
        n_dev = int(round(n * cfg.n_dev / n_total))
        n_test = int(round(n * cfg.n_test / n_total))
        splits["dev"] += picked[:n_dev]
        splits["test"] += picked[n_dev : n_dev + n_test]
        splits["train"] += picked[n_dev + n_test :]
    # stratified rounding can be off by one; rebalance from train
    for split, want in (("dev", cfg.n_dev), ("test", cfg.n_test)):
        while len(splits[split]) > want:
            splits["train"].append(splits[split].pop())
        while len(splits[split]) < want:
            splits[split].append(splits["train"].pop())
    for split in splits.values():
        order = rng.permutation(len(split))
        split[:] = [split[i] for i in order]
    return SyntheticData(store, mention, splits["train"], splits["dev"], splits["test"], kinds)


# -- evaluation ------------------------------------------------------------------


@dataclass(frozen=True)
class ChainStep:
    relation: str
    prob: float


@dataclass(frozen=True)
class ChainRecord:
    entity: str
    steps: tuple[ChainStep, ...]

    def format(self) -> str:
        return " → ".join([self.entity] + [f"{s.relation} [{s.prob:.4f}]" for s in self.steps])


@dataclass(frozen=True)
class SampleRecord:
    index: int
    n_entities: int
    predicted: str
    correct: bool
    chains: tuple[ChainRecord, ...]

    def to_json(self) -> dict:
        return {
            "index": self.index,
            "n_entities": self.n_entities,
            "predicted": self.predicted,
            "correct": self.correct,
            "chains": [c.format() for c in self.chains],
        }


def top_chains(pred: Prediction, relations: Sequence[str]) -> tuple[ChainRecord, ...]:
    """Top relation per hop, truncated at the hop with the highest attention score."""
    out = []
    for b in pred.branches:
        n_hops = int(np.argmax(b.attention.a)) + 1
        steps = tuple(
            ChainStep(relations[int(np.argmax(r))], float(np.max(r))) for r in b.relations[:n_hops]
        )
        out.append(ChainRecord(b.entity, steps))
    return tuple(out)


def masked_argmax(kg: KnowledgeGraph, sample: QuestionSample, yhat: np.ndarray) -> int:
    """Highest-scoring entity other than the question entities; ties go to the lowest index."""
    y = np.array(yhat, dtype=np.float64)
    for e, _ in sample.entities:
        y[kg.store.entity_index(e)] = 0.0
    return int(np.argmax(y))


@dataclass
class EvalReport:
    hits_at_1: float
    buckets: dict[str, float]
    counts: dict[str, int]
    records: list[SampleRecord]

    def to_json(self) -> dict:
        return {
            "hits_at_1": self.hits_at_1,
            "buckets": self.buckets,
            "counts": self.counts,
            "records": [r.to_json() for r in self.records],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, indent=1, ensure_ascii=False) + "\n"


def bucket_of(n_entities: int) -> str:
    return "1" if n_entities <= 1 else ">1"


def summarize(records: Sequence[SampleRecord]) -> EvalReport:
    counts = {"1": 0, ">1": 0}
    hits = {"1": 0, ">1": 0}
    for r in records:
        b = bucket_of(r.n_entities)
        counts[b] += 1
        hits[b] += r.correct
    total = len(records)
    overall = sum(hits.values()) / total if total else 0.0
    buckets = {b: (hits[b] / counts[b] if counts[b] else 0.0) for b in counts}
    return EvalReport(overall, buckets, counts, list(records))


def evaluate(
    variant: str,
    params: ModelParams,
    kg: KnowledgeGraph,
    samples: Sequence[QuestionSample],
    eps: float = 1e-6,
    workers: int = 1,
) -> EvalReport:
    def one(item):
        i, s = item
        pred = predict(params, kg, s, variant, eps)
        k = masked_argmax(kg, s, pred.yhat)
        name = kg.store.entities[k]
        return SampleRecord(i, s.n_entities, name, name in s.answers, top_chains(pred, kg.store.relations))

    items = list(enumerate(samples))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            records = list(ex.map(one, items))
    else:
        records = [one(it) for it in items]
    return summarize(records)


def check_resolvable(samples: Sequence[QuestionSample], store: TripleStore) -> None:
    for i, s in enumerate(samples):
        for e in [e for e, _ in s.entities] + list(s.answers):
            if not store.has_entity(e):
                raise KGError(f"sample {i}: unknown entity {e!r}")
