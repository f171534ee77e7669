"""Baseline and intersection question-answering models over a differentiable KG.

Both variants share one parameter layout: a token embedding table feeding a
question encoder, one relation decoder per hop whose input grows by ``N_R``
each hop, and one attention row per hop. The intersection variant runs a
branch per question entity (at most two) and takes the element-wise minimum
of the attention-weighted branch estimates.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Protocol, Sequence

import numpy as np

from .diffops import GradTape, Var, backward
from .kgstore import KnowledgeGraph

VARIANTS = ("baseline", "intersect")
CHECKPOINT_MAGIC = b"DKM1"


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class Vocab:
    """Token vocabulary; index 0 is the unknown token."""

    tokens: tuple[str, ...]
    _index: dict = field(init=False, repr=False, compare=False)

    UNK = "<unk>"
    SEP = "<sep>"

    def __post_init__(self):
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.tokens)})
        if self.tokens[:2] != (self.UNK, self.SEP):
            raise ModelError("vocabulary must start with the reserved <unk>, <sep> tokens")

    @classmethod
    def build(cls, token_lists) -> "Vocab":
        seen = {cls.UNK: None, cls.SEP: None}
        for toks in token_lists:
            for t in toks:
                seen.setdefault(t, None)
        return cls(tuple(seen))

    def __len__(self):
        return len(self.tokens)

    def ids(self, tokens: Sequence[str]) -> list[int]:
        return [self._index.get(t, 0) for t in tokens]


@dataclass
class ModelParams:
    vocab: Vocab
    token_embeddings: np.ndarray
    w_dec: list[np.ndarray]
    w_att: list[np.ndarray]

    @property
    def dim(self) -> int:
        return self.token_embeddings.shape[1]

    @property
    def n_hops(self) -> int:
        return len(self.w_dec)

    @property
    def n_relations(self) -> int:
        return self.w_dec[0].shape[0]

    def named(self) -> list[tuple[str, np.ndarray]]:
        """Arrays in declaration order."""
        out = [("token_embeddings", self.token_embeddings)]
        out += [(f"w_dec.{t}", w) for t, w in enumerate(self.w_dec)]
        out += [(f"w_att.{t}", w) for t, w in enumerate(self.w_att)]
        return out

    def with_arrays(self, arrays: dict[str, np.ndarray]) -> "ModelParams":
        T = self.n_hops
        return ModelParams(
            self.vocab,
            arrays["token_embeddings"],
            [arrays[f"w_dec.{t}"] for t in range(T)],
            [arrays[f"w_att.{t}"] for t in range(T)],
        )

    def copy(self) -> "ModelParams":
        return self.with_arrays({k: v.copy() for k, v in self.named()})


def param_shapes(vocab_size: int, dim: int, n_relations: int, n_hops: int) -> dict[str, tuple]:
    shapes = {"token_embeddings": (vocab_size, dim)}
    for t in range(n_hops):
        shapes[f"w_dec.{t}"] = (n_relations, dim + t * n_relations)
    for t in range(n_hops):
        shapes[f"w_att.{t}"] = (1, dim + t * n_relations)
    return shapes


def init_params(seed: int, vocab: Vocab, dim: int, n_relations: int, n_hops: int = 2) -> ModelParams:
    """Uniform init in ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]``.

    An embedding row is selected by a single one-hot input, so its fan-in is 1.
    """
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in param_shapes(len(vocab), dim, n_relations, n_hops).items():
        fan_in = 1 if name == "token_embeddings" else shape[1]
        bound = 1.0 / np.sqrt(fan_in)
        arrays[name] = rng.uniform(-bound, bound, size=shape)
    return _from_arrays(vocab, arrays, n_hops)


def zero_params(vocab: Vocab, dim: int, n_relations: int, n_hops: int = 2) -> ModelParams:
    shapes = param_shapes(len(vocab), dim, n_relations, n_hops)
    return _from_arrays(vocab, {k: np.zeros(s) for k, s in shapes.items()}, n_hops)


def _from_arrays(vocab, arrays, n_hops) -> ModelParams:
    return ModelParams(
        vocab,
        arrays["token_embeddings"],
        [arrays[f"w_dec.{t}"] for t in range(n_hops)],
        [arrays[f"w_att.{t}"] for t in range(n_hops)],
    )


# -- encoder ---------------------------------------------------------------------


class QuestionEncoder(Protocol):
    def __call__(self, g: "Graph", question_tokens: Sequence[str], mention_tokens: Sequence[str]) -> Var: ...


def mean_pair_encoder(g: "Graph", question_tokens, mention_tokens) -> Var:
    """Question segment mean plus mention segment mean.

    Stands in for reading a transformer at the separator position of
    ``question [SEP] mention``: the result depends on both segments and
    differs per mention.
    """
    if not question_tokens:
        raise ModelError("question has no tokens")
    if not mention_tokens:
        raise ModelError("entity mention has no tokens")
    vocab = g.params.vocab
    table = g.p["token_embeddings"]
    return g.tape.add(
        g.tape.mean_rows(table, vocab.ids(question_tokens)),
        g.tape.mean_rows(table, vocab.ids(mention_tokens)),
    )


# -- graph construction ----------------------------------------------------------


@dataclass(frozen=True)
class AttentionScores:
    c: np.ndarray
    a: np.ndarray


@dataclass
class BranchTrace:
    entity: str
    relations: list[np.ndarray]
    attention: AttentionScores
    estimate: np.ndarray


@dataclass
class Prediction:
    yhat: np.ndarray
    branches: list[BranchTrace]


class Graph:
    """One forward pass: a tape with every parameter bound as a leaf."""

    def __init__(
        self,
        params: ModelParams,
        kg: KnowledgeGraph | None = None,
        encoder: QuestionEncoder = mean_pair_encoder,
        workers: int = 1,
    ):
        self.params = params
        self.kg = kg
        self.encoder = encoder
        self.tape = GradTape(kg.matrices if kg is not None else None, workers)
        self.p = {name: self.tape.param(name, arr) for name, arr in params.named()}

    def as_var(self, x) -> Var:
        return x if isinstance(x, Var) else self.tape.const(x)

    def encode(self, question_tokens, mention_tokens) -> Var:
        return self.encoder(self, question_tokens, mention_tokens)

    def _history(self, h: Var, prev: Sequence[Var]) -> Var:
        # [h_q | r_{t-1} | ... | r_1]
        return self.tape.concat([h, *reversed(prev)])

    def decode(self, h: Var, prev: Sequence[Var]) -> Var:
        t = len(prev)
        if t >= self.params.n_hops:
            raise ModelError(f"hop index {t} outside the {self.params.n_hops}-hop decoder")
        logits = self.tape.matvec(self.p[f"w_dec.{t}"], self._history(h, prev))
        return self.tape.softmax(logits)

    def attention(self, h: Var, relations: Sequence[Var]) -> tuple[Var, Var]:
        T = self.params.n_hops
        if len(relations) != T:
            raise ModelError(f"attention needs {T} relation distributions, got {len(relations)}")
        scores = [
            self.tape.matvec(self.p[f"w_att.{t}"], self._history(h, relations[:t])) for t in range(T)
        ]
        c = self.tape.concat(scores)
        return c, self.tape.softmax(c)

    def branch(self, x0: Var, h: Var) -> tuple[Var, Var, Var, list[Var]]:
        relations, x = [], x0
        xs = []
        for _ in range(self.params.n_hops):
            r = self.decode(h, relations)
            relations.append(r)
            x = self.tape.follow(x, r)
            xs.append(x)
        c, a = self.attention(h, relations)
        return self.tape.weighted_sum(a, xs), c, a, relations

    def onehot(self, entity: str) -> Var:
        store = self.kg.store
        x = np.zeros(store.n_entities)
        x[store.entity_index(entity)] = 1.0
        return self.tape.const(x)

    def run(self, sample, variant: str, eps: float) -> tuple[Var, list[BranchTrace]]:
        """Clamped answer estimate for ``sample`` plus per-branch traces."""
        if variant not in VARIANTS:
            raise ModelError(f"unknown model variant {variant!r}")
        if not sample.entities:
            raise ModelError("sample has no question entities")
        used = sample.entities[: 1 if variant == "baseline" else 2]
        outs, traces = [], []
        for entity, mention in used:
            h = self.encode(sample.question_tokens, mention)
            y, c, a, rels = self.branch(self.onehot(entity), h)
            outs.append(y)
            traces.append(
                BranchTrace(
                    entity, [r.value for r in rels], AttentionScores(c.value, a.value), y.value
                )
            )
        y = outs[0] if len(outs) == 1 else self.tape.intersect_min(outs[0], outs[1])
        return self.tape.clamp_unit(y, eps), traces


# -- public forward surface -------------------------------------------------------


def encode_question(params: ModelParams, question_tokens, mention_tokens) -> np.ndarray:
    return Graph(params).encode(question_tokens, mention_tokens).value


def decode_relation(params: ModelParams, h_q, prev: Sequence[np.ndarray]) -> np.ndarray:
    g = Graph(params)
    return g.decode(g.as_var(h_q), [g.as_var(r) for r in prev]).value


def hop_attention(params: ModelParams, h_q, relations: Sequence[np.ndarray]) -> AttentionScores:
    g = Graph(params)
    c, a = g.attention(g.as_var(h_q), [g.as_var(r) for r in relations])
    return AttentionScores(c.value, a.value)


def forward_branch(params: ModelParams, kg: KnowledgeGraph, x0, h_q):
    """Returns ``(estimate, AttentionScores, relation distributions)`` for one branch."""
    g = Graph(params, kg)
    y, c, a, rels = g.branch(g.as_var(x0), g.as_var(h_q))
    return y.value, AttentionScores(c.value, a.value), [r.value for r in rels]


def forward_baseline(params, kg, sample, eps: float = 1e-6) -> np.ndarray:
    return Graph(params, kg).run(sample, "baseline", eps)[0].value


def forward_intersect(params, kg, sample, eps: float = 1e-6) -> np.ndarray:
    return Graph(params, kg).run(sample, "intersect", eps)[0].value


def predict(params, kg, sample, variant: str, eps: float = 1e-6, workers: int = 1) -> Prediction:
    y, traces = Graph(params, kg, workers=workers).run(sample, variant, eps)
    return Prediction(y.value, traces)


def answer_labels(kg: KnowledgeGraph, answers) -> np.ndarray:
    y = np.zeros(kg.store.n_entities)
    for a in answers:
        y[kg.store.entity_index(a)] = 1.0
    return y


def loss_and_grad(
    params: ModelParams, kg: KnowledgeGraph, sample, variant: str, eps: float = 1e-6, workers: int = 1
) -> tuple[float, dict[str, np.ndarray]]:
    g = Graph(params, kg, workers=workers)
    yhat, _ = g.run(sample, variant, eps)
    loss = g.tape.multilabel_loss(answer_labels(kg, sample.answers), yhat)
    return float(loss.value), backward(g.tape, loss)


# -- optimizer ------------------------------------------------------------------


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: ModelParams,
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float = 1e-4,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[ModelParams, AdamState]:
    """Bias-corrected Adam update. Returns new params and state; inputs are left untouched."""
    if state.step < 0:
        raise ModelError("negative optimizer step counter")
    named = params.named()
    for name, p in named:
        g = grads[name]
        if g.shape != p.shape:
            raise ModelError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        if not np.all(np.isfinite(g)):
            raise ModelError(f"non-finite gradient for parameter {name}")
    t = state.step + 1
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    new_arrays, new_m, new_v = {}, {}, {}
    for name, p in named:
        g = grads[name]
        m = beta1 * state.m.get(name, np.zeros_like(p)) + (1.0 - beta1) * g
        v = beta2 * state.v.get(name, np.zeros_like(p)) + (1.0 - beta2) * (g * g)
        new_arrays[name] = p - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        new_m[name], new_v[name] = m, v
    return params.with_arrays(new_arrays), AdamState(t, new_m, new_v)


# -- checkpoints -----------------------------------------------------------------


def save_checkpoint(params: ModelParams, f: BinaryIO, config: dict | None = None) -> None:
    header = {
        "config": config or {},
        "dim": params.dim,
        "n_hops": params.n_hops,
        "n_relations": params.n_relations,
        "vocab": list(params.vocab.tokens),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    f.write(CHECKPOINT_MAGIC)
    f.write(struct.pack("<Q", len(blob)))
    f.write(blob)
    for _, arr in params.named():
        f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(f: BinaryIO) -> tuple[ModelParams, dict]:
    magic = f.read(4)
    if magic != CHECKPOINT_MAGIC:
        raise ModelError(f"not a model checkpoint (magic {magic!r})")
    (n,) = struct.unpack("<Q", f.read(8))
    header = json.loads(f.read(n).decode("utf-8"))
    vocab = Vocab(tuple(header["vocab"]))
    shapes = param_shapes(len(vocab), header["dim"], header["n_relations"], header["n_hops"])
    arrays = {}
    for name, shape in shapes.items():
        size = int(np.prod(shape))
        buf = f.read(8 * size)
        if len(buf) != 8 * size:
            raise ModelError("truncated checkpoint")
        arrays[name] = np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(shape)
    return _from_arrays(vocab, arrays, header["n_hops"]), header["config"]


def check_compatible(params: ModelParams, kg: KnowledgeGraph) -> None:
    if params.n_relations != kg.store.n_relations:
        raise ModelError(
            f"checkpoint decodes {params.n_relations} relations but the KG has {kg.store.n_relations}"
        )
