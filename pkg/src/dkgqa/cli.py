"""Command-line entry point: build-kg, gen-data, train, eval, explain."""

import argparse
import sys
from pathlib import Path

from . import data, kgstore, model
from .config import ConfigError, RunConfig, field_types, load_config
from .training import TrainConfig, parse_log_line, train

SPLITS = ("train", "dev", "test")
PATH_FIELDS = ("kg", "dataset", "checkpoint", "report", "metrics_log")


class CLIError(Exception):
    pass


def _require(cfg: RunConfig, *names):
    for n in names:
        if getattr(cfg, n) is None:
            raise CLIError(f"missing --{n.replace('_', '-')}")


def _read_kg(path) -> kgstore.TripleStore:
    try:
        return kgstore.read_store(path)
    except OSError as e:
        raise CLIError(f"cannot read KG {path}: {e.strerror}") from None


def _split_path(cfg: RunConfig, split: str) -> Path:
    p = Path(cfg.dataset) / f"{split}.jsonl"
    if not p.exists():
        raise CLIError(f"dataset split not found: {p}")
    return p


def _load_checkpoint(path):
    try:
        with open(path, "rb") as f:
            return model.load_checkpoint(f)
    except OSError as e:
        raise CLIError(f"cannot read checkpoint {path}: {e.strerror}") from None


def _write_checkpoint(params, path, cfg: RunConfig):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        # paths are left out so identical runs give identical bytes
        model.save_checkpoint(params, f, {k: v for k, v in cfg.as_dict().items() if k not in PATH_FIELDS})


# -- commands ----------------------------------------------------------------------


def cmd_build_kg(args) -> int:
    try:
        with open(args.triples, encoding="utf-8") as f:
            store = kgstore.ingest_triples(f)
    except OSError as e:
        raise CLIError(f"cannot read triples {args.triples}: {e.strerror}") from None
    if not args.no_inverse:
        store = kgstore.add_inverse_relations(store)
    if args.seeds:
        with open(args.seeds, encoding="utf-8") as f:
            seeds = [ln.strip() for ln in f if ln.strip() and not ln.startswith("#")]
        store = kgstore.extract_subgraph(store, seeds, args.hops)
    kgstore.write_store(store, args.kg)
    if args.tsv:
        with open(args.tsv, "w", encoding="utf-8") as f:
            kgstore.write_tsv(store, f)
    print(f"entities={store.n_entities} relations={store.n_relations} triples={store.n_triples}")
    return 0


def cmd_gen_data(args) -> int:
    gcfg = data.GeneratorConfig(
        n_actors=args.n_actors,
        n_films=args.n_films,
        n_characters=args.n_characters,
        n_train=args.n_train,
        n_dev=args.n_dev,
        n_test=args.n_test,
        two_entity_fraction=args.two_entity_fraction,
        intersect_share=args.intersect_share,
    )
    syn = data.generate_synthetic(gcfg, args.seed)
    out = Path(args.dataset)
    out.mkdir(parents=True, exist_ok=True)
    kgstore.write_store(syn.store, args.kg)
    for split in SPLITS:
        data.save_dataset(getattr(syn, split), out / f"{split}.jsonl")
    print(
        f"entities={syn.store.n_entities} relations={syn.store.n_relations} "
        f"triples={syn.store.n_triples} train={len(syn.train)} dev={len(syn.dev)} test={len(syn.test)}"
    )
    return 0


def summarize_log(lines) -> str:
    """One-line summary recomputed from metrics lines."""
    rows = [parse_log_line(ln) for ln in lines]
    best = max(rows, key=lambda r: (r[2], r[0]))
    last = rows[-1]
    return (
        f"steps={last[0]} final_loss={last[1]:.6f} best_step={best[0]} "
        f"best_dev_hits1={best[2]:.4f}"
    )


def cmd_train(cfg: RunConfig) -> int:
    _require(cfg, "kg", "dataset", "checkpoint")
    store = _read_kg(cfg.kg)
    train_set = data.load_dataset(_split_path(cfg, "train"), store)
    dev_set = data.load_dataset(_split_path(cfg, "dev"), store)
    kg = kgstore.KnowledgeGraph.build(store, cfg.shards)
    vocab = model.Vocab.build(s.question_tokens for s in train_set)
    params = model.init_params(cfg.seed, vocab, cfg.dim, store.n_relations, cfg.max_hops)
    tcfg = TrainConfig(
        variant=cfg.variant,
        steps=cfg.steps,
        batch_size=cfg.batch_size,
        grad_accum=cfg.grad_accum,
        lr=cfg.lr,
        beta1=cfg.beta1,
        beta2=cfg.beta2,
        adam_eps=cfg.adam_eps,
        eps=cfg.eps,
        seed=cfg.seed,
        eval_every=cfg.eval_every,
        workers=cfg.workers,
    )
    log_file = None
    if cfg.metrics_log:
        Path(cfg.metrics_log).parent.mkdir(parents=True, exist_ok=True)
        log_file = open(cfg.metrics_log, "a", encoding="utf-8")

    def log(line):
        print(line, flush=True)
        if log_file is not None:
            log_file.write(line + "\n")
            log_file.flush()

    try:
        result = train(params, kg, train_set, dev_set, tcfg, log)
    finally:
        if log_file is not None:
            log_file.close()
    _write_checkpoint(result.params, cfg.checkpoint, cfg)
    print(summarize_log(result.log_lines))
    return 0


def _eval_setup(cfg: RunConfig):
    _require(cfg, "kg", "dataset", "checkpoint")
    store = _read_kg(cfg.kg)
    params, _ = _load_checkpoint(cfg.checkpoint)
    kg = kgstore.KnowledgeGraph.build(store, cfg.shards)
    model.check_compatible(params, kg)
    samples = data.load_dataset(_split_path(cfg, cfg.split), store)
    return params, kg, samples


def cmd_eval(cfg: RunConfig) -> int:
    params, kg, samples = _eval_setup(cfg)
    report = data.evaluate(cfg.variant, params, kg, samples, cfg.eps, cfg.workers)
    text = report.dumps()
    if cfg.report:
        Path(cfg.report).parent.mkdir(parents=True, exist_ok=True)
        with open(cfg.report, "w", encoding="utf-8") as f:
            f.write(text)
    print(
        f"hits1={report.hits_at_1:.4f} hits1_1entity={report.buckets['1']:.4f} "
        f"hits1_multi={report.buckets['>1']:.4f} n={len(report.records)}"
    )
    return 0


def explain_lines(cfg: RunConfig, params, kg, sample) -> list[str]:
    pred = model.predict(params, kg, sample, cfg.variant, cfg.eps)
    answer = kg.store.entities[data.masked_argmax(kg, sample, pred.yhat)]
    chains = data.top_chains(pred, kg.store.relations)
    lines = [f"Q: {sample.question}"]
    lines += [c.format() for c in chains]
    mark = "correct" if answer in sample.answers else "wrong"
    if len(chains) > 1:
        lines.append(f"Intersection → {answer} ({mark})")
    else:
        lines.append(f"→ {answer} ({mark})")
    lines.append("A: " + ", ".join(sample.answers))
    return lines


def cmd_explain(cfg: RunConfig, index: int) -> int:
    params, kg, samples = _eval_setup(cfg)
    if not 0 <= index < len(samples):
        raise CLIError(f"sample index {index} out of range [0, {len(samples)})")
    for line in explain_lines(cfg, params, kg, samples[index]):
        print(line)
    return 0


# -- argument parsing ------------------------------------------------------------------


def _add_run_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="key=value config file; flags override it")
    for name, typ in field_types().items():
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=typ, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dkgqa", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    b = sub.add_parser("build-kg", help="ingest a triple TSV into a serialized KG")
    b.add_argument("--triples", required=True, help="input TSV: subject<TAB>relation<TAB>object")
    b.add_argument("--kg", required=True, help="output serialized KG")
    b.add_argument("--no-inverse", action="store_true", help="skip inverse-relation augmentation")
    b.add_argument("--seeds", help="file of seed entity ids, one per line")
    b.add_argument("--hops", type=int, default=2)
    b.add_argument("--tsv", help="also write the resulting triples as TSV")

    g = sub.add_parser("gen-data", help="generate a synthetic KG and QA splits")
    g.add_argument("--kg", required=True)
    g.add_argument("--dataset", required=True, help="output directory for train/dev/test.jsonl")
    g.add_argument("--seed", type=int, default=0)
    defaults = data.GeneratorConfig()
    for name in ("n_actors", "n_films", "n_characters", "n_train", "n_dev", "n_test"):
        g.add_argument("--" + name.replace("_", "-"), type=int, default=getattr(defaults, name))
    g.add_argument("--two-entity-fraction", type=float, default=defaults.two_entity_fraction)
    g.add_argument("--intersect-share", type=float, default=defaults.intersect_share)

    for name, help_ in (
        ("train", "train a model and write the best-dev checkpoint"),
        ("eval", "write a Hits@1 report for one split"),
        ("explain", "print the top inference chains for one question"),
    ):
        p = sub.add_parser(name, help=help_)
        _add_run_flags(p)
        if name == "explain":
            p.add_argument("--index", type=int, required=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "build-kg":
            return cmd_build_kg(args)
        if args.command == "gen-data":
            return cmd_gen_data(args)
        overrides = {k: getattr(args, k) for k in field_types()}
        cfg = load_config(args.config, overrides)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg)
        return cmd_explain(cfg, args.index)
    except (CLIError, ConfigError, ValueError, RuntimeError, OSError) as e:
        msg = str(e).splitlines()[0] if str(e) else type(e).__name__
        print(f"dkgqa {args.command}: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
