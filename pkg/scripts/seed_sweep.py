"""Train the intersect variant over several seeds and report test Hits@1 and loss monotonicity.

Runs in-process without writing checkpoints.

    python3 scripts/seed_sweep.py --seeds 0 1 2 3
"""

import argparse
import time
from pathlib import Path

import numpy as np

from dkgqa import data, kgstore, model
from dkgqa.config import load_config
from dkgqa.training import TrainConfig, train, window_means

ROOT = Path(__file__).resolve().parents[1]


def one_seed(seed: int, variant: str, cfg):
    syn = data.generate_synthetic(data.GeneratorConfig(), seed)
    kg = kgstore.KnowledgeGraph.build(syn.store, cfg.shards)
    vocab = model.Vocab.build(s.question_tokens for s in syn.train)
    params = model.init_params(seed, vocab, cfg.dim, syn.store.n_relations, cfg.max_hops)
    tcfg = TrainConfig(
        variant=variant, steps=cfg.steps, batch_size=cfg.batch_size, grad_accum=cfg.grad_accum,
        lr=cfg.lr, eps=cfg.eps, seed=seed, eval_every=cfg.eval_every,
    )
    t0 = time.perf_counter()
    res = train(params, kg, syn.train, syn.dev, tcfg)
    secs = time.perf_counter() - t0
    rep = data.evaluate(variant, res.params, kg, syn.test, cfg.eps)
    means = window_means(res.losses, 100)
    monotone = all(b < a for a, b in zip(means, means[1:]))
    return rep.hits_at_1, rep.buckets, monotone, secs


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3])
    ap.add_argument("--variant", default="intersect", choices=model.VARIANTS)
    ap.add_argument("--config", default=str(ROOT / "configs" / "synthetic.cfg"))
    args = ap.parse_args()
    cfg = load_config(args.config)

    hits = []
    for seed in args.seeds:
        h, buckets, mono, secs = one_seed(seed, args.variant, cfg)
        hits.append(h)
        print(f"seed={seed} hits1={h:.3f} one={buckets['1']:.3f} multi={buckets['>1']:.3f} monotone={mono} secs={secs:.1f}")
    print(f"mean={np.mean(hits):.3f} min={np.min(hits):.3f}")


if __name__ == "__main__":
    main()
