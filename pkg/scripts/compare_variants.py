"""Train both model variants on the synthetic dataset and print a per-question-type breakdown.

    python3 scripts/compare_variants.py --out runs/compare --seed 0
"""

import argparse
import json
from pathlib import Path

from dkgqa import cli, data, kgstore

ROOT = Path(__file__).resolve().parents[1]


def run(*argv):
    code = cli.main([str(a) for a in argv])
    if code != 0:
        raise SystemExit(code)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/compare")
    ap.add_argument("--config", default=str(ROOT / "configs" / "synthetic.cfg"))
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--steps", type=int)
    args = ap.parse_args()

    out = Path(args.out)
    kg, ds = out / "syn.dkg", out / "data"
    run("gen-data", "--kg", kg, "--dataset", ds, "--seed", args.seed)
    extra = ["--seed", args.seed] + (["--steps", args.steps] if args.steps is not None else [])

    reports = {}
    for variant in ("baseline", "intersect"):
        d = out / variant
        common = ["--config", args.config, "--kg", kg, "--dataset", ds, "--variant", variant, "--checkpoint", d / "model.dkm"]
        run("train", *common, "--metrics-log", d / "metrics.log", *extra)
        run("eval", *common, "--report", d / "report.json")
        reports[variant] = json.loads((d / "report.json").read_text(encoding="utf-8"))

    store = kgstore.read_store(kg)
    test = data.load_dataset(ds / "test.jsonl", store)
    oracle = data.Oracle(store)
    groups = {
        "all": range(len(test)),
        "one-entity": [i for i, s in enumerate(test) if s.n_entities == 1],
        "two-entity": [i for i, s in enumerate(test) if s.n_entities >= 2],
        "intersection-required": [i for i, s in enumerate(test) if data.intersection_required(oracle, s)],
    }
    print(f"\n{'subset':<24}{'n':>5}{'baseline':>10}{'intersect':>11}")
    for name, idx in groups.items():
        idx = list(idx)
        row = [sum(reports[v]["records"][i]["correct"] for i in idx) / len(idx) for v in ("baseline", "intersect")]
        print(f"{name:<24}{len(idx):>5}{row[0]:>10.3f}{row[1]:>11.3f}")


if __name__ == "__main__":
    main()
