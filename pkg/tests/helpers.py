"""Independent oracles shared by the test modules."""

import numpy as np

from dkgqa import data, kgstore

TOY_TSV = (
    "NataliePortman\tplayed\tPadme\n"
    "NataliePortman\tplayed\tNinaSayers\n"
    "StarWarsII\tcharacter\tPadme\n"
    "StarWarsII\tcharacter\tAnakin\n"
    "HaydenChristensen\tplayed\tAnakin\n"
)

# toy KG plus a birthplace fact, for single-entity questions
TOY_PLUS_TSV = TOY_TSV + "NataliePortman\tborn_in\tJerusalem\nHaydenChristensen\tborn_in\tVancouver\n"


def toy_store(inverse=False, extra=False):
    store = kgstore.ingest_triples((TOY_PLUS_TSV if extra else TOY_TSV).splitlines())
    return kgstore.add_inverse_relations(store) if inverse else store


def random_store(rng, max_e=50, max_r=10, max_t=200, min_t=0, min_r=1):
    n_e = int(rng.integers(1, max_e + 1))
    n_r = int(rng.integers(min_r, max_r + 1))
    n_t = int(rng.integers(min_t, max_t + 1))
    rows = {
        (int(rng.integers(n_e)), int(rng.integers(n_r)), int(rng.integers(n_e))) for _ in range(n_t)
    }
    rows = sorted(rows)
    named = [(f"e{s}", f"r{p}", f"e{o}") for s, p, o in rows]
    return kgstore.from_named_triples(named)


def dense_indicators(store):
    """Indicator matrices built entry by entry from the triple list."""
    n_t = store.n_triples
    ms = np.zeros((n_t, store.n_entities))
    mp = np.zeros((n_t, store.n_relations))
    mo = np.zeros((n_t, store.n_entities))
    for i, (s, p, o) in enumerate(store.triples.tolist()):
        ms[i, s] = 1.0
        mp[i, p] = 1.0
        mo[i, o] = 1.0
    return ms, mp, mo


def bfs_subgraph(store, seeds, hops):
    """Triple keys kept by frontier expansion, with inverse twins, by plain set logic."""
    named = store.named_triples()
    frontier = set(seeds)
    kept = set()
    for _ in range(hops):
        new = {t for t in named if t[0] in frontier}
        kept |= new
        frontier |= {o for _, _, o in new}
    pref = kgstore.INVERSE_PREFIX
    twins = set()
    for s, p, o in kept:
        twin = (o, p[len(pref):], s) if p.startswith(pref) else (o, pref + p, s)
        if twin in set(named):
            twins.add(twin)
    return kept | twins


def central_diff(f, x, h=1e-5):
    g = np.zeros_like(x)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp.flat[i] += h
        xm.flat[i] -= h
        g.flat[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-300)
    return np.where((a == 0) & (b == 0), 0.0, np.abs(a - b) / denom)


def portman_sample():
    return data.make_sample(
        "who did natalie portman play in star wars episode ii",
        [("NataliePortman", "natalie portman"), ("StarWarsII", "star wars episode ii")],
        ["Padme"],
        hops=1,
        chains=[["played"], ["character"]],
    )


def toy_training_samples():
    """Small QA set over the toy KG (with inverses and birthplaces)."""
    S = data.make_sample
    NP, SW, HC = (
        ("NataliePortman", "natalie portman"),
        ("StarWarsII", "star wars episode ii"),
        ("HaydenChristensen", "hayden christensen"),
    )
    return [
        portman_sample(),
        S("who did hayden christensen play in star wars episode ii", [HC, SW], ["Anakin"], 1,
          [["played"], ["character"]]),
        S("who did natalie portman play", [NP], ["Padme", "NinaSayers"], 1, [["played"]]),
        S("who did hayden christensen play", [HC], ["Anakin"], 1, [["played"]]),
        S("which characters appear in star wars episode ii", [SW], ["Padme", "Anakin"], 1,
          [["character"]]),
        S("where was natalie portman born", [NP], ["Jerusalem"], 1, [["born_in"]]),
        S("where was hayden christensen born", [HC], ["Vancouver"], 1, [["born_in"]]),
    ]


def toy_kg():
    from dkgqa.kgstore import KnowledgeGraph

    return KnowledgeGraph.build(toy_store(inverse=True, extra=True))


def toy_vocab():
    from dkgqa.model import Vocab

    return Vocab.build(s.question_tokens for s in toy_training_samples())


def train_toy(variant, steps=300, seed=0, lr=0.05, dim=16):
    from dkgqa import model, training

    kg = toy_kg()
    samples = toy_training_samples()
    params = model.init_params(seed, toy_vocab(), dim, kg.store.n_relations, 2)
    cfg = training.TrainConfig(
        variant=variant, steps=steps, batch_size=len(samples), grad_accum=1, lr=lr, seed=seed,
        eval_every=max(steps, 1),
    )
    return training.train(params, kg, samples, [], cfg), kg


def kink_signature(params, kg, sample, variant, eps=1e-6):
    """Which side of every min/clamp kink each output coordinate sits on."""
    from dkgqa import model

    pred = model.predict(params, kg, sample, variant, eps)
    ests = [b.estimate for b in pred.branches]
    y = ests[0] if len(ests) == 1 else np.minimum(ests[0], ests[1])
    sig = [y <= eps, y >= 1 - eps]
    if len(ests) == 2:
        sig += [ests[0] < ests[1], ests[0] == ests[1]]
    return np.concatenate(sig)


def end_to_end_gradient_check(params, kg, sample, variant, n=20, seed=0, h=1e-5, eps=1e-6, floor=1e-6):
    """Compare analytic and central-difference gradients on ``n`` random parameter coordinates.

    Coordinates whose +/-h perturbation moves any output across a min or clamp
    kink are skipped. Returns a list of ``(name, flat index, analytic, numeric, rel_err)``.
    """
    from dkgqa import model

    _, grads = model.loss_and_grad(params, kg, sample, variant, eps)
    base_sig = kink_signature(params, kg, sample, variant, eps)
    named = dict(params.named())
    candidates = [
        (name, i) for name, g in grads.items() for i in np.flatnonzero(np.abs(g) > floor)
    ]
    order = np.random.default_rng(seed).permutation(len(candidates))
    results = []
    for k in order:
        name, i = candidates[k]
        vals = []
        smooth = True
        for sign in (1, -1):
            arrays = {nm: a.copy() for nm, a in named.items()}
            arrays[name].flat[i] += sign * h
            p = params.with_arrays(arrays)
            if not np.array_equal(kink_signature(p, kg, sample, variant, eps), base_sig):
                smooth = False
                break
            vals.append(model.loss_and_grad(p, kg, sample, variant, eps)[0])
        if not smooth:
            continue
        num = (vals[0] - vals[1]) / (2 * h)
        ana = grads[name].flat[i]
        results.append((name, int(i), float(ana), float(num), float(rel_err(ana, num))))
        if len(results) == n:
            break
    return results
