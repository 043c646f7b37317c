"""Self-check suite: gradients, closed forms, reductions, thresholds.

Each check compares the library against an independent oracle (central
finite differences, hand-derived constants, or exhaustive search with exact
rational arithmetic) and returns a :class:`PropertyResult`.  ``run_all``
is what ``framecl verify`` executes.

Mutation test: replacing the backward rule of ``exp`` in
``dcore.PRIMITIVES`` with a sign-flipped copy makes the gradient checks of
every contrastive loss fail, which shows the suite can see a sign error in
the weighted multi-label loss.  ``tests/test_verify.py`` does exactly that.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable

import numpy as np

from . import dcore
from .losses import (
    ALL_OTHERS,
    NEGATIVES_ONLY,
    ContrastiveConfig,
    bce_with_logits,
    delta,
    multilabel_supcon,
    nt_xent,
    supcon,
)
from .model import ModelConfig, forward_batch, init_params
from .thresholds import grid_size, tune_threshold, zero_shot_threshold
from .train import batch_objective, label_matrix, loss_and_grads

GRAD_TOL = 1e-4
EXACT_TOL = 1e-9
REDUCTION_TOL = 1e-10
SEEDS = tuple(range(10))
TEMPERATURES = (0.05, 0.1, 1.0)


@dataclass(frozen=True)
class PropertyResult:
    name: str
    passed: bool
    detail: str


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max-norm error relative to the larger of the two gradients' max norms."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(n), initial=0.0), 1e-8)
    return float(np.max(np.abs(a - n), initial=0.0) / scale)


def _grad_error(loss_of: Callable[[dcore.DArray], dcore.DArray], x: np.ndarray) -> float:
    graph = dcore.Graph()
    xp = graph.param(x)
    analytic = dcore.backward(graph, loss_of(xp))[xp.node_id]
    numeric = dcore.finite_difference_gradient(lambda p: loss_of(p["x"]).item(), {"x": x})["x"]
    return relative_error(analytic, numeric)


def _random_sets(rng: np.random.Generator, m: int, universe: int) -> list[frozenset]:
    """``m`` non-empty label sets with at least one repeat and one negative pair."""
    while True:
        pool = []
        while len(pool) < max(2, m // 2):
            s = frozenset(int(j) for j in np.flatnonzero(rng.random(universe) < 0.5))
            if s:
                pool.append(s)
        out = [pool[int(rng.integers(len(pool)))] for _ in range(m)]
        if len(set(out)) > 1 and len(set(out)) < m:
            return out


def _random_classes(rng: np.random.Generator, m: int, k: int = 3) -> list[int]:
    while True:
        out = [int(x) for x in rng.integers(0, k, size=m)]
        if len(set(out)) > 1 and len(set(out)) < m:
            return out


def _loss_cases():
    cases = [("nt_xent", lambda rng, m: (lambda z: nt_xent(z, ContrastiveConfig())))]
    for conv in (NEGATIVES_ONLY, ALL_OTHERS):
        def sc(rng, m, conv=conv):
            labels = _random_classes(rng, m)
            return lambda z: supcon(z, labels, ContrastiveConfig(denominator_convention=conv))

        cases.append((f"supcon[{conv}]", sc))
        for wfn in ("identity", "constant"):
            def ml(rng, m, conv=conv, wfn=wfn):
                labels = _random_sets(rng, m, 4)
                cfg = ContrastiveConfig(weight_fn=wfn, denominator_convention=conv)
                return lambda z: multilabel_supcon(z, labels, cfg)

            cases.append((f"multilabel_supcon[{conv},{wfn}]", ml))
    return cases


def check_loss_gradients(seeds=SEEDS) -> list[PropertyResult]:
    out = []
    for name, make in _loss_cases():
        worst = 0.0
        for seed in seeds:
            rng = np.random.default_rng(seed)
            m = 2 * int(rng.integers(2, 5))
            d = int(rng.integers(2, 17))
            z = rng.normal(size=(m, d))
            worst = max(worst, _grad_error(make(rng, m), z))
        out.append(PropertyResult(f"gradient {name}", worst < GRAD_TOL, f"max rel err {worst:.2e}"))
    worst = 0.0
    for seed in seeds:
        rng = np.random.default_rng(seed)
        n, L = int(rng.integers(1, 9)), int(rng.integers(1, 5))
        targets = (rng.random((n, L)) < 0.5).astype(np.float64)
        worst = max(worst, _grad_error(lambda x: bce_with_logits(x, targets), rng.normal(scale=3.0, size=(n, L))))
    out.append(PropertyResult("gradient bce_with_logits", worst < GRAD_TOL, f"max rel err {worst:.2e}"))
    out.append(check_model_gradient(seeds))
    return out


def check_model_gradient(seeds=SEEDS) -> PropertyResult:
    """Combined objective through both encoder inputs, views and heads."""
    worst = 0.0
    for seed in seeds:
        rng = np.random.default_rng(seed)
        b = int(rng.integers(2, 5))
        cfg = ModelConfig(d_in=int(rng.integers(4, 17)), d_h=3, d_p=3, num_labels=3, init_seed=seed)
        params = init_params(cfg)
        # move off the zero-bias initialisation so every term is exercised
        for k in params:
            params[k] = params[k] + rng.normal(scale=0.1, size=params[k].shape)
        feats = tuple(rng.random((b, cfg.d_in)) for _ in range(3))
        labels = _random_sets(rng, b, cfg.num_labels)
        masks = (rng.random((b, 2 * cfg.d_h)) >= cfg.view_dropout).astype(np.float64)
        con = ContrastiveConfig(denominator_convention=(NEGATIVES_ONLY, ALL_OTHERS)[seed % 2])
        alpha = float(rng.uniform(0.2, 0.8))
        _, analytic = loss_and_grads(feats, labels, params, cfg, con, alpha, masks)
        targets = label_matrix(labels, cfg.num_labels)

        def f(p):
            out = forward_batch(feats, type(params)(p), cfg, mode="train", labelsets=labels, masks=masks)
            return batch_objective(out, targets, con, alpha).combined.item()

        numeric = dcore.finite_difference_gradient(f, params)
        for k in params:
            worst = max(worst, relative_error(analytic[k], numeric[k]))
    return PropertyResult("gradient combined objective through model", worst < GRAD_TOL,
                          f"max rel err {worst:.2e}")


def check_closed_forms() -> list[PropertyResult]:
    cases = [
        ("nt_xent, 4 identical rows = log 3", lambda cfg: nt_xent(np.ones((4, 3)), cfg), {}, math.log(3)),
        ("supcon negatives_only = log 2", lambda cfg: supcon(np.ones((4, 3)), [0, 0, 1, 1], cfg), {}, math.log(2)),
        ("supcon all_others = log 3", lambda cfg: supcon(np.ones((4, 3)), [0, 0, 1, 1], cfg),
         {"denominator_convention": ALL_OTHERS}, math.log(3)),
        ("multilabel identity {1},{1},{2,3},{2,3} = log 6",
         lambda cfg: multilabel_supcon(np.ones((4, 3)), [{1}, {1}, {2, 3}, {2, 3}], cfg), {}, math.log(6)),
    ]
    out = []
    for name, fn, kw, expected in cases:
        errs = [abs(fn(ContrastiveConfig(temperature=t, **kw)).item() - expected) for t in TEMPERATURES]
        out.append(PropertyResult(f"closed form {name}", max(errs) < EXACT_TOL, f"max abs err {max(errs):.1e}"))
    return out


def check_reductions(seeds=SEEDS) -> list[PropertyResult]:
    worst_a = worst_b = 0.0
    for seed in seeds:
        rng = np.random.default_rng(seed)
        m = 2 * int(rng.integers(2, 5))
        z = rng.normal(size=(m, int(rng.integers(2, 17))))
        single = _random_classes(rng, m)
        for conv in (NEGATIVES_ONLY, ALL_OTHERS):
            a = multilabel_supcon(z, [{y} for y in single], ContrastiveConfig(weight_fn="constant",
                                                                            denominator_convention=conv)).item()
            b = supcon(z, single, ContrastiveConfig(denominator_convention=conv)).item()
            worst_a = max(worst_a, abs(a - b))
        pairs = [k // 2 for k in range(m)]
        a = supcon(z, pairs, ContrastiveConfig(denominator_convention=ALL_OTHERS)).item()
        b = nt_xent(z, ContrastiveConfig()).item()
        worst_b = max(worst_b, abs(a - b))
    return [
        PropertyResult("reduction multilabel(W=1, singletons) == supcon", worst_a < REDUCTION_TOL,
                       f"max abs diff {worst_a:.1e}"),
        PropertyResult("reduction supcon(view-pair labels, all_others) == nt_xent", worst_b < REDUCTION_TOL,
                       f"max abs diff {worst_b:.1e}"),
    ]


def check_weight_monotonicity(batches: int = 100, seed: int = 0) -> PropertyResult:
    rng = np.random.default_rng(seed)
    done = failures = 0
    while done < batches:
        m = int(rng.integers(4, 9))
        labels = _random_sets(rng, m, 4)
        dists = [delta(labels[i], labels[j]) for i in range(m) for j in range(m) if labels[i] != labels[j]]
        if not dists or max(dists) < 2 or all(labels.count(s) < 2 for s in labels):
            continue
        z = rng.normal(size=(m, int(rng.integers(2, 9))))
        ident = multilabel_supcon(z, labels, ContrastiveConfig(weight_fn="identity")).item()
        const = multilabel_supcon(z, labels, ContrastiveConfig(weight_fn="constant")).item()
        failures += not ident > const
        done += 1
    return PropertyResult("weight monotonicity identity > constant", failures == 0,
                          f"{batches - failures}/{batches} batches strict")


def _exhaustive_best(probs: np.ndarray, gold: list, k: int) -> tuple[int, Fraction]:
    """Smallest interior grid index with the best micro-F1, by direct enumeration."""
    best_idx, best = -1, Fraction(-1)
    for idx in range(1, k):
        theta = idx / k
        tp = fp = fn = 0
        for row, g in zip(probs, gold):
            for j, p in enumerate(row):
                hit = p >= theta
                tp += hit and j in g
                fp += hit and j not in g
                fn += (not hit) and j in g
        den = 2 * tp + fp + fn
        f1 = Fraction(1) if den == 0 else Fraction(2 * tp, den)
        if f1 > best:
            best_idx, best = idx, f1
    return best_idx, best


def check_threshold_oracle(instances: int = 500, seed: int = 0, step: float = 0.01) -> list[PropertyResult]:
    k = grid_size(step)
    rng = np.random.default_rng(seed)
    bad = []
    for t in range(instances):
        m, L = int(rng.integers(1, 9)), int(rng.integers(1, 4))
        probs = rng.random((m, L))
        if t % 2:
            # grid-aligned probabilities put ties on the comparator boundary
            probs = rng.integers(0, k + 1, size=(m, L)) / k
        gold = [frozenset(int(j) for j in np.flatnonzero(rng.random(L) < 0.5)) for _ in range(m)]
        want, _ = _exhaustive_best(probs, gold, k)
        got = tune_threshold(probs, gold, step)
        if got != want / k:
            bad.append(t)
    worked = tune_threshold(np.array([[0.9, 0.1], [0.4, 0.8]]), [{0}, {1}], step)
    return [
        PropertyResult("threshold tuner matches exhaustive grid oracle", not bad,
                       f"{instances - len(bad)}/{instances} instances" + (f", first failure #{bad[0]}" if bad else "")),
        PropertyResult("threshold worked example = 0.41", worked == 0.41, f"got {worked}"),
    ]


def check_zero_shot(tables: int = 500, seed: int = 0, step: float = 0.01) -> PropertyResult:
    k = grid_size(step)
    rng = np.random.default_rng(seed)
    bad = 0
    for _ in range(tables):
        idx = [int(i) for i in rng.integers(1, k, size=int(rng.integers(1, 9)))]
        mean = Fraction(sum(idx), len(idx))
        floor = mean.numerator // mean.denominator
        want = floor + 1 if mean - floor > Fraction(1, 2) else floor
        got = zero_shot_threshold({f"l{i}": v / k for i, v in enumerate(idx)}, step)
        bad += got != want / k
    return PropertyResult("zero-shot threshold = grid-rounded mean", bad == 0, f"{tables - bad}/{tables} tables")


CHECKS: tuple[tuple[str, Callable[[], list[PropertyResult] | PropertyResult]], ...] = (
    ("gradients", check_loss_gradients),
    ("closed forms", check_closed_forms),
    ("reductions", check_reductions),
    ("monotonicity", check_weight_monotonicity),
    ("thresholds", check_threshold_oracle),
    ("zero-shot", check_zero_shot),
)


def run_all() -> list[PropertyResult]:
    results: list[PropertyResult] = []
    for _, check in CHECKS:
        res = check()
        results.extend(res if isinstance(res, list) else [res])
    return results


def format_table(results: list[PropertyResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = []
    for r in results:
        lines.append(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<{width}}  {r.detail}")
    passed = sum(r.passed for r in results)
    lines.append(f"{passed}/{len(results)} properties passed")
    return "\n".join(lines)
