"""Finite-difference verification of every differentiable operation.

Each check builds a float64 graph, runs backward, and compares analytic
gradients against central differences (step 1e-5). The suite is the same
one the `keds gradcheck` command runs; it must finish well under a minute.
"""

from __future__ import annotations

import time

import numpy as np

from . import bkp, numeric as nm
from .encoders import build_composer, make_prompt, compose_batch
from .layers import multi_head_attention
from .trainer import contrastive_loss, registration_loss

REL_TOL = 1e-4


def _check_core_ops(rng: np.random.Generator) -> float:
    worst = 0.0
    a = nm.parameter(rng.standard_normal((4, 5)), np.float64)
    b = nm.parameter(rng.standard_normal((5, 3)), np.float64)
    worst = max(worst, nm.finite_difference_check(lambda: nm.sum_all(nm.matmul(a, b)), [a, b], rng=rng))

    x = nm.parameter(rng.standard_normal((3, 6)), np.float64)
    w = nm.constant(rng.standard_normal((3, 6)), np.float64)
    worst = max(worst, nm.finite_difference_check(
        lambda: nm.sum_all(nm.mul(nm.softmax_rows(x), w)), [x], rng=rng))

    y = nm.parameter(rng.standard_normal((4, 7)) + 0.3, np.float64)
    wy = nm.constant(rng.standard_normal((4, 7)), np.float64)
    worst = max(worst, nm.finite_difference_check(
        lambda: nm.sum_all(nm.mul(nm.l2_normalize(y), wy)), [y], rng=rng))

    z = nm.parameter(rng.standard_normal((3, 5)), np.float64)
    zg = nm.parameter(1.0 + 0.1 * rng.standard_normal(5), np.float64)
    zb = nm.parameter(0.1 * rng.standard_normal(5), np.float64)
    wz = nm.constant(rng.standard_normal((3, 5)), np.float64)
    worst = max(worst, nm.finite_difference_check(
        lambda: nm.sum_all(nm.mul(nm.layer_norm(z, zg, zb), wz)), [z, zg, zb], rng=rng))

    g = nm.parameter(rng.standard_normal((4, 4)), np.float64)
    worst = max(worst, nm.finite_difference_check(lambda: nm.sum_all(nm.gelu(g)), [g], rng=rng))
    return worst


def _check_attention_layer(rng: np.random.Generator) -> float:
    d, heads = 8, 2
    def p(shape):
        return nm.parameter(rng.standard_normal(shape) / np.sqrt(shape[0]), np.float64)
    weights = {name: p((d, d)) for name in ("wq", "wk", "wv", "wo")}
    biases = {name: nm.parameter(np.zeros(d), np.float64) for name in ("bq", "bk", "bv", "bo")}
    query = nm.parameter(rng.standard_normal((2, 1, d)), np.float64)
    keys = nm.parameter(rng.standard_normal((2, 3, d)), np.float64)
    probe = nm.constant(rng.standard_normal((2, 1, d)), np.float64)

    def loss():
        out = multi_head_attention(
            query, keys, keys,
            weights["wq"], biases["bq"], weights["wk"], biases["bk"],
            weights["wv"], biases["bv"], weights["wo"], biases["bo"], heads,
        )
        return nm.sum_all(nm.mul(out, probe))

    params = [query, keys] + list(weights.values()) + list(biases.values())
    return nm.finite_difference_check(loss, params, max_coords=6, rng=rng)


def _check_composer(rng: np.random.Generator) -> float:
    composer = build_composer(seed=int(rng.integers(1 << 30)), dim=8, vocab_size=32,
                              max_len=12, blocks=2, heads=2, dtype=np.float64)
    prompt = make_prompt(3)
    pseudo = nm.parameter(rng.standard_normal((1, 3, 8)), np.float64)
    probe = nm.constant(rng.standard_normal((1, 8)), np.float64)

    def loss():
        return nm.sum_all(nm.mul(compose_batch(composer, [prompt], pseudo), probe))

    return nm.finite_difference_check(loss, [pseudo], max_coords=8, rng=rng)


def _check_bkp(rng: np.random.Generator) -> float:
    d, k, layers, heads = 8, 3, 2, 2
    params = bkp.init(int(rng.integers(1 << 30)), d, layers, heads, dtype=np.float64)
    ref = nm.parameter(rng.standard_normal((2, d)), np.float64)
    img = nm.constant(rng.standard_normal((2, k, d)), np.float64)
    cap = nm.constant(rng.standard_normal((2, k, d)), np.float64)
    probe = nm.constant(rng.standard_normal((2, 3, d)), np.float64)

    def loss():
        return nm.sum_all(nm.mul(bkp.project_batch(params, ref, img, cap), probe))

    return nm.finite_difference_check(loss, [ref] + params.params(), max_coords=4, rng=rng)


def _check_losses(rng: np.random.Generator) -> float:
    img = nm.parameter(rng.standard_normal((4, 6)), np.float64)
    txt = nm.parameter(rng.standard_normal((4, 6)), np.float64)
    worst = nm.finite_difference_check(
        lambda: contrastive_loss(img, txt, tau=2.5), [img, txt], max_coords=6, rng=rng)

    vecs = [nm.parameter(rng.standard_normal(6) + 0.2, np.float64) for _ in range(4)]
    worst = max(worst, nm.finite_difference_check(
        lambda: registration_loss(vecs[0], vecs[1], vecs[2], vecs[3], beta=0.7),
        vecs, max_coords=6, rng=rng))
    return worst


CHECKS = {
    "core_ops": _check_core_ops,
    "attention_layer": _check_attention_layer,
    "composer": _check_composer,
    "bkp_project": _check_bkp,
    "losses": _check_losses,
}


def run_gradient_suite(seeds: int = 10, verbose: bool = False) -> tuple[bool, list[str]]:
    """Every check over ``seeds`` seeds; returns (all passed, report lines)."""
    lines = []
    passed = True
    started = time.monotonic()
    for name, check in CHECKS.items():
        worst = 0.0
        for seed in range(seeds):
            rng = np.random.default_rng(7000 + seed)
            worst = max(worst, check(rng))
        ok = worst < REL_TOL
        passed = passed and ok
        line = f"{'PASS' if ok else 'FAIL'} {name}: max rel err {worst:.3e} over {seeds} seeds"
        lines.append(line)
        if verbose:
            print(line)
    lines.append(f"gradient suite finished in {time.monotonic() - started:.1f}s")
    if verbose:
        print(lines[-1])
    return passed, lines
