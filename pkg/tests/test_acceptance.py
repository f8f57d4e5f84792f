"""Acceptance checks. Each test prints one verdict line per criterion.

Criteria 3 and 4 share one set of desk-scale runs (three seeds, each with the
adversarial extractor and a cross-entropy-only baseline) built by
``desk_runs.run_seed``.
"""

import itertools
import json
import time
from collections import Counter

import numpy as np
import pytest
from scipy.stats import chisquare

from conftest import central_difference, rel_err
from desk_runs import ALPHA, ITERATIONS, SEEDS, make_splits, run_seed
from wdis import guide, models, ot, synth
from wdis.autodiff import Tape, grad, input_gradient
from wdis.checkpoint import decode_checkpoint, encode_checkpoint
from wdis.sampling import shuffle_to_product
from wdis.trainer import TrainConfig, run_training


# ---------------------------------------------------------------- 1


def _random_net(rng):
    depth = int(rng.integers(1, 4))
    sizes = [int(rng.integers(2, 5))] + [int(rng.integers(2, 6)) for _ in range(depth)] + [1]
    params = {}
    for k, (fi, fo) in enumerate(zip(sizes[:-1], sizes[1:])):
        params[f"net.W{k}"] = rng.normal(size=(fi, fo)) / np.sqrt(fi)
        params[f"net.b{k}"] = rng.normal(size=(1, fo)) * 0.1
    return params, sizes[0]


def _net_value(params, x, penalty):
    t = Tape()
    pv = {k: t.param(v, k) for k, v in params.items()}
    v = t.input(x)
    d = models.tape_mlp(t, pv, "net", v, 0.2)
    if penalty:
        norms = t.l2_norm(input_gradient(t, d, v))
        out = t.mean(t.square(norms - np.ones(norms.shape))) * 10.0
    else:
        out = t.mean(t.square(d)) + t.mean(d)
    return t, pv, out


def test_criterion_1_gradients(criterion):
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = {"loss": 0.0, "penalty": 0.0}
    for _ in range(20):
        params, d_in = _random_net(rng)
        x = rng.normal(size=(int(rng.integers(2, 7)), d_in))
        for kind in worst:
            t, pv, out = _net_value(params, x, kind == "penalty")
            grads = dict(zip(pv, grad(t, out, list(pv.values()))))
            for name in params:

                def f(a, name=name, kind=kind, params=params, x=x):
                    return _net_value({**params, name: a}, x, kind == "penalty")[2].value[0, 0]

                err = rel_err(grads[name], central_difference(f, params[name], h=1e-5), floor=1e-6).max()
                worst[kind] = max(worst[kind], float(err))
    seconds = time.perf_counter() - start
    ok = worst["loss"] < 1e-4 and worst["penalty"] < 1e-3 and seconds < 30
    criterion(1, ok, f"max rel err {worst['loss']:.2e} (<1e-4), penalty {worst['penalty']:.2e} (<1e-3), {seconds:.1f}s")
    assert ok


# ---------------------------------------------------------------- 2


def test_criterion_2_dual_vs_exact(criterion):
    start = time.perf_counter()
    rng = np.random.default_rng(np.random.SeedSequence(0, spawn_key=(200,)))
    exact_equal = True
    for n in range(1, 7):
        for _ in range(3):
            p = ot.DiscreteDistribution.uniform(rng.normal(size=(n, 2)))
            q = ot.DiscreteDistribution.uniform(rng.normal(size=(n, 2)))
            exact_equal &= ot.exact_w1(p, q) == ot.brute_force_w1(p, q)
    rels, exacts, duality_ok = [], [], True
    for k in range(5):
        p, q = ot.shifted_cloud_pair(rng, 8, 2, separation=1.0)
        _, critic = ot.fit_dual_critic(p, q, steps=2000, lam=10.0, seed=k)
        gap = ot.dual_gap(critic, p, q)
        rels.append(abs(gap.gap) / gap.exact)
        exacts.append(gap.exact)
        if gap.max_lipschitz_ratio <= 1.0:
            duality_ok &= gap.dual <= gap.exact + 1e-6
    seconds = time.perf_counter() - start
    ok = exact_equal and max(rels) < 0.15 and duality_ok and seconds < 120
    criterion(
        2,
        ok,
        f"max dual rel err {max(rels):.3f} (<0.15) at exact W1 in [{min(exacts):.2f}, {max(exacts):.2f}], weak duality {duality_ok}, "
        f"assignment == flow for n<=6: {exact_equal}, {seconds:.1f}s",
    )
    assert ok


# ---------------------------------------------------------------- 3 and 4


@pytest.fixture(scope="session")
def desk_runs():
    return [run_seed(seed) for seed in SEEDS]


@pytest.mark.slow
def test_criterion_3_disentanglement(desk_runs, criterion):
    lines, ok = [], True
    for r in desk_runs:
        g = r.grid["accuracies"]
        checks = [
            g["fg_from_fg"] >= 0.90,
            g["bg_from_bg"] >= 0.90,
            g["fg_from_bg"] <= 1 / 16 + 0.10,
            g["bg_from_fg"] <= 1 / 8 + 0.15,
            r.mi * 5 <= r.baseline_mi,
        ]
        ok &= all(checks)
        bound = r.extras["mi_lower_bound"]
        lines.append(
            f"seed {r.seed}: fg|zfg {g['fg_from_fg']:.3f} bg|zbg {g['bg_from_bg']:.3f} "
            f"fg|zbg {g['fg_from_bg']:.3f} bg|zfg {g['bg_from_fg']:.3f} "
            f"binned MI {r.mi:.4f} vs baseline {r.baseline_mi:.4f} "
            f"(probe bound {bound['wdis']:.3f} vs {bound['baseline']:.3f})"
        )
    seconds = sum(r.seconds for r in desk_runs)
    ok &= seconds < 600
    criterion(3, ok, f"alpha={ALPHA}, {ITERATIONS} iterations, {seconds:.0f}s total; " + "; ".join(lines))
    assert ok


@pytest.mark.slow
def test_desk_training_metrics(desk_runs):
    for r in desk_runs:
        # fg cross-entropy over the whole training split, down by half from ln 16
        assert r.extras["ce_fg"] <= 0.5 * np.log(16)
        for snap in r.history:
            assert snap["critic"]["wasserstein_fg"] >= -0.05
            assert snap["critic"]["wasserstein_bg"] >= -0.05


@pytest.mark.slow
def test_criterion_4_spurious_correlation(desk_runs, criterion):
    lines, ok = [], True
    for r in desk_runs:
        c = r.corr
        fg_gap = c["correct"]["anticorr_fg"] - c["all"]["anticorr_fg"]
        bg_gap = c["correct"]["anticorr_bg"] - c["baseline"]["anticorr_bg"]
        ok &= fg_gap >= 0.20 and bg_gap >= 0.20
        lines.append(
            f"seed {r.seed}: anticorr fg {c['correct']['anticorr_fg']:.3f} vs all {c['all']['anticorr_fg']:.3f}, "
            f"anticorr bg {c['correct']['anticorr_bg']:.3f} vs baseline {c['baseline']['anticorr_bg']:.3f}"
        )
    criterion(4, ok, "; ".join(lines))
    assert ok


# ---------------------------------------------------------------- 5


def test_criterion_5_sampler_laws(criterion):
    rng = np.random.default_rng(55)
    multiset_ok = True
    for _ in range(500):
        n = int(rng.integers(0, 40))
        lab = np.eye(8)[rng.integers(0, 8, n)] if n else np.zeros((0, 8))
        out = shuffle_to_product(lab, rng)
        multiset_ok &= Counter(map(tuple, out)) == Counter(map(tuple, lab))
    # 6000 shuffles of three distinct labels
    counts = Counter(tuple(np.argmax(shuffle_to_product(np.eye(3), rng), axis=1)) for _ in range(6000))
    p_perm = chisquare([counts[p] for p in itertools.permutations(range(3))]).pvalue
    # 100000 unbiased draws over the 16 x 8 table
    ds = synth.make_dataset(synth.FactorSpec(), synth.CorrelationSpec.unbiased(16, 8), 100_000, rng)
    table = np.zeros((16, 8))
    np.add.at(table, (ds.fg, ds.bg), 1)
    p_joint = chisquare(table.ravel()).pvalue
    ok = multiset_ok and p_perm > 0.01 and p_joint > 0.01
    criterion(5, ok, f"multisets preserved {multiset_ok} (500 calls), permutation p={p_perm:.3f}, joint p={p_joint:.3f}")
    assert ok


# ---------------------------------------------------------------- 6


def test_criterion_6_guide_exactness(criterion):
    rng = np.random.default_rng(6)
    otter = guide.build_prompt(
        guide.PromptSpec("otter", "freshwater carnivorous mammal having webbed and clawed feet and dark brown fur", "in a cave")
    )
    thatch = guide.build_prompt(guide.PromptSpec("thatch", "a house roof made with a plant material (as straw)", "in snow"))
    prompts_ok = (
        otter == "a photo of a otter, freshwater carnivorous mammal having webbed and clawed feet and dark brown fur, in a cave"
        and thatch == "a photo of a thatch, a house roof made with a plant material (as straw), in snow"
    )
    off_rect_ok = identity_ok = encodings_ok = True
    for _ in range(25):
        fg = guide.RGBImage.from_array(rng.integers(0, 256, (int(rng.integers(1, 40)), int(rng.integers(1, 40)), 3), dtype=np.uint8))
        bg = guide.RGBImage.from_array(rng.integers(0, 256, (int(rng.integers(4, 64)), int(rng.integers(4, 64)), 3), dtype=np.uint8))
        out, rect = guide.compose_guide(fg, bg, float(rng.uniform(0.3, 0.5)), rng)
        mask = np.ones((bg.height, bg.width), dtype=bool)
        mask[rect.y : rect.y + rect.height, rect.x : rect.x + rect.width] = False
        off_rect_ok &= np.array_equal(out.to_array()[mask], bg.to_array()[mask])
        img, _ = guide.generate(guide.BackendRequest("p", out), guide.IdentityBackend())
        identity_ok &= img.pixels == out.pixels
        data = guide.encode_p6(out)
        req = guide.BackendRequest(otter, out, 0.9, 3, 0)
        encodings_ok &= (
            guide.decode_p6(data) == out
            and guide.encode_p6(guide.decode_p6(data)) == data
            and guide.decode_request(guide.encode_request(req)) == req
            and guide.decode_response(guide.encode_response(out)) == out
        )
    ok = prompts_ok and off_rect_ok and identity_ok and encodings_ok
    criterion(
        6, ok, f"prompts {prompts_ok}, off-rect bit-exact {off_rect_ok}, identity {identity_ok}, encodings {encodings_ok}"
    )
    assert ok


# ---------------------------------------------------------------- 7


def test_criterion_7_determinism(criterion):
    data = make_splits(7, n_fg=16, n_bg=8)["val"]
    cfg = TrainConfig(iterations=8, seed=7, snapshot_every=2, hidden=(32,), critic_hidden=(32,))
    a = run_training(cfg, data.x, data.labels)
    b = run_training(cfg, data.x, data.labels)
    metrics_same = json.dumps(a.history, sort_keys=True).encode() == json.dumps(b.history, sort_keys=True).encode()
    half = run_training(cfg, data.x, data.labels, iterations=4)
    blob = encode_checkpoint(half, cfg)
    restored, cfg2, _ = decode_checkpoint(blob)
    bit_exact = encode_checkpoint(restored, cfg2) == blob and all(
        restored.params[k].tobytes() == v.tobytes() for k, v in half.params.arrays.items()
    )
    cfg_one = TrainConfig.from_dict({**cfg.to_dict(), "snapshot_every": 1})
    unbroken = run_training(cfg_one, data.x, data.labels, iterations=5)
    first = run_training(cfg_one, data.x, data.labels, iterations=4)
    resumed, cfg3, _ = decode_checkpoint(encode_checkpoint(first, cfg_one))
    resumed = run_training(cfg3, data.x, data.labels, state=resumed, iterations=1)
    diff = abs(unbroken.history[-1]["extractor"]["total"] - resumed.history[-1]["extractor"]["total"])
    ok = metrics_same and bit_exact and diff <= 1e-12
    criterion(7, ok, f"metrics byte-identical {metrics_same}, checkpoint bit-exact {bit_exact}, next-step loss diff {diff:.1e}")
    assert ok


@pytest.mark.slow
def test_correct_slices_saturate_on_corr_val(desk_runs):
    for r in desk_runs:
        assert r.corr["correct"]["corr_fg"] >= 0.98
        row = r.corr["correct"]
        cells = [row[c] for c in ("corr_fg", "anticorr_fg", "corr_bg", "anticorr_bg", "unbiased_fg")]
        assert abs(row["average"] - sum(cells) / 5) <= 1e-12
