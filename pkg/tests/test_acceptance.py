"""Acceptance suite: one test per criterion, a PASS/FAIL/SKIP line each in the terminal summary.

Run with ``pytest tests/test_acceptance.py -v``.  Timing budgets are asserted
inside each test.
"""
import json
import statistics
import time

import numpy as np
import pytest

from damgt import autodiff as ad
from damgt.analysis import bench_attention, run_ablation, run_seeds
from damgt.autodiff import Tape, grad_check
from damgt.cli import main
from damgt.graph import connected_components, normalized_adjacency, random_split
from damgt.model import ModelConfig, build_mask, forward, init_params
from damgt.pipeline import PrepConfig, prepare
from damgt.preprocessing import dual_encoding, laplacian_eigenpairs
from damgt.synth import sbm_graph
from damgt.tokenizer import enhanced_features, propagate_all
from damgt.training import TrainConfig, train

import reference as ref
from conftest import random_graph

CRITERIA = {
    1: "mask structure over 1000 random trials",
    2: "tokenizer equals dense propagation oracle",
    3: "sparse attention equals dense reference",
    4: "end-to-end finite-difference gradient check",
    5: "eigenpairs match dense oracle subspaces",
    6: "end-to-end learning on SBM fixtures",
    7: "ablation directions (mask suite, mask variants)",
    8: "attention benchmark counts and timing",
    9: "table-number reproduction (non-gating)",
    10: "byte-identical command re-runs",
}

# homophilous fixture: default synth features (d=32, noise 1)
HOMOPHILOUS = dict(n=1000, c=4, homophily=0.8, seed=0)
# heterophilous fixture: chance-level homophily, high-dimensional noisy features
HETEROPHILOUS = dict(n=1000, c=4, homophily=0.25, feature_dim=256, feature_noise=5.0, seed=0)
SEEDS = range(5)


def dense_ahat_independent(edges, n):
    A = np.eye(n)
    for u, v in edges:
        if u != v:
            A[u, v] = A[v, u] = 1.0
    s = 1.0 / np.sqrt(A.sum(axis=1))
    return s[:, None] * A * s[None, :]


def test_criterion_01_mask_structure():
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    worst_row = 0.0
    for trial in range(1000):
        S = int(rng.integers(1, 21))
        H = int(rng.choice([1, 2, 4]))
        cfg = ModelConfig(S=S, d_m=4 * H, H=H, L=int(rng.integers(1, 3)), keep_prob=1.0,
                          attention="sparse" if trial % 2 else "dense")
        params = init_params(cfg, 6, 3, seed=trial)
        for t in params.values():
            t.data *= rng.uniform(0.5, 4.0)
        cap = []
        forward(rng.standard_normal((3, S + 1, 6)) * rng.uniform(0.1, 10), params, cfg, capture=cap)
        allowed = build_mask(S).allowed
        for rec in cap:
            P = rec["probs"]
            assert np.all(P[..., ~allowed] == 0.0)
            worst_row = max(worst_row, float(np.abs(P.sum(axis=-1) - 1.0).max()))
    assert worst_row <= 1e-12
    assert time.perf_counter() - t0 < 60


def test_criterion_02_tokenizer_oracle():
    rng = np.random.default_rng(202)
    t0 = time.perf_counter()
    for trial in range(50):
        n = int(rng.integers(2, 31))
        g = random_graph(rng, n, rng.uniform(0.0, 0.5), d=3, c=2)
        n_comp, _ = connected_components(g)
        adj = normalized_adjacency(g)
        m = min(3, n - n_comp)
        enc = dual_encoding(g, adj, m=m, variant="dup" if m >= 1 else "ap")
        Xp = enhanced_features(g.X, enc)
        levels = propagate_all(adj, Xp, 6)
        A = dense_ahat_independent(g.edge_list(), n)
        power = np.eye(n)
        for s in range(7):
            assert np.abs(levels[s] - power @ Xp).max() < 1e-10
            power = A @ power
    assert time.perf_counter() - t0 < 60


def test_criterion_03_sparse_attention_oracle():
    rng = np.random.default_rng(303)
    t0 = time.perf_counter()
    worst = 0.0
    for trial in range(100):
        S = int(rng.integers(1, 21))
        H = int(rng.choice([1, 2, 4]))
        base = dict(S=S, d_m=4 * H, H=H, L=int(rng.integers(1, 3)), keep_prob=1.0)
        x = rng.standard_normal((4, S + 1, 5))
        y = rng.integers(0, 3, 4)
        results = []
        for impl in ("dense", "sparse"):
            cfg = ModelConfig(attention=impl, **base)
            params = init_params(cfg, 5, 3, seed=trial)
            with Tape() as tape:
                logits = forward(x, params, cfg)
                loss = ad.cross_entropy(logits, y)
            tape.backward(loss)
            results.append((logits.data, {k: t.grad for k, t in params.items()}))
        (ld, gd), (ls, gs) = results
        worst = max(worst, float(np.abs(ld - ls).max()), *(float(np.abs(gd[k] - gs[k]).max()) for k in gd))
    assert worst < 1e-10
    assert time.perf_counter() - t0 < 120


def test_criterion_04_gradient_integrity(toy_graph):
    t0 = time.perf_counter()
    prep = prepare(toy_graph, PrepConfig(m=2, S=2))
    cfg = ModelConfig(S=2, d_m=8, H=2, L=2, keep_prob=0.8)
    params = init_params(cfg, prep.width, 2, seed=0)
    x = np.ascontiguousarray(prep.levels.transpose(1, 0, 2))

    def loss():
        logits = forward(x, params, cfg, training=True, rng=np.random.default_rng(5))
        return ad.cross_entropy(logits, toy_graph.Y)

    errors = {name: grad_check(loss, t, eps=1e-5) for name, t in params.items()}
    assert all(t.dtype == np.float64 for t in params.values())
    assert max(errors.values()) < 1e-4, errors
    assert time.perf_counter() - t0 < 120


def test_criterion_05_spectral_oracle():
    rng = np.random.default_rng(505)
    t0 = time.perf_counter()
    for trial in range(20):
        m = 0
        while m < 1:  # edgeless draws have no non-trivial pairs
            n = int(rng.integers(5, 61))
            g = random_graph(rng, n, rng.uniform(0.05, 0.4))
            n_comp, _ = connected_components(g)
            m = min(10, n - n_comp)
        lams, V = laplacian_eigenpairs(normalized_adjacency(g), m, seed=trial)
        A = dense_ahat_independent(g.edge_list(), n)
        assert ref.eigenpair_residual(A, lams, V) < 1e-8
        assert ref.oracle_subspace_angle(A, V, m) < 1e-6
    assert time.perf_counter() - t0 < 60


def test_criterion_06_end_to_end_learning():
    t0 = time.perf_counter()
    g = sbm_graph(**HOMOPHILOUS)
    prep = prepare(g, PrepConfig())
    _, rep = train(prep.levels, g.Y, random_split(g, (0.6, 0.2, 0.2), 0), ModelConfig(), TrainConfig(),
                   n_classes=g.c)
    print(f"homophilous fixture: test accuracy {rep.test_acc:.4f} after {len(rep.epochs)} epochs")
    assert len(rep.epochs) <= 200 and rep.test_acc >= 0.90

    het = sbm_graph(**HETEROPHILOUS)
    medians = {}
    for pe in ("dup", "none"):
        accs = run_seeds(het, prepare(het, PrepConfig(pe=pe)), ModelConfig(pe_variant=pe), TrainConfig(), SEEDS)
        medians[pe] = statistics.median(accs)
        print(f"heterophilous fixture, pe={pe}: median {medians[pe]:.4f} {accs}")
    assert medians["none"] < medians["dup"]
    assert time.perf_counter() - t0 < 600


_MEMO: dict = {}


def test_criterion_07_ablation_directions():
    g = sbm_graph(**HETEROPHILOUS)
    mask = run_ablation("mask", g, ModelConfig(), TrainConfig(), PrepConfig(), seeds=SEEDS, memo=_MEMO, log=print)
    variants = run_ablation("mask-variants", g, ModelConfig(), TrainConfig(), PrepConfig(), seeds=SEEDS, memo=_MEMO,
                            log=print)
    print(mask.to_csv() + variants.to_csv())
    full, no_mask = mask.rows
    assert full.median >= no_mask.median
    assert len(variants.rows) == 4
    assert all(variants.rows[0].median >= r.median for r in variants.rows[1:])


def test_criterion_08_benchmark():
    (row,) = bench_attention((20,), d_m=512, H=8, batch=256, trials=5)
    print(f"S=20 d_m=512: dense {row.dense_s * 1e3:.2f} ms, sparse {row.sparse_s * 1e3:.2f} ms, "
          f"logits {row.dense_logits} vs {row.sparse_logits}")
    assert (row.dense_logits, row.sparse_logits) == (441, 61)
    assert row.max_abs_diff < 1e-10
    assert row.sparse_s <= row.dense_s


@pytest.mark.skip(reason="non-gating: needs an external Pubmed-format dataset; see README for the recipe")
def test_criterion_09_table_reproduction():
    pass


def test_criterion_10_determinism(tmp_path, capsys):
    small = ["--epochs", "4", "--d-m", "16", "--heads", "2"]

    def session(root):
        data = root / "data"
        cmds = [
            ["synth", "--nodes", "160", "--classes", "3", "--homophily", "0.7", "--seed", "4", "--out", data],
            ["preprocess", "--data", data, "--out", root / "prep", "--m", "5"],
            ["train", "--data", data, "--out", root / "train", "--m", "5", *small],
            ["eval", "--data", data, "--checkpoint", root / "train" / "checkpoint.dmgt", "--cache", root / "prep"],
            ["attn-dump", "--data", data, "--checkpoint", root / "train" / "checkpoint.dmgt", "--out", root / "attn"],
            ["ablate", "--data", data, "--suite", "mask-variants", "--seeds", "2", "--out", root / "abl", *small],
            ["sweep-s", "--data", data, "--values", "2,4", "--out", root / "sweep", *small],
            ["bench", "--S-values", "2,5", "--d-m", "32", "--batch", "4", "--trials", "1"],
        ]
        summaries = []
        for c in cmds:
            assert main([str(a) for a in c]) == 0, c
            out = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
            out.pop("timing", None)
            if out["command"] == "bench":
                out["rows"] = [{k: v for k, v in r.items() if not k.endswith("_s")} for r in out["rows"]]
            summaries.append(json.dumps(out, sort_keys=True).replace(str(root), "<root>"))
        files = {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}
        return summaries, files

    s1, f1 = session(tmp_path / "one")
    s2, f2 = session(tmp_path / "two")
    assert s1 == s2
    assert f1.keys() == f2.keys()
    differing = [k for k in f1 if f1[k] != f2[k]]
    assert not differing, differing
