import csv
import io

import numpy as np
import pytest

from damgt.analysis import (SUITES, bench_attention, bench_table_csv, dump_attention, run_ablation, sweep_S,
                            write_attention_dump, write_series)
from damgt.errors import ConfigError, UndefinedMetricError
from damgt.model import ModelConfig, build_mask, init_params
from damgt.pipeline import PrepConfig, prepare
from damgt.synth import sbm_graph
from damgt.training import TrainConfig

SMALL = ModelConfig(S=3, d_m=16, H=2)
QUICK = TrainConfig(max_epochs=3, early_stop_patience=3)


@pytest.fixture(scope="module")
def g():
    return sbm_graph(120, 3, 0.8, feature_dim=6, seed=1)


@pytest.fixture(scope="module")
def prep(g):
    return prepare(g, PrepConfig(m=4, S=3))


def test_dump_structure(g, prep):
    cfg = SMALL.replace(L=2)
    params = init_params(cfg, prep.width, g.c, seed=2)
    dump = dump_attention(params, prep.levels, np.arange(g.n), cfg)
    assert sorted(dump.matrices) == [(l, h) for l in (1, 2) for h in (1, 2)]
    allowed = build_mask(3).allowed
    for m in dump.matrices.values():
        assert np.abs(m.sum(axis=1) - 1).max() < 1e-9
        assert np.all(m[~allowed] == 0.0) and np.count_nonzero(m) == 3 * 3 + 1
    with pytest.raises(UndefinedMetricError):
        dump_attention(params, prep.levels, [], cfg)


def test_dump_sparse_equals_dense(g, prep):
    params = init_params(SMALL, prep.width, g.c, seed=3)
    a = dump_attention(params, prep.levels, np.arange(50), SMALL.replace(attention="sparse"))
    b = dump_attention(params, prep.levels, np.arange(50), SMALL.replace(attention="dense"))
    assert max(np.abs(a.matrices[k] - b.matrices[k]).max() for k in a.matrices) < 1e-10


def test_dump_mean_over_nodes(g, prep):
    params = init_params(SMALL, prep.width, g.c, seed=3)
    nodes = np.array([4, 9, 17])
    avg = dump_attention(params, prep.levels, nodes, SMALL, batch_size=2)
    singles = [dump_attention(params, prep.levels, [v], SMALL).matrices[(1, 1)] for v in nodes]
    assert np.abs(avg.matrices[(1, 1)] - np.mean(singles, axis=0)).max() < 1e-14


def test_dump_files(tmp_path, g, prep):
    params = init_params(SMALL, prep.width, g.c)
    dump = dump_attention(params, prep.levels, np.arange(10), SMALL)
    files = write_attention_dump(dump, tmp_path)
    assert sorted(f.name for f in files) == ["attention.csv", "attn_L1_H1.png", "attn_L1_H2.png"]
    rows = list(csv.reader(io.StringIO((tmp_path / "attention.csv").read_text())))
    assert rows[0] == ["layer", "head", "row", "col", "value"] and len(rows) == 1 + 2 * 16
    first = (tmp_path / "attn_L1_H1.png").read_bytes()
    write_attention_dump(dump, tmp_path)
    assert (tmp_path / "attn_L1_H1.png").read_bytes() == first


@pytest.mark.parametrize("suite,count", [("mask", 2), ("pe", 4), ("mask-variants", 4)])
def test_suite_sizes(g, suite, count):
    table = run_ablation(suite, g, SMALL, QUICK, PrepConfig(m=4, S=3), seeds=(0,))
    assert len(table.rows) == count == len(SUITES[suite])
    assert table.gain(table.rows[0]) == 0.0
    lines = table.to_csv().splitlines()
    assert lines[0] == "variant,accuracy,stdev,gain" and len(lines) == count + 1


def test_untouched_artifacts_identical(g):
    table = run_ablation("mask-variants", g, SMALL, QUICK, PrepConfig(m=4, S=3), seeds=(0, 1))
    assert len({r.token_checksum for r in table.rows}) == 1
    pe = run_ablation("pe", g, SMALL, QUICK, PrepConfig(m=4, S=3), seeds=(0,))
    assert len({r.token_checksum for r in pe.rows}) == 4


def test_unknown_suite(g):
    with pytest.raises(ConfigError):
        run_ablation("bogus", g, SMALL, QUICK, PrepConfig())


def test_sweep(tmp_path, g):
    a = sweep_S(g, [2, 3], SMALL, QUICK, PrepConfig(m=4))
    b = sweep_S(g, [3, 2], SMALL, QUICK, PrepConfig(m=4))
    assert [s for s, _ in a] == [2, 3] and a == b
    paths = write_series(a, tmp_path)
    assert (tmp_path / "sweep_s.csv").read_text().splitlines()[0] == "S,accuracy" and len(paths) == 2


def test_bench_counts():
    rows = bench_attention((1, 20), d_m=64, H=4, batch=8, trials=1)
    assert (rows[0].dense_logits, rows[0].sparse_logits) == (4, 4) and rows[0].logit_ratio == 1.0
    assert (rows[1].dense_logits, rows[1].sparse_logits) == (441, 61)
    assert rows[1].logit_ratio == pytest.approx(441 / 61)
    assert all(r.max_abs_diff < 1e-12 for r in rows)
    assert bench_table_csv(rows).startswith("S,dense_logits,sparse_logits")
