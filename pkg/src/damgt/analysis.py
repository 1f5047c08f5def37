"""Attention dumps, ablation suites, propagation-step sweeps and the attention benchmark."""
from __future__ import annotations

import csv
import io
import json
import math
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, UndefinedMetricError
from .graph import Graph, random_split
from .io import atomic_write
from .model import (ModelConfig, ModelParameters, attention_logit_count, build_mask, forward,
                    masked_attention_dense, masked_attention_sparse)
from .pipeline import PrepConfig, prepare
from .tokenizer import gather_batch
from .training import TrainConfig, train


@dataclass
class AttentionDump:
    """Node-averaged attention matrices keyed by (layer, head); both 1-based."""

    S: int
    mask_variant: str
    matrices: dict = field(default_factory=dict)

    def rows(self):
        for (layer, head), m in sorted(self.matrices.items()):
            for i in range(m.shape[0]):
                for j in range(m.shape[1]):
                    yield layer, head, i, j, float(m[i, j])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "head", "row", "col", "value"])
        for layer, head, i, j, v in self.rows():
            w.writerow([layer, head, i, j, repr(v)])
        return buf.getvalue()


def dump_attention(params: ModelParameters, levels: np.ndarray, nodes, cfg: ModelConfig,
                   batch_size: int = 2048) -> AttentionDump:
    """Arithmetic mean of every head's attention matrix over ``nodes``."""
    nodes = np.asarray(nodes, dtype=np.int64)
    if len(nodes) == 0:
        raise UndefinedMetricError("cannot average attention over an empty node set")
    sums: dict[int, np.ndarray] = {}
    dtype = params["proj.W"].dtype
    for i in range(0, len(nodes), batch_size):
        capture: list = []
        forward(gather_batch(levels, nodes[i:i + batch_size]).astype(dtype, copy=False), params, cfg,
                capture=capture)
        for rec in capture:
            s = rec["probs"].sum(axis=0)  # (H, T, T)
            sums[rec["layer"]] = sums[rec["layer"]] + s if rec["layer"] in sums else s
    dump = AttentionDump(S=cfg.S, mask_variant=cfg.mask_variant)
    for layer, s in sums.items():
        for h in range(s.shape[0]):
            dump.matrices[(layer + 1, h + 1)] = s[h] / len(nodes)
    return dump


def write_attention_dump(dump: AttentionDump, out_dir, images: bool = True) -> list[Path]:
    out = Path(out_dir)
    written = [out / "attention.csv"]
    atomic_write(written[0], dump.to_csv().encode())
    if images:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        for (layer, head), m in sorted(dump.matrices.items()):
            fig, ax = plt.subplots(figsize=(3.2, 3.0))
            im = ax.imshow(m, cmap="Blues", vmin=0.0)
            ax.set_title(f"layer {layer}, head {head}")
            ax.set_xlabel("key hop")
            ax.set_ylabel("query hop")
            fig.colorbar(im, ax=ax, fraction=0.046)
            path = out / f"attn_L{layer}_H{head}.png"
            fig.savefig(path, dpi=100, bbox_inches="tight", metadata={"Software": None})
            plt.close(fig)
            written.append(path)
    return written


SUITES = {
    "mask": [("DAM-GT", {}), ("-w/o mask", {"mask_variant": "none"})],
    "pe": [("DAM-GT", {}), ("-w/o ap", {"pe_variant": "tp"}), ("-w/o tp", {"pe_variant": "ap"}),
           ("-w/o dup", {"pe_variant": "none"})],
    "mask-variants": [("DAM-GT", {}), ("DAM-GT-H", {"mask_variant": "H"}), ("DAM-GT-V", {"mask_variant": "V"}),
                      ("DAM-GT-D", {"mask_variant": "D"})],
}


@dataclass
class AblationRow:
    variant: str
    accuracies: list
    token_checksum: str
    overrides: dict

    @property
    def accuracy(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def median(self) -> float:
        return float(statistics.median(self.accuracies))

    @property
    def stdev(self) -> float:
        return float(np.std(self.accuracies))


@dataclass
class AblationTable:
    suite: str
    rows: list

    def gain(self, row: AblationRow) -> float:
        """Full-model accuracy minus this row's (zero for the full model)."""
        return self.rows[0].accuracy - row.accuracy

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["variant", "accuracy", "stdev", "gain"])
        for r in self.rows:
            w.writerow([r.variant, f"{r.accuracy:.6f}", f"{r.stdev:.6f}", f"{self.gain(r):+.6f}"])
        return buf.getvalue()


def run_seeds(g: Graph, prep, model_cfg: ModelConfig, train_cfg: TrainConfig, seeds, fractions=(0.6, 0.2, 0.2),
              resplit: bool = True) -> list[float]:
    accs = []
    for seed in seeds:
        split = random_split(g, fractions, seed if resplit else train_cfg.seed)
        _, report = train(prep.levels, g.Y, split, model_cfg, train_cfg.replace(seed=seed), n_classes=g.c)
        accs.append(report.test_acc)
    return accs


def run_ablation(suite: str, g: Graph, model_cfg: ModelConfig, train_cfg: TrainConfig, prep_cfg: PrepConfig,
                 seeds=(0,), fractions=(0.6, 0.2, 0.2), resplit: bool = True, log=None,
                 memo: dict | None = None) -> AblationTable:
    """Train every variant of ``suite`` with identical seeds; only the varied component changes.

    ``memo`` (a dict kept by the caller) shares results between suites, so
    the full model is trained once when several suites run on one graph.
    """
    if suite not in SUITES:
        raise ConfigError(f"unknown ablation suite {suite!r}; choose from {sorted(SUITES)}")
    preps: dict[str, object] = {}
    rows = []
    for name, overrides in SUITES[suite]:
        cfg = model_cfg.replace(**overrides)
        if cfg.mask_variant != "full" and cfg.attention == "sparse":
            cfg = cfg.replace(attention="auto")
        pe = cfg.pe_variant if "pe_variant" in overrides else prep_cfg.pe
        cfg = cfg.replace(pe_variant=pe)
        if pe not in preps:
            preps[pe] = prepare(g, PrepConfig(**{**prep_cfg.to_dict(), "pe": pe}))
        prep = preps[pe]
        key = (g.content_hash(), prep.checksum(), json.dumps([cfg.to_dict(), train_cfg.to_dict(), list(seeds),
                                                               list(fractions), resplit], sort_keys=True))
        if memo is not None and key in memo:
            accs = memo[key]
        else:
            accs = run_seeds(g, prep, cfg, train_cfg, seeds, fractions, resplit)
            if memo is not None:
                memo[key] = accs
        rows.append(AblationRow(name, accs, prep.checksum(), overrides))
        if log is not None:
            log(f"{suite}: {name:10s} mean {np.mean(accs):.4f} median {statistics.median(accs):.4f}")
    return AblationTable(suite, rows)


def sweep_S(g: Graph, values, model_cfg: ModelConfig, train_cfg: TrainConfig, prep_cfg: PrepConfig,
            fractions=(0.6, 0.2, 0.2), log=None) -> list[tuple[int, float]]:
    """Test accuracy for each propagation depth, one shared seed."""
    values = sorted(set(int(v) for v in values))
    if not values or values[0] < 1:
        raise ConfigError("S values must be positive integers")
    base = prepare(g, PrepConfig(**{**prep_cfg.to_dict(), "S": max(values)}))
    split = random_split(g, fractions, train_cfg.seed)
    series = []
    for S in values:
        levels = base.levels[: S + 1]  # propagation is prefix-stable
        _, report = train(levels, g.Y, split, model_cfg.replace(S=S), train_cfg, n_classes=g.c)
        series.append((S, report.test_acc))
        if log is not None:
            log(f"S={S:3d}  test {report.test_acc:.4f}")
    return series


def write_series(series, out_dir, plot: bool = True) -> list[Path]:
    out = Path(out_dir)
    paths = [out / "sweep_s.csv"]
    atomic_write(paths[0], ("S,accuracy\n" + "".join(f"{s},{a:.6f}\n" for s, a in series)).encode())
    if plot:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(4, 3))
        ax.plot([s for s, _ in series], [a for _, a in series], marker="o")
        ax.set_xlabel("S (max hop)")
        ax.set_ylabel("test accuracy")
        fig.savefig(out / "sweep_s.png", dpi=100, bbox_inches="tight", metadata={"Software": None})
        plt.close(fig)
        paths.append(out / "sweep_s.png")
    return paths


@dataclass
class BenchRow:
    S: int
    dense_logits: int
    sparse_logits: int
    dense_madds: int
    sparse_madds: int
    dense_s: float
    sparse_s: float
    max_abs_diff: float

    @property
    def logit_ratio(self) -> float:
        return self.dense_logits / self.sparse_logits

    @property
    def speedup(self) -> float:
        return self.dense_s / self.sparse_s if self.sparse_s else math.inf


def bench_attention(S_values=(1, 5, 10, 20), d_m: int = 512, H: int = 8, batch: int = 256, trials: int = 5,
                    seed: int = 0) -> list[BenchRow]:
    """Median forward+backward wall time of the dense and structured attention kernels.

    Multiply-add counts cover Q K^T and P V per head per sequence.  Outputs
    and gradients are cross-checked against the dense path before timing.
    """
    rng = np.random.default_rng(seed)
    d_a = d_m // H
    rows = []
    for S in S_values:
        T = S + 1
        pattern = build_mask(S, "full")
        q, k, v = (ad.Tensor(rng.standard_normal((batch, H, T, d_a)), requires_grad=True) for _ in range(3))
        grad_out = rng.standard_normal((batch, H, T, d_a))

        def run(kernel):
            for t in (q, k, v):
                t.grad = None  # time the kernels, not accumulation into zeroed buffers
            t0 = time.perf_counter()
            with ad.Tape() as tape:
                out, _ = kernel(q, k, v, pattern)
            tape.backward(out, grad_out)
            return time.perf_counter() - t0, out.data, [t.grad.copy() for t in (q, k, v)]

        _, od, gd = run(masked_attention_dense)
        _, osp, gs = run(masked_attention_sparse)
        diff = max(float(np.abs(od - osp).max()), *(float(np.abs(a - b).max()) for a, b in zip(gd, gs)))
        dense_t, sparse_t = [], []
        for _ in range(trials):
            dense_t.append(run(masked_attention_dense)[0])
            sparse_t.append(run(masked_attention_sparse)[0])
        nd, ns = attention_logit_count(S, False), attention_logit_count(S, True)
        rows.append(BenchRow(S, nd, ns, 2 * nd * d_a, 2 * ns * d_a, statistics.median(dense_t),
                             statistics.median(sparse_t), diff))
    return rows


def bench_table_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["S", "dense_logits", "sparse_logits", "logit_ratio", "dense_madds", "sparse_madds",
                "dense_s", "sparse_s", "speedup", "max_abs_diff"])
    for r in rows:
        w.writerow([r.S, r.dense_logits, r.sparse_logits, f"{r.logit_ratio:.4f}", r.dense_madds, r.sparse_madds,
                    f"{r.dense_s:.6f}", f"{r.sparse_s:.6f}", f"{r.speedup:.3f}", f"{r.max_abs_diff:.3e}"])
    return buf.getvalue()
