"""Mini-batch AdamW training with early stopping, evaluation and grid search."""
from __future__ import annotations

import itertools
import json
import time
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, NumericError, UndefinedMetricError
from .graph import DataSplit
from .model import ModelConfig, ModelParameters, forward, init_params
from .tokenizer import gather_batch


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 5e-3
    weight_decay: float = 1e-5
    batch_size: int = 2000
    max_epochs: int = 200
    early_stop_patience: int = 50
    seed: int = 0
    precision: str = "64"

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ConfigError("learning_rate must be >= 0")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.early_stop_patience < 1 or self.max_epochs < 1:
            raise ConfigError("early_stop_patience and max_epochs must be >= 1")
        if self.precision not in ("64", "32"):
            raise ConfigError(f"precision must be '64' or '32', got {self.precision!r}")

    @property
    def dtype(self):
        return np.float64 if self.precision == "64" else np.float32

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **kw) -> "TrainConfig":
        return replace(self, **kw)


class AdamW:
    """Adam with decoupled weight decay (no schedule)."""

    def __init__(self, params: ModelParameters, lr: float, weight_decay: float = 0.0,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            v = self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            if self.weight_decay:
                p.data *= 1.0 - self.lr * self.weight_decay
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)
    best_epoch: int = 0
    best_val_acc: float = 0.0
    test_acc: float | None = None
    test_macro_f1: float | None = None
    stopped_early: bool = False
    timing: dict = field(default_factory=dict)

    def records(self) -> list[dict]:
        """JSON-lines records: one per epoch then a summary (timings excluded)."""
        out = [dict(kind="epoch", **e) for e in self.epochs]
        out.append({
            "kind": "summary",
            "best_epoch": self.best_epoch,
            "best_val_acc": self.best_val_acc,
            "test_acc": self.test_acc,
            "test_macro_f1": self.test_macro_f1,
            "epochs_run": len(self.epochs),
            "stopped_early": self.stopped_early,
        })
        return out

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records())


class TrainingDiverged(NumericError):
    """Raised on a non-finite loss; carries the best parameters seen so far."""

    def __init__(self, message, params, report):
        super().__init__(message)
        self.params = params
        self.report = report


def predict_logits(params: ModelParameters, levels: np.ndarray, nodes, cfg: ModelConfig,
                   batch_size: int = 4096) -> np.ndarray:
    nodes = np.asarray(nodes, dtype=np.int64)
    dtype = params["proj.W"].dtype
    chunks = []
    for i in range(0, len(nodes), batch_size):
        x = gather_batch(levels, nodes[i:i + batch_size]).astype(dtype, copy=False)
        chunks.append(forward(x, params, cfg).data)
    if not chunks:
        return np.zeros((0, params.n_classes))
    return np.concatenate(chunks)


def accuracy_from_logits(logits: np.ndarray, labels) -> float:
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise UndefinedMetricError("accuracy is undefined on an empty node set")
    return float(np.mean(np.argmax(logits, axis=1) == labels))  # argmax picks the lowest class on ties


def macro_f1(pred, labels, n_classes: int) -> float:
    pred, labels = np.asarray(pred), np.asarray(labels)
    scores = []
    for c in range(n_classes):
        tp = np.sum((pred == c) & (labels == c))
        fp = np.sum((pred == c) & (labels != c))
        fn = np.sum((pred != c) & (labels == c))
        if tp + fp + fn == 0:
            continue
        scores.append(2 * tp / (2 * tp + fp + fn))
    return float(np.mean(scores)) if scores else 0.0


def evaluate(params: ModelParameters, levels: np.ndarray, labels, nodes, cfg: ModelConfig) -> float:
    """Argmax accuracy over ``nodes``."""
    nodes = np.asarray(nodes, dtype=np.int64)
    if len(nodes) == 0:
        raise UndefinedMetricError("accuracy is undefined on an empty node set")
    return accuracy_from_logits(predict_logits(params, levels, nodes, cfg), np.asarray(labels)[nodes])


def train(levels: np.ndarray, labels, split: DataSplit, model_cfg: ModelConfig, train_cfg: TrainConfig,
          n_classes: int | None = None, params: ModelParameters | None = None, log=None):
    """Train from level-major tokens ``(S+1, n, width)``; returns ``(best_params, report)``.

    Validation accuracy selects the checkpoint; test accuracy is computed
    once, at the end, from that checkpoint.
    """
    levels = np.asarray(levels)
    labels = np.asarray(labels, dtype=np.int64)
    if levels.shape[0] != model_cfg.S + 1:
        raise ConfigError(f"token cache has S={levels.shape[0] - 1}, model config expects S={model_cfg.S}")
    n_classes = int(n_classes if n_classes is not None else labels.max() + 1)
    dtype = train_cfg.dtype
    levels = levels.astype(dtype, copy=False)
    if params is None:
        params = init_params(model_cfg, levels.shape[2], n_classes, seed=train_cfg.seed)
    if params.in_dim != levels.shape[2]:
        raise ConfigError(f"token width {levels.shape[2]} does not match parameter input width {params.in_dim}")
    params = params.astype(dtype)
    opt = AdamW(params, train_cfg.learning_rate, train_cfg.weight_decay)
    rng = np.random.default_rng(train_cfg.seed)
    train_nodes = np.asarray(split.train, dtype=np.int64)
    report = TrainReport()
    best = params.copy()
    best_val = -1.0
    t_train = t_eval = 0.0
    for epoch in range(1, train_cfg.max_epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(train_nodes)
        total, count = 0.0, 0
        for i in range(0, len(order), train_cfg.batch_size):
            batch = order[i:i + train_cfg.batch_size]
            x = gather_batch(levels, batch)
            params.zero_grad()
            with ad.Tape() as tape:
                logits = forward(x, params, model_cfg, training=True, rng=rng)
                loss = ad.cross_entropy(logits, labels[batch])
            lv = float(loss.data)
            if not np.isfinite(lv):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}", best, report)
            tape.backward(loss)
            opt.step()
            total += lv * len(batch)
            count += len(batch)
        t1 = time.perf_counter()
        val_acc = evaluate(params, levels, labels, split.val, model_cfg) if len(split.val) else 0.0
        t_train += t1 - t0
        t_eval += time.perf_counter() - t1
        report.epochs.append({"epoch": epoch, "train_loss": total / max(count, 1), "val_acc": val_acc})
        if log is not None:
            log(f"epoch {epoch:4d}  loss {total / max(count, 1):.4f}  val {val_acc:.4f}")
        if val_acc > best_val:
            best_val = val_acc
            best = params.copy()
            report.best_epoch = epoch
        elif epoch - report.best_epoch >= train_cfg.early_stop_patience:
            report.stopped_early = True
            break
    report.best_val_acc = best_val
    t2 = time.perf_counter()
    if len(split.test):
        logits = predict_logits(best, levels, split.test, model_cfg)
        report.test_acc = accuracy_from_logits(logits, labels[split.test])
        report.test_macro_f1 = macro_f1(np.argmax(logits, axis=1), labels[split.test], n_classes)
    report.timing = {"train_s": t_train, "val_s": t_eval, "test_s": time.perf_counter() - t2}
    return best, report


def hyperparameter_grid(S_values=(3,)) -> list[dict]:
    """Hyperparameter grid: lr x weight decay x layers x hidden width, per S."""
    out = []
    for S, lr, wd, L, dm in itertools.product(S_values, (1e-2, 5e-3, 1e-3), (1e-4, 5e-5, 1e-5), (1, 2),
                                              (128, 256, 512, 768)):
        out.append({"S": S, "learning_rate": lr, "weight_decay": wd, "L": L, "d_m": dm})
    return out


def grid_search(candidates, run):
    """Exhaustively score ``candidates``; ``run(candidate) -> (val_acc, n_params)``.

    Best validation accuracy wins; ties go to fewer parameters, then lower
    learning rate.  Returns ``(best_candidate, results)``.
    """
    candidates = list(candidates)
    if not candidates:
        raise ConfigError("grid is empty")
    results = []
    for cand in candidates:
        val_acc, n_params = run(cand)
        results.append({"candidate": cand, "val_acc": val_acc, "n_params": n_params})
    best = min(results, key=lambda r: (-r["val_acc"], r["n_params"], r["candidate"].get("learning_rate", 0.0)))
    return best["candidate"], results
