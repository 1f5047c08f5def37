"""DAM-GT network: projection, mask-aware Transformer layers, hop readout, MLP head."""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, CorruptCacheError, UnsupportedPatternError
from .io import atomic_write
from .star_attention import star_backward, star_forward

MASK_VARIANTS = ("full", "none", "H", "V", "D")
ATTENTION_IMPLS = ("auto", "dense", "sparse")


@dataclass(frozen=True, eq=False)
class MaskedAttentionPattern:
    """Boolean (S+1)x(S+1) grid of permitted query/key positions."""

    S: int
    variant: str
    allowed: np.ndarray

    def pairs(self) -> set[tuple[int, int]]:
        return {(int(i), int(j)) for i, j in zip(*np.nonzero(self.allowed))}

    def __len__(self) -> int:
        return int(self.allowed.sum())

    @property
    def is_star(self) -> bool:
        return np.array_equal(self.allowed, build_mask(self.S, "full").allowed)


def build_mask(S: int, variant: str = "full") -> MaskedAttentionPattern:
    """Permitted positions for each masking strategy.

    full: first row, first column and diagonal.  H: first column and
    diagonal.  V: first row and diagonal.  D: first row and first column.
    none: everything.
    """
    if S < 1:
        raise ConfigError(f"S must be >= 1, got {S}")
    if variant not in MASK_VARIANTS:
        raise ConfigError(f"unknown mask variant {variant!r}; choose from {MASK_VARIANTS}")
    i, j = np.indices((S + 1, S + 1))
    row0, col0, diag = i == 0, j == 0, i == j
    allowed = {
        "full": row0 | col0 | diag,
        "H": col0 | diag,
        "V": row0 | diag,
        "D": row0 | col0,
        "none": np.ones_like(diag),
    }[variant]
    allowed = allowed.copy()
    allowed.setflags(write=False)
    return MaskedAttentionPattern(S=S, variant=variant, allowed=allowed)


@dataclass(frozen=True)
class ModelConfig:
    S: int = 3
    d_m: int = 128
    L: int = 1
    H: int = 8
    d_ff: int | None = None
    d_h: int | None = None
    keep_prob: float = 0.9
    mask_variant: str = "full"
    pe_variant: str = "dup"
    attention: str = "auto"

    def __post_init__(self):
        if self.d_ff is None:
            object.__setattr__(self, "d_ff", 2 * self.d_m)
        if self.d_h is None:
            object.__setattr__(self, "d_h", max(1, self.d_m // 2))
        if self.S < 1 or self.L < 1 or self.H < 1 or self.d_m < 1:
            raise ConfigError("S, L, H and d_m must all be >= 1")
        if self.d_m % self.H:
            raise ConfigError(f"d_m={self.d_m} is not divisible by H={self.H}")
        if not 0.0 < self.keep_prob <= 1.0:
            raise ConfigError(f"keep_prob must be in (0, 1], got {self.keep_prob}")
        if self.mask_variant not in MASK_VARIANTS:
            raise ConfigError(f"unknown mask variant {self.mask_variant!r}; choose from {MASK_VARIANTS}")
        if self.pe_variant not in ("dup", "ap", "tp", "none"):
            raise ConfigError(f"unknown positional-encoding variant {self.pe_variant!r}")
        if self.attention not in ATTENTION_IMPLS:
            raise ConfigError(f"unknown attention implementation {self.attention!r}")
        if self.attention == "sparse" and self.mask_variant != "full":
            raise UnsupportedPatternError("the sparse attention path only supports the full star+diagonal mask")

    @property
    def d_a(self) -> int:
        return self.d_m // self.H

    def use_sparse(self) -> bool:
        return self.attention == "sparse" or (self.attention == "auto" and self.mask_variant == "full")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **kw) -> "ModelConfig":
        return replace(self, **kw)


class ModelParameters:
    """Ordered, named parameter tensors plus the data widths they were built for."""

    def __init__(self, tensors: dict[str, Tensor], in_dim: int, n_classes: int):
        self.tensors = dict(tensors)
        self.in_dim = in_dim
        self.n_classes = n_classes

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self):
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def values(self):
        return self.tensors.values()

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def count(self) -> int:
        return int(sum(t.data.size for t in self.tensors.values()))

    def copy(self) -> "ModelParameters":
        return ModelParameters(
            {k: Tensor(t.data.copy(), requires_grad=True, name=k) for k, t in self.tensors.items()},
            self.in_dim,
            self.n_classes,
        )

    def astype(self, dtype) -> "ModelParameters":
        return ModelParameters(
            {k: Tensor(t.data.astype(dtype), requires_grad=True, name=k) for k, t in self.tensors.items()},
            self.in_dim,
            self.n_classes,
        )

    def shapes(self) -> dict[str, tuple]:
        return {k: t.shape for k, t in self.tensors.items()}


def parameter_shapes(cfg: ModelConfig, in_dim: int, n_classes: int) -> dict[str, tuple]:
    dm, ha = cfg.d_m, cfg.H * cfg.d_a
    shapes = {"proj.W": (in_dim, dm)}
    for layer in range(cfg.L):
        p = f"layers.{layer}."
        shapes.update({
            p + "ln1.gain": (dm,), p + "ln1.bias": (dm,),
            p + "attn.W_Q": (dm, ha), p + "attn.W_K": (dm, ha), p + "attn.W_V": (dm, ha),
            p + "attn.W_O": (ha, dm),
            p + "ln2.gain": (dm,), p + "ln2.bias": (dm,),
            p + "ffn.W1": (dm, cfg.d_ff), p + "ffn.b1": (cfg.d_ff,),
            p + "ffn.W2": (cfg.d_ff, dm), p + "ffn.b2": (dm,),
        })
    shapes.update({
        "readout.W": (1, 2 * dm),
        "head.W1": (dm, cfg.d_h), "head.b1": (cfg.d_h,),
        "head.W2": (cfg.d_h, n_classes), "head.b2": (n_classes,),
    })
    return shapes


def init_params(cfg: ModelConfig, in_dim: int, n_classes: int, seed: int = 0) -> ModelParameters:
    """Xavier-uniform weights, zero biases, unit layer-norm gains."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in parameter_shapes(cfg, in_dim, n_classes).items():
        if name.endswith(".gain"):
            data = np.ones(shape)
        elif len(shape) == 1:
            data = np.zeros(shape)
        else:
            fan_in, fan_out = shape
            if name == "readout.W":
                fan_in, fan_out = shape[1], shape[0]
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            data = rng.uniform(-limit, limit, size=shape)
        tensors[name] = Tensor(data, requires_grad=True, name=name)
    return ModelParameters(tensors, in_dim, n_classes)


def masked_attention_dense(q: Tensor, k: Tensor, v: Tensor, pattern: MaskedAttentionPattern):
    """Reference path: full (S+1)x(S+1) logits, masked softmax, weighted values.

    ``q, k, v`` are (..., S+1, d_a).  Returns ``(output, probabilities)``.
    """
    d_a = q.shape[-1]
    logits = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(d_a))
    probs = ad.softmax(logits, mask=pattern.allowed)
    return ad.matmul(probs, v), probs


def masked_attention_sparse(q: Tensor, k: Tensor, v: Tensor, pattern: MaskedAttentionPattern,
                            return_probs: bool = False):
    """Fast path for the star+diagonal mask: only the 3S+1 permitted logits are formed.

    Row 0 attends over all S+1 keys; every row i > 0 is a two-way softmax over
    keys 0 and i.  Forward and backward are fused loops, written out by hand.  Returns
    ``(output, probabilities or None)``; the dense probability grid is only
    assembled when asked for.
    """
    if not pattern.is_star:
        raise UnsupportedPatternError(f"sparse attention requires the full mask, got variant {pattern.variant!r}")
    shape = np.broadcast_shapes(q.shape, k.shape, v.shape)
    T, d_a = shape[-2:]
    lead = shape[:-2]
    dtype = np.result_type(q.data, k.data, v.data)

    def blocks(*arrays):
        return [np.ascontiguousarray(np.broadcast_to(a, shape), dtype=dtype).reshape(-1, T, d_a) for a in arrays]

    sc = 1.0 / math.sqrt(d_a)
    qd, kd, vd = blocks(q.data, k.data, v.data)
    data, p0, pb = star_forward(qd, kd, vd, sc)

    def backward(g):
        (gd,) = blocks(g)
        grads = star_backward(qd, kd, vd, gd, p0, pb, sc)
        return tuple(ad._unbroadcast(x.reshape(shape), t.shape) for x, t in zip(grads, (q, k, v)))

    out = ad._op(data.reshape(shape), (q, k, v), backward)
    probs = None
    if return_probs:
        grid = np.zeros((len(qd), T, T), dtype=dtype)
        grid[:, 0, :] = p0
        idx = np.arange(1, T)
        grid[:, idx, 0] = 1.0 - pb
        grid[:, idx, idx] = pb
        probs = grid.reshape(lead + (T, T))
    return out, probs


def attention_logit_count(S: int, sparse: bool) -> int:
    """Score entries formed per head per sequence."""
    return 3 * S + 1 if sparse else (S + 1) ** 2


def _split_heads(x: Tensor, H: int) -> Tensor:
    B, T, HA = x.shape
    return ad.transpose(ad.reshape(x, (B, T, H, HA // H)), (0, 2, 1, 3))


def mma(h: Tensor, params: ModelParameters, layer: int, cfg: ModelConfig, pattern: MaskedAttentionPattern,
        capture: list | None = None) -> Tensor:
    """Mask-aware multi-head attention on a (batch, S+1, d_m) input, same mask in every head."""
    p = f"layers.{layer}.attn."
    q = _split_heads(ad.matmul(h, params[p + "W_Q"]), cfg.H)
    k = _split_heads(ad.matmul(h, params[p + "W_K"]), cfg.H)
    v = _split_heads(ad.matmul(h, params[p + "W_V"]), cfg.H)
    if cfg.use_sparse():
        out, probs = masked_attention_sparse(q, k, v, pattern, return_probs=capture is not None)
    else:
        out, pt = masked_attention_dense(q, k, v, pattern)
        probs = pt.data
    if capture is not None:
        capture.append({"layer": layer, "probs": probs})
    B, H, T, da = out.shape
    merged = ad.reshape(ad.transpose(out, (0, 2, 1, 3)), (B, T, H * da))
    return ad.matmul(merged, params[p + "W_O"])


def transformer_layer(z: Tensor, params: ModelParameters, layer: int, cfg: ModelConfig,
                      pattern: MaskedAttentionPattern, training: bool = False, rng=None,
                      capture: list | None = None) -> Tensor:
    """Pre-norm block: z~ = MMA(LN(z)) + z; out = FFN(LN(z~)) + z~."""
    p = f"layers.{layer}."
    h = ad.layer_norm(z, params[p + "ln1.gain"], params[p + "ln1.bias"])
    a = ad.dropout(mma(h, params, layer, cfg, pattern, capture), cfg.keep_prob, rng, training)
    zt = ad.add(a, z)
    h2 = ad.layer_norm(zt, params[p + "ln2.gain"], params[p + "ln2.bias"])
    f = ad.gelu(ad.add(ad.matmul(h2, params[p + "ffn.W1"]), params[p + "ffn.b1"]))
    f = ad.dropout(f, cfg.keep_prob, rng, training)
    f = ad.add(ad.matmul(f, params[p + "ffn.W2"]), params[p + "ffn.b2"])
    return ad.add(f, zt)


def readout(z: Tensor, W: Tensor) -> Tensor:
    """Hop-attention readout: Z_0 + sum_s softmax_s((Z_0 || Z_s) W^T) Z_s over s = 1..S."""
    B, T, dm = z.shape
    S = T - 1
    hops = list(range(1, T))
    z0_rep = ad.take(z, [0] * S, axis=1)
    zs = ad.take(z, hops, axis=1)
    scores = ad.matmul(ad.concat([z0_rep, zs], axis=-1), ad.transpose(W))  # (B, S, 1)
    weights = ad.softmax(ad.reshape(scores, (B, 1, S)))
    agg = ad.reshape(ad.matmul(weights, zs), (B, dm))
    return ad.add(agg, ad.reshape(ad.take(z, [0], axis=1), (B, dm)))


def forward(tokens, params: ModelParameters, cfg: ModelConfig, training: bool = False, rng=None,
            capture: list | None = None) -> Tensor:
    """(batch, S+1, width) token sequences -> (batch, c) logits."""
    x = tokens if isinstance(tokens, Tensor) else Tensor(np.asarray(tokens, dtype=params["proj.W"].dtype))
    if x.ndim != 3:
        raise ConfigError(f"tokens must be (batch, S+1, width), got shape {x.shape}")
    if x.shape[-1] != params.in_dim:
        raise ConfigError(f"token width {x.shape[-1]} does not match projection input width {params.in_dim}")
    if x.shape[1] != cfg.S + 1:
        raise ConfigError(f"token sequences have {x.shape[1]} hops, config expects S+1={cfg.S + 1}")
    pattern = build_mask(cfg.S, cfg.mask_variant)
    z = ad.matmul(x, params["proj.W"])
    for layer in range(cfg.L):
        z = transformer_layer(z, params, layer, cfg, pattern, training, rng, capture)
    r = readout(z, params["readout.W"])
    h = ad.relu(ad.add(ad.matmul(r, params["head.W1"]), params["head.b1"]))
    return ad.add(ad.matmul(h, params["head.W2"]), params["head.b2"])


DMGT_MAGIC = b"DMGT"


def save_checkpoint(path, params: ModelParameters, cfg: ModelConfig, meta: dict | None = None) -> None:
    header = {"model": cfg.to_dict(), "in_dim": params.in_dim, "n_classes": params.n_classes, "meta": meta or {}}
    blob = json.dumps(header, sort_keys=True).encode()
    parts = [DMGT_MAGIC, struct.pack("<Q", len(blob)), blob, struct.pack("<Q", len(params))]
    for name, t in params.items():
        nb = name.encode()
        parts.append(struct.pack("<Q", len(nb)) + nb)
        parts.append(struct.pack("<Q", t.ndim) + struct.pack(f"<{t.ndim}Q", *t.shape))
        parts.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    atomic_write(path, b"".join(parts))


def load_checkpoint(path) -> tuple[ModelParameters, ModelConfig, dict]:
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:4] != DMGT_MAGIC:
        raise CorruptCacheError(f"{path}: not a DMGT checkpoint")
    try:
        off = 4
        (hl,) = struct.unpack_from("<Q", buf, off)
        off += 8
        header = json.loads(buf[off:off + hl].decode())
        off += hl
        (count,) = struct.unpack_from("<Q", buf, off)
        off += 8
        tensors = {}
        for _ in range(count):
            (nl,) = struct.unpack_from("<Q", buf, off)
            off += 8
            name = buf[off:off + nl].decode()
            off += nl
            (nd,) = struct.unpack_from("<Q", buf, off)
            off += 8
            shape = struct.unpack_from(f"<{nd}Q", buf, off)
            off += 8 * nd
            size = int(np.prod(shape)) if nd else 1
            if off + 8 * size > len(buf):
                raise CorruptCacheError(f"{path}: truncated tensor {name}")
            data = np.frombuffer(buf, "<f8", size, off).reshape(shape).astype(np.float64)
            off += 8 * size
            tensors[name] = Tensor(data, requires_grad=True, name=name)
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCacheError(f"{path}: malformed checkpoint ({exc})") from None
    cfg = ModelConfig.from_dict(header["model"])
    expected = parameter_shapes(cfg, header["in_dim"], header["n_classes"])
    got = {k: t.shape for k, t in tensors.items()}
    if expected != got:
        raise ConfigError(f"{path}: parameter shapes do not match the stored model config")
    return ModelParameters(tensors, header["in_dim"], header["n_classes"]), cfg, header.get("meta", {})
