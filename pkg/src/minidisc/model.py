"""Maskable pre-LN transformer encoder classifier.

Every self-attention head and every feed-forward neuron carries a gate. In
``dense`` mode head outputs and neuron activations are multiplied by their gate
values, which makes gate gradients available for importance scoring. In
``compact`` mode the kept slices are gathered out of the shared weights so a
pruned candidate only pays for what it keeps; both modes agree on the forward
value for 0/1 masks.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor

PAD_BIAS = -1e9


class MaskError(ValueError):
    """A StructureMask does not fit the model configuration."""


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 6
    heads: int = 8
    d_model: int = 128
    d_ffn: int = 512
    vocab: int = 64
    max_len: int = 32
    n_classes: int = 2
    with_cross_attention: bool = False
    relation_width: int | None = None
    activation: str = "gelu"

    def __post_init__(self):
        for name in ("layers", "heads", "d_model", "d_ffn", "vocab", "max_len", "n_classes"):
            if getattr(self, name) < 1:
                raise ValueError(f"ModelConfig.{name} must be >= 1")
        if self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} not divisible by heads={self.heads}")
        if self.activation != "gelu":
            raise ValueError("only the gelu activation is supported")

    @property
    def d_head(self) -> int:
        return self.d_model // self.heads

    @property
    def aux_width(self) -> int:
        return self.relation_width or self.d_model

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# structure masks
# ---------------------------------------------------------------------------

def _frozen_bits(a, shape, what) -> np.ndarray:
    arr = np.asarray(a)
    if arr.shape != shape:
        raise MaskError(f"{what} bits have shape {arr.shape}, expected {shape}")
    arr = arr.astype(bool).copy()
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class StructureMask:
    """Per-layer keep bits for self heads, cross heads and feed-forward neurons."""

    self_heads: np.ndarray
    ffn_neurons: np.ndarray
    cross_heads: np.ndarray | None = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        sh = np.asarray(self.self_heads)
        fn = np.asarray(self.ffn_neurons)
        if sh.ndim != 2 or fn.ndim != 2 or sh.shape[0] != fn.shape[0]:
            raise MaskError(f"inconsistent mask shapes {sh.shape} / {fn.shape}")
        object.__setattr__(self, "self_heads", _frozen_bits(sh, sh.shape, "self_heads"))
        object.__setattr__(self, "ffn_neurons", _frozen_bits(fn, fn.shape, "ffn_neurons"))
        if self.cross_heads is not None:
            object.__setattr__(self, "cross_heads",
                               _frozen_bits(self.cross_heads, sh.shape, "cross_heads"))

    @classmethod
    def ones(cls, cfg: ModelConfig) -> "StructureMask":
        return cls.full(cfg, True)

    @classmethod
    def zeros(cls, cfg: ModelConfig) -> "StructureMask":
        return cls.full(cfg, False)

    @classmethod
    def full(cls, cfg: ModelConfig, value: bool) -> "StructureMask":
        heads = np.full((cfg.layers, cfg.heads), value)
        cross = heads.copy() if cfg.with_cross_attention else None
        return cls(heads, np.full((cfg.layers, cfg.d_ffn), value), cross)

    @property
    def layers(self) -> int:
        return self.self_heads.shape[0]

    @property
    def skip_attn(self) -> np.ndarray:
        return ~self.self_heads.any(axis=1)

    @property
    def skip_ffn(self) -> np.ndarray:
        return ~self.ffn_neurons.any(axis=1)

    @property
    def skip_cross(self) -> np.ndarray | None:
        return None if self.cross_heads is None else ~self.cross_heads.any(axis=1)

    def check(self, cfg: ModelConfig) -> None:
        if self.self_heads.shape != (cfg.layers, cfg.heads):
            raise MaskError(f"self_heads {self.self_heads.shape} != ({cfg.layers}, {cfg.heads})")
        if self.ffn_neurons.shape != (cfg.layers, cfg.d_ffn):
            raise MaskError(f"ffn_neurons {self.ffn_neurons.shape} != ({cfg.layers}, {cfg.d_ffn})")
        if cfg.with_cross_attention != (self.cross_heads is not None):
            raise MaskError("cross_heads presence does not match with_cross_attention")

    def issubset(self, other: "StructureMask") -> bool:
        if not np.all(self.self_heads <= other.self_heads):
            return False
        if not np.all(self.ffn_neurons <= other.ffn_neurons):
            return False
        if self.cross_heads is not None and other.cross_heads is not None:
            return bool(np.all(self.cross_heads <= other.cross_heads))
        return True

    def equals(self, other: "StructureMask") -> bool:
        return self.issubset(other) and other.issubset(self)

    def kept_heads(self, layer: int) -> np.ndarray:
        key = ("h", layer)
        if key not in self._cache:
            self._cache[key] = np.flatnonzero(self.self_heads[layer])
        return self._cache[key]

    def kept_neurons(self, layer: int) -> np.ndarray:
        key = ("n", layer)
        if key not in self._cache:
            self._cache[key] = np.flatnonzero(self.ffn_neurons[layer])
        return self._cache[key]

    def head_columns(self, layer: int, d_head: int) -> np.ndarray:
        key = ("c", layer, d_head)
        if key not in self._cache:
            kept = self.kept_heads(layer)
            self._cache[key] = (kept[:, None] * d_head + np.arange(d_head)[None, :]).reshape(-1)
        return self._cache[key]

    def counts(self) -> dict:
        out = {
            "heads_per_layer": self.self_heads.sum(axis=1).tolist(),
            "neurons_per_layer": self.ffn_neurons.sum(axis=1).tolist(),
        }
        if self.cross_heads is not None:
            out["cross_heads_per_layer"] = self.cross_heads.sum(axis=1).tolist()
        return out

    def to_json(self) -> dict:
        def hexrows(bits):
            return [_bits_to_hex(row) for row in bits]

        d = {
            "layers": self.layers,
            "heads": self.self_heads.shape[1],
            "d_ffn": self.ffn_neurons.shape[1],
            "self_heads": hexrows(self.self_heads),
            "ffn_neurons": hexrows(self.ffn_neurons),
        }
        if self.cross_heads is not None:
            d["cross_heads"] = hexrows(self.cross_heads)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "StructureMask":
        heads = np.array([_hex_to_bits(r, d["heads"]) for r in d["self_heads"]])
        neurons = np.array([_hex_to_bits(r, d["d_ffn"]) for r in d["ffn_neurons"]])
        cross = None
        if "cross_heads" in d:
            cross = np.array([_hex_to_bits(r, d["heads"]) for r in d["cross_heads"]])
        return cls(heads.reshape(d["layers"], d["heads"]),
                   neurons.reshape(d["layers"], d["d_ffn"]), cross)


def _bits_to_hex(bits: np.ndarray) -> str:
    # bit i of the integer is entry i
    value = 0
    for i in np.flatnonzero(bits):
        value |= 1 << int(i)
    width = max(1, (len(bits) + 3) // 4)
    return format(value, f"0{width}x")


def _hex_to_bits(s: str, n: int) -> np.ndarray:
    value = int(s, 16)
    return np.array([(value >> i) & 1 for i in range(n)], dtype=bool)


# ---------------------------------------------------------------------------
# parameter store
# ---------------------------------------------------------------------------

def layer_param_names(layer: int) -> list[str]:
    p = f"layers.{layer}."
    return [p + n for n in (
        "ln1.g", "ln1.b", "attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv", "attn.bv",
        "attn.wo", "attn.bo", "ln2.g", "ln2.b", "ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2")]


EMBEDDING_NAMES = ("tok_emb", "pos_emb")
HEAD_NAMES = ("ln_f.g", "ln_f.b", "cls.w", "cls.b")
AUX_NAMES = ("aux.wq", "aux.bq", "aux.wk", "aux.bk", "aux.wv", "aux.bv")


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    D, F = cfg.d_model, cfg.d_ffn
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (cfg.vocab, D),
        "pos_emb": (cfg.max_len, D),
    }
    for l in range(cfg.layers):
        p = f"layers.{l}."
        shapes.update({
            p + "ln1.g": (D,), p + "ln1.b": (D,),
            p + "attn.wq": (D, D), p + "attn.bq": (D,),
            p + "attn.wk": (D, D), p + "attn.bk": (D,),
            p + "attn.wv": (D, D), p + "attn.bv": (D,),
            p + "attn.wo": (D, D), p + "attn.bo": (D,),
            p + "ln2.g": (D,), p + "ln2.b": (D,),
            p + "ffn.w1": (D, F), p + "ffn.b1": (F,),
            p + "ffn.w2": (F, D), p + "ffn.b2": (D,),
        })
    shapes.update({"ln_f.g": (D,), "ln_f.b": (D,), "cls.w": (D, cfg.n_classes),
                   "cls.b": (cfg.n_classes,)})
    A = cfg.aux_width
    shapes.update({"aux.wq": (D, A), "aux.bq": (A,), "aux.wk": (D, A), "aux.bk": (A,),
                   "aux.wv": (D, A), "aux.bv": (A,)})
    return shapes


class SharedParamStore:
    """One teacher-shaped set of weights; candidates view it through masks."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.params)

    def items(self):
        return self.params.items()

    def tensors(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def copy(self) -> "SharedParamStore":
        return SharedParamStore(self.config, {
            k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in self.params.items()
        })

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, arr in arrays.items():
            self.params[k].data[...] = arr

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    @property
    def nbytes(self) -> int:
        return sum(v.data.nbytes for v in self.params.values())

    def numel(self) -> int:
        return sum(v.data.size for v in self.params.values())

    def equal(self, other: "SharedParamStore") -> bool:
        return self.params.keys() == other.params.keys() and all(
            np.array_equal(self.params[k].data, other.params[k].data) for k in self.params)


def build_model(config: ModelConfig, seed: int) -> SharedParamStore:
    """Fresh store: weights ~ N(0, 0.02), biases zero, layer-norm gains one."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            arr = np.ones(shape, dtype=np.float32)
        elif leaf.startswith("b") and len(shape) == 1:
            arr = np.zeros(shape, dtype=np.float32)
        else:
            arr = (rng.standard_normal(shape) * 0.02).astype(np.float32)
        params[name] = Tensor(arr, requires_grad=True, name=name)
    return SharedParamStore(config, params)


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    ids: np.ndarray
    lengths: np.ndarray

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.lengths = np.asarray(self.lengths, dtype=np.int64)
        if self.ids.ndim != 2 or self.lengths.shape != (self.ids.shape[0],):
            raise ValueError(f"batch ids {self.ids.shape} / lengths {self.lengths.shape} mismatch")

    @property
    def valid(self) -> np.ndarray:
        return np.arange(self.ids.shape[1])[None, :] < self.lengths[:, None]


@dataclass
class ModelOutputs:
    logits: Tensor
    hidden: Tensor
    valid: np.ndarray
    relations: dict[str, Tensor] | None = None


def _as_batch(batch) -> Batch:
    if isinstance(batch, Batch):
        return batch
    ids, lengths = batch
    return Batch(ids, lengths)


def _pad_bias(valid: np.ndarray, dtype) -> np.ndarray:
    return np.where(valid, 0.0, PAD_BIAS).astype(dtype)


def _attention(x: Tensor, wq, bq, wk, bk, wv, bv, n_heads: int, d_head: int,
               key_bias: np.ndarray, gate: Tensor | None) -> Tensor:
    B, L, _ = x.shape

    def heads(t: Tensor) -> Tensor:
        return T.transpose(T.reshape(t, (B, L, n_heads, d_head)), (0, 2, 1, 3))

    q = heads(x @ wq + bq)
    k = heads(x @ wk + bk)
    v = heads(x @ wv + bv)
    scores = T.scale(q @ T.swapaxes(k, -1, -2), 1.0 / math.sqrt(d_head))
    att = T.softmax(T.add(scores, Tensor(key_bias)), axis=-1)
    ctx = att @ v
    if gate is not None:
        ctx = ctx * T.reshape(gate, (1, n_heads, 1, 1))
    return T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (B, L, n_heads * d_head))


def forward(store: SharedParamStore, mask: StructureMask, batch, want_relations: bool = False,
            relation_heads: int = 1, mode: str = "compact",
            gates: dict[str, list[Tensor]] | None = None) -> ModelOutputs:
    """Run the encoder under ``mask``.

    ``gates`` (dense mode only) supplies per-layer gate tensors
    ``{"heads": [(h,)...], "neurons": [(d,)...]}`` replacing the mask bits, so
    their gradients can be read after ``backward``.
    """
    cfg = store.config
    mask.check(cfg)
    batch = _as_batch(batch)
    if mode not in ("compact", "dense"):
        raise ValueError(f"unknown forward mode {mode!r}")
    if gates is not None and mode != "dense":
        raise ValueError("gates require dense mode")
    ids = batch.ids
    Bsz, L = ids.shape
    if L > cfg.max_len or np.any(batch.lengths > cfg.max_len) or np.any(batch.lengths < 1):
        raise ValueError(f"sequence lengths must lie in [1, {cfg.max_len}]")
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab):
        raise ValueError(f"token ids must lie in [0, {cfg.vocab})")
    P = store.params
    dtype = P["tok_emb"].dtype
    valid = batch.valid
    key_bias = _pad_bias(valid, dtype)[:, None, None, :]
    dh = cfg.d_head

    x = T.embedding(P["tok_emb"], ids) + T.take(P["pos_emb"], np.arange(L), axis=0)
    for l in range(cfg.layers):
        p = f"layers.{l}."
        if not mask.skip_attn[l]:
            h = T.layer_norm(x, P[p + "ln1.g"], P[p + "ln1.b"])
            w = [P[p + n] for n in ("attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv",
                                    "attn.bv", "attn.wo")]
            if mode == "dense":
                gate = gates["heads"][l] if gates else Tensor(mask.self_heads[l].astype(dtype))
                ctx = _attention(h, *w[:6], cfg.heads, dh, key_bias, gate)
                wo = w[6]
            else:
                kept = mask.kept_heads(l)
                if len(kept) == cfg.heads:
                    ctx = _attention(h, *w[:6], cfg.heads, dh, key_bias, None)
                    wo = w[6]
                else:
                    cols = mask.head_columns(l, dh)
                    sliced = [T.take(t, cols, axis=-1) for t in w[:6]]
                    ctx = _attention(h, *sliced, len(kept), dh, key_bias, None)
                    wo = T.take(w[6], cols, axis=0)
            x = x + (ctx @ wo + P[p + "attn.bo"])
        if not mask.skip_ffn[l]:
            h = T.layer_norm(x, P[p + "ln2.g"], P[p + "ln2.b"])
            w1, b1, w2 = P[p + "ffn.w1"], P[p + "ffn.b1"], P[p + "ffn.w2"]
            if mode == "dense":
                gate = gates["neurons"][l] if gates else Tensor(mask.ffn_neurons[l].astype(dtype))
                a = T.gelu(h @ w1 + b1) * gate
            else:
                kept = mask.kept_neurons(l)
                if len(kept) != cfg.d_ffn:
                    w1, b1 = T.take(w1, kept, axis=-1), T.take(b1, kept, axis=-1)
                    w2 = T.take(w2, kept, axis=0)
                a = T.gelu(h @ w1 + b1)
            x = x + (a @ w2 + P[p + "ffn.b2"])

    hidden = T.layer_norm(x, P["ln_f.g"], P["ln_f.b"])
    pooled = T.reshape(T.split(hidden, [1, L - 1], axis=1)[0] if L > 1 else hidden, (Bsz, cfg.d_model))
    logits = pooled @ P["cls.w"] + P["cls.b"]

    relations = None
    if want_relations:
        relations = relation_matrices(store, hidden, valid, relation_heads)
    return ModelOutputs(logits=logits, hidden=hidden, valid=valid, relations=relations)


def relation_matrices(store: SharedParamStore, hidden: Tensor, valid: np.ndarray,
                      relation_heads: int) -> dict[str, Tensor]:
    """Scaled dot-product self-relations of the auxiliary Q/K/V projections.

    Returns ``{"q","k","v"}`` each shaped (relation_heads, batch, len, len).
    """
    A = store.config.aux_width
    if relation_heads < 1 or A % relation_heads:
        raise ValueError(f"relation_heads={relation_heads} must divide aux width {A}")
    P = store.params
    B, L, _ = hidden.shape
    dr = A // relation_heads
    bias = _pad_bias(valid, hidden.dtype)[None, :, None, :]
    out = {}
    for key in ("q", "k", "v"):
        a = hidden @ P[f"aux.w{key}"] + P[f"aux.b{key}"]
        a = T.transpose(T.reshape(a, (B, L, relation_heads, dr)), (2, 0, 1, 3))
        s = T.scale(a @ T.swapaxes(a, -1, -2), 1.0 / math.sqrt(dr))
        out[key] = T.softmax(T.add(s, Tensor(bias)), axis=-1)
    return out


def predict(store: SharedParamStore, mask: StructureMask, ids: np.ndarray, lengths: np.ndarray,
            chunk: int = 256) -> np.ndarray:
    """Logits for a whole array of examples, computed without a graph."""
    out = []
    with T.no_grad():
        for s in range(0, len(ids), chunk):
            o = forward(store, mask, Batch(ids[s:s + chunk], lengths[s:s + chunk]))
            out.append(o.logits.data)
    return np.concatenate(out, axis=0) if out else np.zeros((0, store.config.n_classes))


# ---------------------------------------------------------------------------
# parameter accounting
# ---------------------------------------------------------------------------

def per_head_params(cfg: ModelConfig) -> int:
    # Q, K, V columns with biases plus the W^O rows
    return 3 * (cfg.d_model * cfg.d_head + cfg.d_head) + cfg.d_head * cfg.d_model


def per_neuron_params(cfg: ModelConfig) -> int:
    return cfg.d_model + 1 + cfg.d_model


def module_overhead(cfg: ModelConfig) -> int:
    # output bias + pre-norm gain/bias; present only while the module is not skipped
    return 3 * cfg.d_model


def param_count(config: ModelConfig, mask: StructureMask) -> tuple[int, int]:
    """(transformer params surviving under ``mask``, embedding params)."""
    mask.check(config)
    heads = mask.self_heads.sum(axis=1)
    neurons = mask.ffn_neurons.sum(axis=1)
    trm = 0
    for l in range(config.layers):
        if heads[l]:
            trm += int(heads[l]) * per_head_params(config) + module_overhead(config)
        if neurons[l]:
            trm += int(neurons[l]) * per_neuron_params(config) + module_overhead(config)
    emb = (config.vocab + config.max_len) * config.d_model
    return trm, emb


def scale_of(config: ModelConfig, mask: StructureMask) -> float:
    full, _ = param_count(config, StructureMask.ones(config))
    kept, _ = param_count(config, mask)
    return kept / full


def visible_params(config: ModelConfig, mask: StructureMask) -> dict[str, np.ndarray | None]:
    """Boolean masks of the store entries a candidate actually uses.

    ``None`` means the whole array is visible.
    """
    out: dict[str, np.ndarray | None] = {}
    shapes = param_shapes(config)
    for name in shapes:
        out[name] = None
    D, dh = config.d_model, config.d_head
    for l in range(config.layers):
        p = f"layers.{l}."
        cols = np.zeros(D, dtype=bool)
        cols[mask.head_columns(l, dh)] = True
        attn_on = not mask.skip_attn[l]
        for n in ("attn.wq", "attn.wk", "attn.wv"):
            out[p + n] = np.broadcast_to(cols[None, :], (D, D)).copy()
        for n in ("attn.bq", "attn.bk", "attn.bv"):
            out[p + n] = cols.copy()
        out[p + "attn.wo"] = np.broadcast_to(cols[:, None], (D, D)).copy()
        for n in ("attn.bo", "ln1.g", "ln1.b"):
            out[p + n] = np.full(D, attn_on)
        neu = mask.ffn_neurons[l]
        ffn_on = not mask.skip_ffn[l]
        out[p + "ffn.w1"] = np.broadcast_to(neu[None, :], shapes[p + "ffn.w1"]).copy()
        out[p + "ffn.b1"] = neu.copy()
        out[p + "ffn.w2"] = np.broadcast_to(neu[:, None], shapes[p + "ffn.w2"]).copy()
        for n in ("ffn.b2", "ln2.g", "ln2.b"):
            out[p + n] = np.full(D, ffn_on)
    return out


def physically_pruned(store: SharedParamStore, mask: StructureMask) -> dict:
    """Per-layer weight arrays with masked heads/neurons deleted.

    Returned as plain numpy arrays (float64) together with kept counts; used to
    cross-check masked forwards against a genuinely smaller network.
    """
    cfg = store.config
    a = {k: v.data.astype(np.float64) for k, v in store.items()}
    layers = []
    for l in range(cfg.layers):
        p = f"layers.{l}."
        cols = mask.head_columns(l, cfg.d_head)
        keep_n = mask.kept_neurons(l)
        layers.append({
            "n_heads": len(mask.kept_heads(l)),
            "ln1": (a[p + "ln1.g"], a[p + "ln1.b"]),
            "wq": a[p + "attn.wq"][:, cols], "bq": a[p + "attn.bq"][cols],
            "wk": a[p + "attn.wk"][:, cols], "bk": a[p + "attn.bk"][cols],
            "wv": a[p + "attn.wv"][:, cols], "bv": a[p + "attn.bv"][cols],
            "wo": a[p + "attn.wo"][cols, :], "bo": a[p + "attn.bo"],
            "ln2": (a[p + "ln2.g"], a[p + "ln2.b"]),
            "w1": a[p + "ffn.w1"][:, keep_n], "b1": a[p + "ffn.b1"][keep_n],
            "w2": a[p + "ffn.w2"][keep_n, :], "b2": a[p + "ffn.b2"],
        })
    return {"layers": layers, "arrays": a}


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_MAGIC = b"MDCKPT01"


def save_checkpoint(store: SharedParamStore, path, extra: dict | None = None) -> None:
    """Write ``MAGIC | u64 header length | JSON header | raw little-endian f32``."""
    entries = []
    offset = 0
    blobs = []
    for name, t in store.items():
        arr = np.ascontiguousarray(t.data, dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "float32",
                        "offset": offset, "nbytes": arr.nbytes})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = {"config": store.config.to_dict(), "tensors": entries, "extra": extra or {}}
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<Q", len(raw)))
        f.write(raw)
        for b in blobs:
            f.write(b)


def load_checkpoint(path) -> tuple[SharedParamStore, dict]:
    data = Path(path).read_bytes()
    if data[:8] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16:16 + hlen].decode("utf-8"))
    base = 16 + hlen
    params = {}
    for e in header["tensors"]:
        if e["dtype"] != "float32":
            raise ValueError(f"unsupported dtype {e['dtype']}")
        start = base + e["offset"]
        arr = np.frombuffer(data[start:start + e["nbytes"]], dtype="<f4").reshape(e["shape"])
        params[e["name"]] = Tensor(arr.astype(np.float32), requires_grad=True, name=e["name"])
    cfg = ModelConfig.from_dict(header["config"])
    return SharedParamStore(cfg, params), header.get("extra", {})
