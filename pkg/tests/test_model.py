import math

import numpy as np
import pytest

from minidisc import tensor as T
from minidisc.model import (Batch, MaskError, ModelConfig, StructureMask, build_model, forward,
                            load_checkpoint, param_count, physically_pruned, predict, save_checkpoint,
                            scale_of)

SMALL = ModelConfig(layers=2, heads=4, d_model=8, d_ffn=16, vocab=32, max_len=12)


# ---------------------------------------------------------------------------
# float64 reference network built from physically pruned arrays
# ---------------------------------------------------------------------------

def _ln(x, g, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def _gelu(x):
    return 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x ** 3)))


def _softmax(z):
    z = z - z.max(-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(-1, keepdims=True)


def reference_logits(store, mask, ids, lengths):
    cfg = store.config
    pr = physically_pruned(store, mask)
    a = pr["arrays"]
    B, L = ids.shape
    dh = cfg.d_head
    valid = np.arange(L)[None] < lengths[:, None]
    bias = np.where(valid, 0.0, -1e9)[:, None, None, :]
    x = a["tok_emb"][ids] + a["pos_emb"][:L]
    for lay in pr["layers"]:
        nh = lay["n_heads"]
        if nh:
            h = _ln(x, *lay["ln1"])
            q, k, v = (h @ lay[w] + lay[b] for w, b in (("wq", "bq"), ("wk", "bk"), ("wv", "bv")))
            split = lambda t: t.reshape(B, L, nh, dh).transpose(0, 2, 1, 3)  # noqa: E731
            q, k, v = split(q), split(k), split(v)
            att = _softmax(q @ k.transpose(0, 1, 3, 2) / math.sqrt(dh) + bias)
            ctx = (att @ v).transpose(0, 2, 1, 3).reshape(B, L, nh * dh)
            x = x + ctx @ lay["wo"] + lay["bo"]
        if lay["w1"].shape[1]:
            h = _ln(x, *lay["ln2"])
            x = x + _gelu(h @ lay["w1"] + lay["b1"]) @ lay["w2"] + lay["b2"]
    hid = _ln(x, a["ln_f.g"], a["ln_f.b"])
    return hid[:, 0] @ a["cls.w"] + a["cls.b"]


def random_batch(cfg, rng, B=5):
    lengths = rng.integers(1, cfg.max_len + 1, size=B)
    ids = rng.integers(0, cfg.vocab, size=(B, cfg.max_len))
    return ids, lengths


def random_mask(cfg, rng, p=0.5):
    return StructureMask(rng.random((cfg.layers, cfg.heads)) < p,
                         rng.random((cfg.layers, cfg.d_ffn)) < p)


# ---------------------------------------------------------------------------
# build_model
# ---------------------------------------------------------------------------

def test_build_deterministic():
    assert build_model(SMALL, 3).equal(build_model(SMALL, 3))


def test_build_seeds_differ():
    assert not build_model(SMALL, 1).equal(build_model(SMALL, 2))


def test_build_init_statistics():
    s = build_model(ModelConfig(), 0)
    w = s["layers.0.ffn.w1"].data
    assert abs(w.std() - 0.02) < 1e-3
    assert np.all(s["layers.0.attn.bq"].data == 0) and np.all(s["ln_f.g"].data == 1)
    assert s["tok_emb"].dtype == np.float32


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(d_model=10, heads=4)
    with pytest.raises(ValueError):
        ModelConfig(layers=0)


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

def test_all_ones_equals_unmasked_reference():
    store = build_model(SMALL, 0)
    ids, lengths = random_batch(SMALL, np.random.default_rng(0))
    ones = StructureMask.ones(SMALL)
    compact = forward(store, ones, Batch(ids, lengths)).logits.data
    dense = forward(store, ones, Batch(ids, lengths), mode="dense").logits.data
    np.testing.assert_array_equal(compact, dense)
    np.testing.assert_allclose(compact, reference_logits(store, ones, ids, lengths), atol=1e-5)


@pytest.mark.parametrize("k", range(4))
def test_zeroing_one_head_equals_rebuilt_model(k):
    store = build_model(SMALL, 1)
    heads = np.ones((2, 4), dtype=bool)
    heads[0, k] = False
    mask = StructureMask(heads, np.ones((2, 16), dtype=bool))
    ids, lengths = random_batch(SMALL, np.random.default_rng(k))
    got = forward(store, mask, Batch(ids, lengths)).logits.data
    np.testing.assert_allclose(got, reference_logits(store, mask, ids, lengths), atol=1e-5)


def test_all_zero_mask_is_classifier_on_embeddings():
    store = build_model(SMALL, 2)
    ids, lengths = random_batch(SMALL, np.random.default_rng(2))
    got = forward(store, StructureMask.zeros(SMALL), Batch(ids, lengths)).logits.data
    a = {k: v.data.astype(np.float64) for k, v in store.items()}
    x = a["tok_emb"][ids[:, 0]] + a["pos_emb"][0]
    want = _ln(x, a["ln_f.g"], a["ln_f.b"]) @ a["cls.w"] + a["cls.b"]
    np.testing.assert_allclose(got, want, atol=1e-5)


def test_skipped_layer_is_exact_identity():
    cfg = SMALL
    store = build_model(cfg, 3)
    ids, lengths = random_batch(cfg, np.random.default_rng(3))
    m = np.ones((2, 4), dtype=bool)
    n = np.ones((2, 16), dtype=bool)
    m[1] = False
    n[1] = False
    skip = StructureMask(m, n)
    # a one-layer model carrying the same first-layer weights must agree bit for bit
    one = ModelConfig(layers=1, heads=4, d_model=8, d_ffn=16, vocab=32, max_len=12)
    s1 = build_model(one, 0)
    for k in s1.params:
        s1[k].data[...] = store[k].data
    a = forward(store, skip, Batch(ids, lengths)).hidden.data
    b = forward(s1, StructureMask.ones(one), Batch(ids, lengths)).hidden.data
    np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("seed", range(10))
def test_mask_equivalence_default_config(seed):
    cfg = ModelConfig()
    store = build_model(cfg, seed)
    rng = np.random.default_rng(100 + seed)
    mask = random_mask(cfg, rng, p=rng.uniform(0.2, 0.8))
    ids, lengths = random_batch(cfg, rng, B=4)
    got = forward(store, mask, Batch(ids, lengths)).logits.data
    dense = forward(store, mask, Batch(ids, lengths), mode="dense").logits.data
    want = reference_logits(store, mask, ids, lengths)
    assert np.abs(got - want).max() <= 1e-5
    assert np.abs(dense - want).max() <= 1e-5


def test_mask_shape_mismatch_rejected():
    store = build_model(SMALL, 0)
    bad = StructureMask(np.ones((2, 3), dtype=bool), np.ones((2, 16), dtype=bool))
    with pytest.raises(MaskError):
        forward(store, bad, Batch(np.zeros((1, 4), dtype=int), np.array([4])))


def test_token_range_checked():
    store = build_model(SMALL, 0)
    with pytest.raises(ValueError):
        forward(store, StructureMask.ones(SMALL), Batch(np.full((1, 4), 99), np.array([4])))


def test_padding_positions_do_not_matter():
    store = build_model(SMALL, 4)
    rng = np.random.default_rng(4)
    ids, lengths = random_batch(SMALL, rng)
    ids2 = ids.copy()
    for i, L in enumerate(lengths):
        ids2[i, L:] = rng.integers(0, SMALL.vocab, size=SMALL.max_len - L)
    mask = random_mask(SMALL, rng, 0.7)
    a = forward(store, mask, Batch(ids, lengths), want_relations=True, relation_heads=2)
    b = forward(store, mask, Batch(ids2, lengths), want_relations=True, relation_heads=2)
    np.testing.assert_allclose(a.logits.data, b.logits.data, atol=1e-6)
    valid = a.valid
    for key in ("q", "k", "v"):
        ra, rb = a.relations[key].data, b.relations[key].data
        np.testing.assert_allclose(ra[:, valid], rb[:, valid], atol=1e-6)


def test_relations_row_stochastic():
    store = build_model(SMALL, 5)
    ids, lengths = random_batch(SMALL, np.random.default_rng(5))
    out = forward(store, StructureMask.ones(SMALL), Batch(ids, lengths), want_relations=True,
                  relation_heads=4)
    for key in ("q", "k", "v"):
        r = out.relations[key].data
        assert r.shape == (4, 5, SMALL.max_len, SMALL.max_len)
        assert np.all(np.abs(r.sum(-1) - 1) <= 1e-5)
        # padded keys get no weight
        for b, L in enumerate(lengths):
            assert np.all(r[:, b, :, L:] <= 1e-6)


def test_relation_heads_must_divide():
    store = build_model(SMALL, 0)
    with pytest.raises(ValueError):
        forward(store, StructureMask.ones(SMALL), Batch(np.zeros((1, 3), dtype=int), np.array([3])),
                want_relations=True, relation_heads=3)


def test_transformer_gradient_check():
    cfg = ModelConfig(layers=2, heads=2, d_model=4, d_ffn=6, vocab=8, max_len=5)
    store = build_model(cfg, 0)
    rng = np.random.default_rng(0)
    ids, lengths = random_batch(cfg, rng, B=3)
    labels = rng.integers(0, 2, size=3)
    mask = StructureMask(np.array([[1, 0], [1, 1]], bool), np.ones((2, 6), bool))
    for p in store.tensors():
        p.data[...] = rng.standard_normal(p.shape) * 0.5
    rep = T.check_gradients(lambda: T.loss_ce(forward(store, mask, Batch(ids, lengths)).logits, labels),
                            store.tensors())
    assert rep["max_rel_err"] <= 1e-3, [p for p in rep["params"] if p["max_rel_err"] > 1e-3]


def test_predict_matches_forward():
    store = build_model(SMALL, 6)
    ids, lengths = random_batch(SMALL, np.random.default_rng(6), B=7)
    mask = StructureMask.ones(SMALL)
    np.testing.assert_array_equal(predict(store, mask, ids, lengths, chunk=3),
                                  forward(store, mask, Batch(ids, lengths)).logits.data)


# ---------------------------------------------------------------------------
# parameter accounting
# ---------------------------------------------------------------------------

def array_walk_trm(store, mask) -> int:
    """Sizes of every surviving array slice of the physically pruned network."""
    pr = physically_pruned(store, mask)
    total = 0
    for lay in pr["layers"]:
        if lay["n_heads"]:
            total += sum(lay[k].size for k in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo"))
            total += sum(t.size for t in lay["ln1"])
        if lay["w1"].shape[1]:
            total += sum(lay[k].size for k in ("w1", "b1", "w2", "b2"))
            total += sum(t.size for t in lay["ln2"])
    return total


def test_param_count_full_matches_array_walk():
    store = build_model(SMALL, 0)
    trm, emb = param_count(SMALL, StructureMask.ones(SMALL))
    layer_arrays = sum(v.data.size for k, v in store.items() if k.startswith("layers."))
    assert trm == layer_arrays == array_walk_trm(store, StructureMask.ones(SMALL))
    assert emb == store["tok_emb"].size + store["pos_emb"].size


def test_param_count_zero():
    assert param_count(SMALL, StructureMask.zeros(SMALL))[0] == 0
    assert scale_of(SMALL, StructureMask.zeros(SMALL)) == 0.0
    assert scale_of(SMALL, StructureMask.ones(SMALL)) == 1.0


def test_param_count_half_mask():
    store = build_model(SMALL, 0)
    heads = np.zeros((2, 4), dtype=bool)
    heads[:, :2] = True
    neurons = np.zeros((2, 16), dtype=bool)
    neurons[:, ::2] = True
    half = StructureMask(heads, neurons)
    trm, _ = param_count(SMALL, half)
    assert trm == array_walk_trm(store, half)
    full = array_walk_trm(store, StructureMask.ones(SMALL))
    assert scale_of(SMALL, half) == pytest.approx(trm / full, abs=0)


def test_param_count_monotone():
    rng = np.random.default_rng(0)
    mask = random_mask(SMALL, rng, 0.3)
    base = param_count(SMALL, mask)[0]
    for _ in range(20):
        h = mask.self_heads.copy()
        n = mask.ffn_neurons.copy()
        if rng.random() < 0.5:
            h[rng.integers(2), rng.integers(4)] = True
        else:
            n[rng.integers(2), rng.integers(16)] = True
        nxt = StructureMask(h, n)
        assert param_count(SMALL, nxt)[0] >= base
        mask, base = nxt, param_count(SMALL, nxt)[0]


# ---------------------------------------------------------------------------
# masks and checkpoints
# ---------------------------------------------------------------------------

def test_mask_json_round_trip_and_skip_flags():
    rng = np.random.default_rng(1)
    m = random_mask(ModelConfig(), rng)
    back = StructureMask.from_json(m.to_json())
    assert back.equals(m)
    z = StructureMask.zeros(SMALL)
    assert z.skip_attn.all() and z.skip_ffn.all()
    assert not StructureMask.ones(SMALL).skip_attn.any()


def test_mask_is_immutable():
    m = StructureMask.ones(SMALL)
    with pytest.raises(ValueError):
        m.self_heads[0, 0] = False


def test_checkpoint_round_trip_bit_exact(tmp_path):
    store = build_model(ModelConfig(), 7)
    path = tmp_path / "m.ckpt"
    save_checkpoint(store, path, extra={"note": "x"})
    back, extra = load_checkpoint(path)
    assert back.config == store.config and extra["note"] == "x"
    for k, v in store.items():
        assert back[k].data.dtype == np.float32
        assert back[k].data.tobytes() == v.data.tobytes()


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "bad"
    p.write_bytes(b"not a checkpoint at all")
    with pytest.raises(ValueError):
        load_checkpoint(p)
