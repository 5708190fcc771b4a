import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from xdomain import numcore as nc
from xdomain.attention import attend_and_project, self_attention
from xdomain.numcore import Rng, ShapeError, Tensor, finite_diff_check
from xdomain.training import cross_entropy, distillation_from_logits, evaluate
from xdomain.synthdata import DomainDataset
from xdomain.vitmodel import (CheckpointError, ModelConfig, ModelParams, flatten, forward_branch,
                              forward_cross_branch, load_checkpoint, patchify, predict, save_checkpoint)

SMALL = ModelConfig(patch_count=3, patch_dim=4, width=8, layers=2, heads=2, classes=3, init_std=0.5)


def small(cfg=SMALL, seed=0):
    return ModelParams.init(cfg, Rng(seed, "model"))


def batch(n=2, cfg=SMALL, seed=1):
    return np.random.default_rng(seed).normal(size=(n, cfg.patch_count, cfg.patch_dim))


# ---------------------------------------------------------------- patchify

def test_patchify_single_patch():
    cfg = ModelConfig(patch_count=1, patch_dim=5, width=4, heads=2)
    x = np.arange(5.0)
    assert np.array_equal(patchify(x, cfg), x[None])


def test_patchify_rows():
    cfg = ModelConfig(patch_count=2, patch_dim=4, width=4, heads=2)
    assert patchify(np.arange(1.0, 9.0), cfg).tolist() == [[1, 2, 3, 4], [5, 6, 7, 8]]


@given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 2 ** 31))
def test_patchify_round_trip(n, d, seed):
    cfg = ModelConfig(patch_count=n, patch_dim=d, width=4, heads=2)
    x = np.random.default_rng(seed).normal(size=n * d)
    assert np.array_equal(flatten(patchify(x, cfg)), x)


def test_patchify_length_mismatch():
    with pytest.raises(ShapeError):
        patchify(np.zeros(11), SMALL)


# ------------------------------------------------------------ branches

def test_config_invariants():
    with pytest.raises(ValueError):
        ModelConfig(width=10, heads=4)
    with pytest.raises(ValueError):
        ModelConfig(classes=0)


def test_branch_is_pure():
    p, x = small(), batch()
    a, _ = forward_branch(x, p)
    b, _ = forward_branch(x.copy(), p)
    assert np.array_equal(a.data, b.data)


def test_source_and_target_branches_share_weights():
    p, x = small(), batch()
    (ls, ts), (lt, tt) = forward_branch(x, p), forward_branch(x, p)
    assert np.array_equal(ls.data, lt.data)
    for a, b in zip(ts.queries + ts.keys + ts.values, tt.queries + tt.keys + tt.values):
        assert np.array_equal(a.data, b.data)


def test_trace_has_one_entry_per_layer():
    p = small()
    _, tr = forward_branch(batch(), p)
    assert len(tr) == SMALL.layers
    assert tr.layer_inputs[0].shape == (2, SMALL.sequence_length, SMALL.width)


def test_empty_encoder_classifies_embedding():
    cfg = ModelConfig(patch_count=3, patch_dim=4, width=8, layers=0, heads=2, classes=3, init_std=0.5)
    p, x = small(cfg), batch(cfg=cfg)
    logits, _ = forward_branch(x, p)
    emb = x @ p["patch_w"].data + p["patch_b"].data
    first = p["cls_token"].data + p["pos"].data[0]
    h = (first - first.mean()) / np.sqrt(first.var() + cfg.ln_eps) * p["lnf_g"].data + p["lnf_b"].data
    expected = h @ p["head_w"].data + p["head_b"].data
    assert emb.shape == (2, 3, 8)
    assert np.allclose(logits.data, np.broadcast_to(expected, (2, 3)), atol=1e-12)


def test_mean_pooling_option():
    cfg = ModelConfig(patch_count=3, patch_dim=4, width=8, layers=1, heads=2, classes=3, use_cls_token=False)
    p = small(cfg)
    assert "cls_token" not in p.tensors
    logits, tr = forward_branch(batch(cfg=cfg), p)
    assert logits.shape == (2, 3) and tr.feature.shape == (2, 8)


def test_cross_branch_output_shape():
    p = small()
    _, ts = forward_branch(batch(seed=1), p)
    _, tt = forward_branch(batch(seed=2), p)
    assert forward_cross_branch(ts, tt, p).shape == (2, SMALL.classes)


def test_cross_branch_trace_length_mismatch():
    p = small()
    _, ts = forward_branch(batch(), p)
    one = ModelConfig(patch_count=3, patch_dim=4, width=8, layers=1, heads=2, classes=3)
    _, tt = forward_branch(batch(), small(one))
    with pytest.raises(ShapeError):
        forward_cross_branch(ts, tt, p)


def _block_without_input_residual(a, p, i):
    from xdomain.vitmodel import _mlp
    return a + _mlp(a, p, i)


def test_cross_branch_one_layer_identical_traces():
    """With one layer and equal traces the cross attention is the self attention of the
    branch; the branch output differs from the self branch only by the skipped input
    residual."""
    cfg = ModelConfig(patch_count=3, patch_dim=4, width=8, layers=1, heads=2, classes=3, init_std=0.5)
    p, x = small(cfg), batch(cfg=cfg)
    _, tr = forward_branch(x, p)
    q, k, v = tr.queries[0], tr.keys[0], tr.values[0]
    assert np.array_equal(attend_and_project(q, k, v, p.attn(0)).data, tr.attn_out[0].data)
    logits, feat = forward_cross_branch(tr, tr, p, return_feature=True)
    z = _block_without_input_residual(tr.attn_out[0], p, 0)
    h = nc.layernorm(z, p["lnf_g"], p["lnf_b"], cfg.ln_eps).data[:, 0]
    assert np.allclose(feat.data, h, atol=1e-12)
    assert np.allclose(logits.data, h @ p["head_w"].data + p["head_b"].data, atol=1e-12)


def test_cross_branch_residual_rule_two_layers():
    p = small()
    _, ts = forward_branch(batch(seed=3), p)
    _, tt = forward_branch(batch(seed=4), p)
    a0 = attend_and_project(ts.queries[0], tt.keys[0], tt.values[0], p.attn(0))
    z = _block_without_input_residual(a0, p, 0)
    a1 = attend_and_project(ts.queries[1], tt.keys[1], tt.values[1], p.attn(1))
    z = _block_without_input_residual(z + a1, p, 1)
    h = nc.layernorm(z, p["lnf_g"], p["lnf_b"], SMALL.ln_eps).data[:, 0]
    expected = h @ p["head_w"].data + p["head_b"].data
    assert np.allclose(forward_cross_branch(ts, tt, p).data, expected, atol=1e-12)


def test_cross_branch_is_deterministic():
    p = small()
    _, ts = forward_branch(batch(seed=3), p)
    _, tt = forward_branch(batch(seed=4), p)
    assert np.array_equal(forward_cross_branch(ts, tt, p).data, forward_cross_branch(ts, tt, p).data)


def test_shared_classifier_updates_all_branches():
    p = small()
    _, ts = forward_branch(batch(seed=3), p)
    _, tt = forward_branch(batch(seed=4), p)
    before = [forward_branch(batch(seed=3), p)[0].data, forward_branch(batch(seed=4), p)[0].data,
              forward_cross_branch(ts, tt, p).data]
    p["head_b"].data = p["head_b"].data + np.array([[1.0, 2.0, 3.0]])
    after = [forward_branch(batch(seed=3), p)[0].data, forward_branch(batch(seed=4), p)[0].data,
             forward_cross_branch(ts, tt, p).data]
    for b, a in zip(before, after):
        assert np.allclose(a - b, [[1.0, 2.0, 3.0]], atol=1e-12)


# ------------------------------------------------------------ gradients

def test_branch_cross_entropy_gradient():
    p, x = small(), batch(3)
    y = np.array([0, 2, 1])
    err = finite_diff_check(lambda: cross_entropy(forward_branch(x, p)[0], y), p.leaves())
    assert err < 1e-4


def test_three_branch_total_loss_gradient():
    p, xs, xt = small(), batch(2, seed=5), batch(2, seed=6)
    y = np.array([1, 0])

    def loss():
        ls, ts = forward_branch(xs, p)
        lt, tt = forward_branch(xt, p)
        lst = forward_cross_branch(ts, tt, p)
        return (cross_entropy(ls, y) + cross_entropy(lt, y)
                + distillation_from_logits(lst, lt, detach_teacher=False))

    assert finite_diff_check(loss, p.leaves()) < 1e-4


def test_detached_teacher_gradient_treats_teacher_as_constant():
    p, xs, xt = small(), batch(2, seed=5), batch(2, seed=6)
    _, ts = forward_branch(xs, p)
    _, tt = forward_branch(xt, p)
    frozen = Tensor(forward_cross_branch(ts, tt, p).data)

    def with_detach():
        lt, tt_ = forward_branch(xt, p)
        _, ts_ = forward_branch(xs, p)
        lst = forward_cross_branch(ts_, tt_, p)
        return distillation_from_logits(lst, lt, detach_teacher=True)

    def with_constant():
        return distillation_from_logits(frozen, forward_branch(xt, p)[0], detach_teacher=True)

    with nc.Tape() as t1:
        l1 = with_detach()
    with nc.Tape() as t2:
        l2 = with_constant()
    g1, g2 = nc.backward(t1, l1, p.leaves()), nc.backward(t2, l2, p.leaves())
    assert l1.item() == l2.item()
    for leaf in p.leaves():
        assert np.allclose(g1[leaf], g2[leaf], atol=1e-14)
    assert finite_diff_check(with_constant, p.leaves()) < 1e-4


# -------------------------------------------------------------- predict

def _fixed_head(bias):
    p = small()
    p["head_w"].data = np.zeros_like(p["head_w"].data)
    p["head_b"].data = np.array([bias], dtype=float)
    return p


def test_predict_argmax():
    cfg = ModelConfig(patch_count=3, patch_dim=4, width=8, layers=2, heads=2, classes=2, init_std=0.5)
    p = ModelParams.init(cfg, Rng(0))
    p["head_w"].data = np.zeros_like(p["head_w"].data)
    p["head_b"].data = np.array([[0.1, 0.9]])
    assert predict(np.zeros(12), p) == 1


def test_predict_ties_go_to_lowest_class():
    assert predict(np.ones(12), _fixed_head([0.5, 0.5, 0.5])) == 0


def test_accuracy_matches_manual_count():
    p = small()
    rng = np.random.default_rng(0)
    ds = DomainDataset(rng.normal(size=(30, 12)), rng.integers(0, 3, 30), "target", 3, 3, 4)
    manual = sum(predict(x, p) == y for x, y in zip(ds.samples, ds.labels)) / 30
    assert evaluate(p, ds).accuracy == manual


# ----------------------------------------------------------- checkpoint

def test_checkpoint_round_trip_bit_exact(tmp_path):
    p = small()
    save_checkpoint(tmp_path / "m.ckpt", p)
    q = load_checkpoint(tmp_path / "m.ckpt")
    assert q.equals(p)
    save_checkpoint(tmp_path / "n.ckpt", q)
    assert (tmp_path / "m.ckpt").read_bytes() == (tmp_path / "n.ckpt").read_bytes()


def test_checkpoint_rejects_bad_magic(tmp_path):
    (tmp_path / "x").write_bytes(b"NOTAMODEL" + bytes(20))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "x")


def test_checkpoint_rejects_truncation(tmp_path):
    save_checkpoint(tmp_path / "m.ckpt", small())
    raw = (tmp_path / "m.ckpt").read_bytes()
    (tmp_path / "t.ckpt").write_bytes(raw[:-8])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "t.ckpt")


def test_params_copy_is_independent():
    p = small()
    q = p.copy()
    q["head_b"].data = q["head_b"].data + 1
    assert not q.equals(p)
    assert isinstance(q["head_b"], Tensor)


def test_self_attention_layer_matches_attention_module():
    p = small()
    x = Tensor(np.random.default_rng(0).normal(size=(1, 4, 8)))
    from xdomain.attention import project_qkv
    q, k, v = project_qkv(x, p.attn(0))
    assert np.allclose(attend_and_project(q, k, v, p.attn(0)).data, self_attention(x, p.attn(0)).data, atol=1e-14)
