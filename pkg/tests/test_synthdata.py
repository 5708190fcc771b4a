import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from xdomain.numcore import Rng
from xdomain.synthdata import (DatasetFormatError, DatasetTruncatedError, DatasetVersionError, DomainDataset,
                               ShiftSpec, class_means, corrupt_pairs, generate_domain_pair, load_dataset,
                               save_dataset, shift_map, true_positive_pairs)

SMALL = ShiftSpec(samples_per_class=30)


def nearest_mean_accuracy(train: DomainDataset, test: DomainDataset) -> float:
    means = np.stack([train.samples[train.labels == c].mean(axis=0) for c in range(train.classes)])
    d = ((test.samples[:, None, :] - means[None]) ** 2).sum(axis=-1)
    return float(np.mean(d.argmin(axis=1) == test.labels))


def test_shapes_and_balance():
    src, tgt = generate_domain_pair(SMALL, Rng(0))
    for ds in (src, tgt):
        assert ds.samples.shape == (120, 16 * 12)
        assert np.bincount(ds.labels).tolist() == [30] * 4
    assert (src.domain, tgt.domain) == ("source", "target")


def test_zero_shift_gives_same_distribution():
    spec = ShiftSpec(samples_per_class=400, rotation=0.0, translation=0.0, scale=1.0)
    a, b = shift_map(spec)
    assert np.array_equal(a, np.eye(12)) and np.array_equal(b, np.zeros(12))
    src, tgt = generate_domain_pair(spec, Rng(1))
    for c in range(4):
        gap = src.samples[src.labels == c].mean(axis=0) - tgt.samples[tgt.labels == c].mean(axis=0)
        assert np.max(np.abs(gap)) < 5 * spec.noise_sigma / math.sqrt(400)


def test_fixed_seed_is_reproducible():
    a = generate_domain_pair(SMALL, Rng(3))
    b = generate_domain_pair(SMALL, Rng(3))
    c = generate_domain_pair(SMALL, Rng(4))
    assert all(np.array_equal(x.samples, y.samples) for x, y in zip(a, b))
    assert not np.array_equal(a[0].samples, c[0].samples)


def test_large_shift_hurts_source_classifier():
    spec = ShiftSpec(samples_per_class=100, noise_sigma=0.3, rotation=2.5, translation=3.0)
    src, tgt = generate_domain_pair(spec, Rng(5))
    held_out, _ = generate_domain_pair(spec, Rng(6))
    on_source = nearest_mean_accuracy(src, held_out)
    on_target = nearest_mean_accuracy(src, tgt)
    assert on_target < on_source - 0.2


def test_background_tokens_share_means():
    spec = ShiftSpec()
    means = class_means(spec)
    shared = np.all(means == means[0:1], axis=(0, 2))
    assert shared.sum() == spec.shared_tokens


@pytest.mark.parametrize("bad", [dict(rotation=math.pi), dict(noise_sigma=0.0), dict(class_count=0),
                                 dict(shared_tokens=16), dict(scale=0.0)])
def test_degenerate_spec_rejected(bad):
    with pytest.raises(ValueError):
        generate_domain_pair(ShiftSpec(**bad), Rng(0))


def test_dataset_validation():
    with pytest.raises(ValueError):
        DomainDataset(np.zeros((2, 5)), [0, 1], "source", 2, 2, 3)
    with pytest.raises(ValueError):
        DomainDataset(np.zeros((2, 6)), [0, 2], "source", 2, 2, 3)


# ------------------------------------------------------------------- pairs

def _clean(seed=0, per_class=25):
    src, tgt = generate_domain_pair(ShiftSpec(samples_per_class=per_class), Rng(seed))
    return src, tgt, true_positive_pairs(src, tgt, Rng(seed, "pairs"))


def test_true_positive_pairs_are_label_consistent():
    src, tgt, pairs = _clean()
    assert np.array_equal(pairs.label, tgt.labels[pairs.target_idx])
    assert np.array_equal(pairs.label, src.labels[pairs.source_idx])


def test_corrupt_zero_is_identity_and_one_is_all_cross_class():
    _, tgt, pairs = _clean()
    same = corrupt_pairs(pairs, 0.0, Rng(1), tgt.labels)
    assert np.array_equal(same.target_idx, pairs.target_idx)
    full = corrupt_pairs(pairs, 1.0, Rng(1), tgt.labels)
    assert np.all(tgt.labels[full.target_idx] != full.label)


def test_corrupt_half_of_hundred():
    _, tgt, pairs = _clean(per_class=25)
    assert len(pairs) == 100
    out = corrupt_pairs(pairs, 0.5, Rng(2), tgt.labels)
    assert int(np.sum(tgt.labels[out.target_idx] != out.label)) == 50


@given(st.floats(0.0, 1.0), st.integers(0, 10 ** 6))
def test_corrupt_changes_exact_count_and_only_targets(ratio, seed):
    _, tgt, pairs = _clean(per_class=10)
    out = corrupt_pairs(pairs, ratio, Rng(seed), tgt.labels)
    assert int(np.sum(out.target_idx != pairs.target_idx)) == math.ceil(ratio * len(pairs) - 1e-9)
    assert np.array_equal(out.source_idx, pairs.source_idx) and np.array_equal(out.label, pairs.label)


def test_corrupt_ratio_range():
    _, tgt, pairs = _clean(per_class=5)
    with pytest.raises(ValueError):
        corrupt_pairs(pairs, 1.5, Rng(0), tgt.labels)


# --------------------------------------------------------------------- I/O

def test_round_trip_bit_identical(tmp_path):
    src, tgt = generate_domain_pair(SMALL, Rng(7))
    for ds in (src, tgt):
        save_dataset(tmp_path / "d.bin", ds)
        back = load_dataset(tmp_path / "d.bin")
        assert back.samples.tobytes() == ds.samples.tobytes()
        assert np.array_equal(back.labels, ds.labels) and back.domain == ds.domain
        assert (back.classes, back.tokens, back.patch_dim) == (ds.classes, ds.tokens, ds.patch_dim)


def test_truncated_file(tmp_path):
    src, _ = generate_domain_pair(SMALL, Rng(7))
    save_dataset(tmp_path / "d.bin", src)
    raw = (tmp_path / "d.bin").read_bytes()
    for cut in (20, len(raw) - 1):
        (tmp_path / "t.bin").write_bytes(raw[:cut])
        with pytest.raises(DatasetTruncatedError):
            load_dataset(tmp_path / "t.bin")


def test_wrong_magic_and_version(tmp_path):
    src, _ = generate_domain_pair(SMALL, Rng(7))
    save_dataset(tmp_path / "d.bin", src)
    raw = bytearray((tmp_path / "d.bin").read_bytes())
    (tmp_path / "m.bin").write_bytes(b"NOTDATA!" + raw[8:])
    with pytest.raises(DatasetFormatError):
        load_dataset(tmp_path / "m.bin")
    raw[8] = 99
    (tmp_path / "v.bin").write_bytes(bytes(raw))
    with pytest.raises(DatasetVersionError):
        load_dataset(tmp_path / "v.bin")


def test_csv_export(tmp_path):
    src, _ = generate_domain_pair(ShiftSpec(samples_per_class=2), Rng(0))
    src.to_csv(tmp_path / "s.csv")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0].startswith("label,x0,x1") and len(lines) == 9
    assert [float(v) for v in lines[1].split(",")[1:]] == src.samples[0].tolist()
