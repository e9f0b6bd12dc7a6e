import struct

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from rtfq import adapt as ad
from rtfq.datagen import (MAGIC, DatasetFormatError, DomainDataset, ShiftSpec, generate_pair, load_dataset,
                          save_dataset)
from rtfq.supernet import ArchSpec, ConfigSpace, SubnetConfig, build_supernet


def test_same_seed_byte_identical(tmp_path):
    for run in ("a", "b"):
        s, t, _ = generate_pair(4, 40, 40, seed=11)
        save_dataset(s, tmp_path / f"s_{run}")
        save_dataset(t, tmp_path / f"t_{run}")
    assert (tmp_path / "s_a").read_bytes() == (tmp_path / "s_b").read_bytes()
    assert (tmp_path / "t_a").read_bytes() == (tmp_path / "t_b").read_bytes()
    s2, _, _ = generate_pair(4, 40, 40, seed=12)
    assert not torch.equal(s.images, s2.images)


def test_shapes_labels_and_range():
    s, t, yt = generate_pair(4, 100, 60, seed=0)
    assert s.images.shape == (100, 3, 32, 32) and t.images.shape == (60, 3, 32, 32)
    assert s.labels is not None and t.labels is None and yt.shape == (60,)
    for ds in (s, t):
        assert ds.images.dtype == torch.float32
        assert ds.images.min() >= 0 and ds.images.max() <= 1
    assert s.domain == "source" and t.domain == "target"


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 7), st.integers(0, 40), st.integers(0, 10**6),
       st.floats(-1.0, 1.0), st.floats(0.1, 2.0), st.floats(0.0, 0.5), st.floats(0.0, 0.5))
def test_balance_and_range_properties(classes, extra, seed, bright, contrast, noise, texture):
    n = classes + extra
    shift = ShiftSpec((bright,) * 3, contrast, noise, texture, 3.0)
    s, t, yt = generate_pair(classes, n, n, shift, seed, size=12)
    for labels in (s.labels, yt):
        counts = np.bincount(labels.numpy(), minlength=classes)
        assert counts.max() - counts.min() <= 1
        assert np.all(np.abs(counts - n / classes) <= 1)
    assert t.images.min() >= 0 and t.images.max() <= 1
    assert torch.isfinite(t.images).all()


def test_invalid_generation_args():
    with pytest.raises(ValueError):
        generate_pair(1, 10, 10)
    with pytest.raises(ValueError):
        generate_pair(4, 3, 10)
    with pytest.raises(ValueError):
        ShiftSpec(noise_sigma=0.9)


def test_round_trip(tmp_path):
    s, t, yt = generate_pair(3, 30, 30, seed=2)
    for ds in (s, t, t.with_labels(yt)):
        path = tmp_path / "ds.rtfqds"
        save_dataset(ds, path)
        back = load_dataset(path, ds.domain, 3)
        assert torch.equal(back.images, ds.images)
        if ds.labels is None:
            assert back.labels is None
        else:
            assert torch.equal(back.labels, ds.labels)


def test_container_layout(tmp_path):
    ds = DomainDataset(torch.tensor([[[[0.25, 1.0]]]]), torch.tensor([1]), "source", 2)
    save_dataset(ds, tmp_path / "x")
    raw = (tmp_path / "x").read_bytes()
    expected = (b"RTFQDS1\x00" + struct.pack("<6I", 1, 1, 1, 1, 2, 1) + struct.pack("<2f", 0.25, 1.0)
                + struct.pack("<I", 1))
    assert raw == expected
    assert MAGIC == b"RTFQDS1\x00"


def test_bad_magic(tmp_path):
    s, _, _ = generate_pair(2, 4, 4, seed=0)
    save_dataset(s, tmp_path / "x")
    raw = bytearray((tmp_path / "x").read_bytes())
    raw[3] = ord("X")
    (tmp_path / "x").write_bytes(bytes(raw))
    with pytest.raises(DatasetFormatError, match="offset 0"):
        load_dataset(tmp_path / "x")


@pytest.mark.parametrize("cut", [4, 20, 100, 1])
def test_truncation(tmp_path, cut):
    s, _, _ = generate_pair(2, 4, 4, seed=0)
    save_dataset(s, tmp_path / "x")
    raw = (tmp_path / "x").read_bytes()
    (tmp_path / "x").write_bytes(raw[:cut] if cut < 30 else raw[:-cut])
    with pytest.raises(DatasetFormatError, match="offset"):
        load_dataset(tmp_path / "x")


def test_shape_overflow_and_trailing_bytes(tmp_path):
    header = MAGIC + struct.pack("<6I", 1, 2**31, 3, 32, 32, 0)
    (tmp_path / "big").write_bytes(header + b"\x00" * 16)
    with pytest.raises(DatasetFormatError, match="overruns"):
        load_dataset(tmp_path / "big")
    s, _, _ = generate_pair(2, 4, 4, seed=0)
    save_dataset(s, tmp_path / "x")
    (tmp_path / "x").write_bytes((tmp_path / "x").read_bytes() + b"\x00")
    with pytest.raises(DatasetFormatError, match="trailing"):
        load_dataset(tmp_path / "x")


@pytest.mark.slow
def test_null_shift_gives_equal_accuracy():
    train, _, _ = generate_pair(4, 1024, 4, ShiftSpec.none(), seed=100)
    source, target, yt = generate_pair(4, 2000, 2000, ShiftSpec.none(), seed=101)
    cfg = SubnetConfig(1.0, 32, 8)
    net = build_supernet(ArchSpec.desk(), ConfigSpace((1.0,), (32,), (8,)), 0)
    state = ad.new_state(net, lr=0.05, batch_size=64, num_random=0)
    ad.warmup(state, train, 6)
    acc_s = ad.evaluate(state, source, cfg, "source")
    acc_t = ad.evaluate(state, target, cfg, "source", yt)
    assert acc_s > 0.5
    assert abs(acc_s - acc_t) <= 0.02
