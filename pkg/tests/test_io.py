import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from nasb.checkpoint import Checkpoint, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from nasb.data import (
    DatasetError,
    DatasetFile,
    augment,
    batches,
    gen_synthetic,
    load_dataset,
    load_dataset_dir,
    save_dataset,
    split_halves,
)
from nasb.formats import (
    BadMagicError,
    FormatError,
    TruncatedError,
    VersionError,
    decode_labels,
    decode_tensor,
    encode_labels,
    encode_tensor,
    read_tensor,
    write_tensor,
)


class TestTensorFormat:
    def test_layout(self):
        buf = encode_tensor(np.arange(6, dtype=np.float32).reshape(2, 3))
        assert buf[:4] == b"NTSR" and buf[4:7] == bytes([1, 0, 2])
        assert struct.unpack("<II", buf[7:15]) == (2, 3)
        assert np.frombuffer(buf[15:], "<f4").tolist() == [0, 1, 2, 3, 4, 5]

    @settings(max_examples=50, deadline=None)
    @given(
        hnp.arrays(
            st.sampled_from([np.float32, np.float64, np.int64]),
            hnp.array_shapes(min_dims=0, max_dims=4, min_side=0, max_side=5),
        )
    )
    def test_round_trip(self, arr):
        out = decode_tensor(encode_tensor(arr))
        assert out.dtype == arr.dtype and out.shape == arr.shape
        assert out.tobytes() == arr.tobytes()

    def test_bad_magic(self):
        buf = bytearray(encode_tensor(np.zeros(3, np.float32)))
        buf[0:4] = b"XXXX"
        with pytest.raises(BadMagicError):
            decode_tensor(bytes(buf))

    def test_version(self):
        buf = bytearray(encode_tensor(np.zeros(3, np.float32)))
        buf[4] = 9
        with pytest.raises(VersionError, match="version 9"):
            decode_tensor(bytes(buf))

    def test_truncation_names_offset(self):
        buf = encode_tensor(np.zeros((2, 2), np.float32))
        with pytest.raises(TruncatedError, match="byte offset 15") as e:
            decode_tensor(buf[:-1])
        assert e.value.offset == 15
        with pytest.raises(TruncatedError, match="byte offset 0"):
            decode_tensor(b"NT")

    def test_unknown_dtype(self):
        buf = bytearray(encode_tensor(np.zeros(1, np.float32)))
        buf[5] = 7
        with pytest.raises(FormatError, match="dtype code 7"):
            decode_tensor(bytes(buf))
        with pytest.raises(FormatError):
            encode_tensor(np.zeros(2, np.complex64))

    def test_trailing_bytes(self):
        with pytest.raises(FormatError, match="trailing"):
            decode_tensor(encode_tensor(np.zeros(1, np.float32)) + b"\0")

    def test_file_round_trip(self, tmp_path):
        arr = np.random.default_rng(0).normal(size=(3, 1, 4, 4)).astype(np.float32)
        write_tensor(tmp_path / "x.ntsr", arr)
        assert np.array_equal(read_tensor(tmp_path / "x.ntsr"), arr)
        assert [p.name for p in tmp_path.iterdir()] == ["x.ntsr"]


class TestLabelFormat:
    def test_round_trip(self):
        y = np.array([0, 3, 1, 2**32 - 1])
        buf = encode_labels(y)
        assert buf[:8] == b"NLBL" + struct.pack("<I", 4)
        assert decode_labels(buf).tolist() == y.tolist()

    def test_errors(self):
        with pytest.raises(FormatError):
            encode_labels([-1])
        with pytest.raises(BadMagicError):
            decode_labels(b"NTSR" + bytes(4))
        with pytest.raises(TruncatedError, match="byte offset 8"):
            decode_labels(encode_labels([1, 2])[:-2])


def _checkpoint(rng):
    return Checkpoint(
        meta={"stage": "pretrain", "epoch": 3},
        tensors={"model/w": rng.normal(size=(4, 2, 3, 3)).astype(np.float32), "optim/t": np.arange(3, dtype=np.int64)},
        genotype={"version": 1, "variant": "NASB"},
        optimizer={"weights": {"kind": "sgd", "lr": 0.1}},
        rng={"state": {"state": 2**70, "inc": 5}},
    )


class TestCheckpoint:
    def test_round_trip_bit_identical(self, tmp_path, rng):
        ck = _checkpoint(rng)
        save_checkpoint(tmp_path / "a.ckpt", ck)
        back = load_checkpoint(tmp_path / "a.ckpt")
        assert back.meta == ck.meta and back.genotype == ck.genotype
        assert back.optimizer == ck.optimizer and back.rng == ck.rng
        assert list(back.tensors) == list(ck.tensors)
        for k, v in ck.tensors.items():
            assert back.tensors[k].dtype == v.dtype and back.tensors[k].tobytes() == v.tobytes()
        assert encode_checkpoint(back) == encode_checkpoint(ck)

    def test_prefix(self, rng):
        assert list(_checkpoint(rng).with_prefix("model")) == ["w"]

    def test_every_truncation_fails(self, rng):
        buf = encode_checkpoint(_checkpoint(rng))
        for cut in range(0, len(buf), 37):
            with pytest.raises(FormatError):
                decode_checkpoint(buf[:cut])

    def test_truncation_offset(self, rng):
        buf = encode_checkpoint(_checkpoint(rng))
        with pytest.raises(TruncatedError, match=f"byte offset {len(buf) - 24}"):
            decode_checkpoint(buf[:-1])

    def test_version(self, rng):
        buf = bytearray(encode_checkpoint(_checkpoint(rng)))
        buf[4:8] = struct.pack("<I", 2)
        with pytest.raises(VersionError):
            decode_checkpoint(bytes(buf))

    def test_bad_magic_and_json(self, rng):
        buf = encode_checkpoint(_checkpoint(rng))
        with pytest.raises(BadMagicError):
            decode_checkpoint(b"NCKQ" + buf[4:])
        bad = bytearray(buf)
        bad[12] = ord("!")
        with pytest.raises(FormatError, match="JSON"):
            decode_checkpoint(bytes(bad))

    def test_empty_genotype(self):
        ck = decode_checkpoint(encode_checkpoint(Checkpoint({}, {})))
        assert ck.genotype is None and ck.tensors == {}


class TestSynthetic:
    def test_determinism(self, tmp_path):
        a = save_dataset(gen_synthetic(seed=3, samples=64), tmp_path / "a")
        b = save_dataset(gen_synthetic(seed=3, samples=64), tmp_path / "b")
        for key in a:
            assert a[key].read_bytes() == b[key].read_bytes()
        c = gen_synthetic(seed=4, samples=64)
        assert not np.array_equal(c.images, load_dataset_dir(tmp_path / "a").images)

    @pytest.mark.parametrize("difficulty", ["trivial", "easy", "hard"])
    def test_balanced(self, difficulty):
        ds = gen_synthetic(classes=3, samples=300, difficulty=difficulty, seed=1)
        assert np.bincount(ds.labels).tolist() == [100, 100, 100]
        assert ds.images.dtype == np.float32 and ds.images.shape == (300, 1, 16, 16)

    def test_trivial_nearest_mean(self):
        ds = gen_synthetic(classes=4, samples=400, difficulty="trivial", seed=0)
        x = ds.images.reshape(len(ds), -1)
        means = np.stack([x[ds.labels == k].mean(0) for k in range(4)])
        pred = np.argmin(((x[:, None] - means[None]) ** 2).sum(-1), axis=1)
        assert np.mean(pred == ds.labels) == 1.0

    def test_easy_linear_probe(self):
        """Least-squares probe on raw pixels; measured 1.0 held out at seed 0."""
        ds = gen_synthetic(classes=2, samples=2000, difficulty="easy", seed=0)
        x = ds.images.reshape(2000, -1).astype(np.float64)
        x = np.hstack([x, np.ones((2000, 1))])
        t = 2.0 * ds.labels - 1
        w = np.linalg.lstsq(x[:1000], t[:1000], rcond=None)[0]
        acc = np.mean((x[1000:] @ w > 0) == (ds.labels[1000:] == 1))
        assert acc >= 0.8

    def test_errors(self):
        with pytest.raises(DatasetError, match="pattern scale"):
            gen_synthetic(size=7)
        with pytest.raises(DatasetError):
            gen_synthetic(classes=1)
        with pytest.raises(DatasetError):
            gen_synthetic(difficulty="medium")


class TestDataset:
    def test_load_with_meta(self, tmp_path):
        ds = gen_synthetic(classes=3, samples=30, seed=0)
        paths = save_dataset(ds, tmp_path)
        back = load_dataset(paths["images"], paths["labels"])
        assert back.num_classes == 3 and json.loads(paths["meta"].read_text())["seed"] == 0
        assert np.array_equal(back.images, ds.images) and np.array_equal(back.labels, ds.labels)

    def test_validation(self):
        with pytest.raises(DatasetError, match="labels"):
            DatasetFile(np.zeros((3, 1, 8, 8)), [0, 1], 2)
        with pytest.raises(DatasetError, match="out of range"):
            DatasetFile(np.zeros((2, 1, 8, 8)), [0, 2], 2)

    def test_split(self):
        ds = gen_synthetic(samples=101, seed=0)
        train, val = split_halves(ds, 0)
        assert len(train) + len(val) == 101 and len(val) == 50
        with pytest.raises(DatasetError, match="non-empty"):
            split_halves(ds.subset([0]), 0)

    @given(st.integers(0, 50), st.integers(1, 8))
    def test_batches_cover(self, n, bs):
        idx = np.concatenate([np.zeros(0, int)] + list(batches(n, bs, np.random.default_rng(0))))
        assert sorted(idx.tolist()) == list(range(n))

    def test_augment(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(20, 2, 8, 8)).astype(np.float32)
        assert np.array_equal(augment(x, rng, pad=0, flip=False), x)
        out = augment(x, rng, pad=0, flip=True)
        flipped = [np.array_equal(o, i[:, :, ::-1]) for o, i in zip(out, x)]
        kept = [np.array_equal(o, i) for o, i in zip(out, x)]
        assert all(f or k for f, k in zip(flipped, kept)) and any(flipped) and any(kept)
        shifted = augment(x, np.random.default_rng(1), pad=2, flip=False)
        assert shifted.shape == x.shape
