import struct

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from hdrvqa.contrastive import ModelConfig, init_model
from hdrvqa.errors import BankError, BankVersionError
from hdrvqa.features import (
    BANK_MAGIC,
    VideoFeature,
    bank_matrix,
    export_csv,
    extract_batch,
    extract_frame_feature,
    extract_video,
    load_features,
    pool_video,
    save_features,
)
from hdrvqa.media import HdrFrame, write_frames


@pytest.fixture(scope="module")
def model():
    return init_model(ModelConfig("toy-cnn"), seed=0).eval()


def test_frame_feature_length_and_determinism(model):
    rgb = np.random.default_rng(0).random((32, 32, 3)).astype(np.float32)
    a = extract_frame_feature(rgb, model)
    assert a.shape == (256,) and a.dtype == np.float32
    np.testing.assert_array_equal(a, extract_frame_feature(rgb, model))


def test_batch_matches_single(model):
    frames = [np.random.default_rng(i).random((32, 32, 3)).astype(np.float32) for i in range(3)]
    batch = extract_batch(frames, model, batch_size=2)
    for f, row in zip(frames, batch):
        np.testing.assert_allclose(row, extract_frame_feature(f, model), rtol=1e-5, atol=1e-6)


def test_features_come_from_encoder_not_projector(model):
    rgb = np.random.default_rng(1).random((32, 32, 3)).astype(np.float32)
    with torch.no_grad():
        h = model.encoder(torch.from_numpy(rgb).permute(2, 0, 1)[None])[0].numpy()
    np.testing.assert_allclose(extract_frame_feature(rgb, model)[:128], h, rtol=1e-6)


def test_centre_crop(model):
    rgb = np.random.default_rng(2).random((40, 48, 3)).astype(np.float32)
    np.testing.assert_array_equal(extract_frame_feature(rgb, model, crop=32),
                                  extract_frame_feature(rgb[4:36, 8:40], model))


def test_pool_is_mean():
    v = pool_video([np.array([1.0, 2.0]), np.array([3.0, 6.0])], "x")
    np.testing.assert_array_equal(v.vector, [2.0, 4.0])
    assert v.n_frames_pooled == 2


def test_pool_rejects_ragged():
    with pytest.raises(ValueError):
        pool_video([np.zeros(2), np.zeros(3)])


def test_extract_video_stride(tmp_path, model):
    rng = np.random.default_rng(3)
    frames = [HdrFrame.from_rgb(rng.random((16, 16, 3)).astype(np.float32)) for _ in range(5)]
    geometry = write_frames(tmp_path / "v.rgb", frames)
    v = extract_video(tmp_path / "v.rgb", geometry, model, frame_stride=2, checkpoint_hash="h")
    assert v.n_frames_pooled == 3 and v.video_id == "v" and v.checkpoint_hash == "h"
    with pytest.raises(ValueError):
        extract_video(tmp_path / "v.rgb", geometry, model, frame_stride=6)


def _bank(n=4, dim=8, seed=0):
    rng = np.random.default_rng(seed)
    return [VideoFeature(f"v{i}", rng.normal(size=dim), i + 1, "ck") for i in range(n)]


class TestBank:
    def test_round_trip_bitwise(self, tmp_path):
        bank = _bank()
        save_features(tmp_path / "b.bank", bank)
        assert load_features(tmp_path / "b.bank") == bank
        assert load_features(tmp_path / "b.bank", mmap=True) == bank

    def test_empty_bank(self, tmp_path):
        save_features(tmp_path / "e.bank", [])
        assert load_features(tmp_path / "e.bank") == []

    def test_duplicates_rejected(self, tmp_path):
        bank = _bank(2)
        with pytest.raises(BankError):
            save_features(tmp_path / "d.bank", bank + [bank[0]])

    def test_mixed_dims_rejected(self, tmp_path):
        with pytest.raises(BankError):
            save_features(tmp_path / "m.bank", _bank(2, 4) + [VideoFeature("z", np.zeros(5))])

    def test_checksum(self, tmp_path):
        save_features(tmp_path / "c.bank", _bank())
        raw = bytearray((tmp_path / "c.bank").read_bytes())
        raw[-1] ^= 0xFF
        (tmp_path / "c.bank").write_bytes(bytes(raw))
        with pytest.raises(BankError):
            load_features(tmp_path / "c.bank")

    def test_truncated(self, tmp_path):
        save_features(tmp_path / "t.bank", _bank())
        raw = (tmp_path / "t.bank").read_bytes()
        (tmp_path / "t.bank").write_bytes(raw[:-4])
        with pytest.raises(BankError):
            load_features(tmp_path / "t.bank")

    def test_version_mismatch(self, tmp_path):
        header = b'{"schema_version": 99, "dim": 0, "count": 0, "records": [], "sha256": ""}'
        (tmp_path / "v.bank").write_bytes(BANK_MAGIC + struct.pack("<Q", len(header)) + header)
        with pytest.raises(BankVersionError):
            load_features(tmp_path / "v.bank")

    def test_not_a_bank(self, tmp_path):
        (tmp_path / "x.bank").write_bytes(b"hello world, certainly not a bank")
        with pytest.raises(BankError):
            load_features(tmp_path / "x.bank")

    def test_matrix_order_and_missing(self):
        bank = _bank()
        m = bank_matrix(bank, ["v2", "v0"])
        np.testing.assert_array_equal(m[0], bank[2].vector)
        with pytest.raises(BankError):
            bank_matrix(bank, ["nope"])

    def test_csv_export(self, tmp_path):
        bank = _bank(2, 3)
        export_csv(tmp_path / "b.csv", bank)
        rows = (tmp_path / "b.csv").read_text().splitlines()
        assert rows[0] == "video_id,f0,f1,f2" and rows[1].startswith("v0,")
        assert float(rows[1].split(",")[1]) == float(bank[0].vector[0])

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            VideoFeature("x", [1.0, np.nan])

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 6), st.integers(1, 9), st.integers(0, 10 ** 6))
    def test_round_trip_property(self, n, dim, seed):
        import tempfile, os
        bank = _bank(n, dim, seed)
        with tempfile.TemporaryDirectory() as d:
            p = os.path.join(d, "p.bank")
            save_features(p, bank)
            assert load_features(p) == bank
