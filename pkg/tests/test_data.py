import itertools
import os
import struct

import numpy as np
import pytest

from mlrn.data import (
    CIFAR_STATS,
    MAX_SHIFT,
    DataFormatError,
    Dataset,
    Image,
    augment_batch,
    augment_shift_flip,
    batches,
    load_cifar,
    normalize,
    write_cifar,
)

SHIFTS = list(itertools.product(range(-4, 5), repeat=2))


def independent_first_mean(path, head):
    """Decode record 0 with struct alone and average its pixel bytes."""
    with open(path, "rb") as fh:
        rec = fh.read(head + 3072)
    pixels = struct.unpack(f"{head}B3072B", rec)[head:]
    return sum(pixels) / 3072 / 255.0


@pytest.fixture
def img(rng):
    return rng.uniform(0, 1, (3, 32, 32))


@pytest.fixture(scope="module")
def cifar10_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("c10") / "cifar-10-batches-bin"
    r = np.random.default_rng(0)
    for name in [f"data_batch_{i}.bin" for i in range(1, 6)] + ["test_batch.bin"]:
        write_cifar(root, r.integers(0, 256, (10000, 3, 32, 32), dtype=np.uint8), r.integers(0, 10, 10000), "cifar10", name)
    return root


@pytest.fixture(scope="module")
def cifar100_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("c100")
    r = np.random.default_rng(1)
    for name, n in (("train.bin", 50000), ("test.bin", 10000)):
        write_cifar(root, r.integers(0, 256, (n, 3, 32, 32), dtype=np.uint8), r.integers(0, 100, n), "cifar100",
                    name, coarse_labels=r.integers(0, 20, n))
    return root


class TestLoad:
    def test_cifar10_counts(self, cifar10_dir):
        assert len(load_cifar(cifar10_dir, "cifar10", "train")) == 50000
        assert len(load_cifar(cifar10_dir, "cifar10", "test")) == 10000
        # parent directory works too
        assert len(load_cifar(cifar10_dir.parent, "cifar10", "test")) == 10000

    def test_cifar10_file_is_3073_byte_records(self, cifar10_dir):
        assert (cifar10_dir / "test_batch.bin").stat().st_size == 10000 * 3073

    def test_cifar100_counts_and_labels(self, cifar100_dir):
        tr = load_cifar(cifar100_dir, "cifar100", "train")
        te = load_cifar(cifar100_dir, "cifar100", "test")
        assert (len(tr), len(te)) == (50000, 10000)
        raw = (cifar100_dir / "test.bin").read_bytes()[:3074]
        assert te.coarse_labels[0] == raw[0] and te.labels[0] == raw[1]
        assert np.array_equal(te.images[0].ravel(), np.frombuffer(raw[2:], np.uint8))
        assert tr.class_count == 100

    def test_first_image_mean_independent(self, cifar10_dir):
        ds = load_cifar(cifar10_dir, "cifar10", "train")
        expect = independent_first_mean(cifar10_dir / "data_batch_1.bin", 1)
        assert ds[0].pixels.mean() == pytest.approx(expect, abs=1e-12)

    def test_plane_order(self, tmp_path):
        px = np.zeros((1, 3, 32, 32), np.uint8)
        px[0, 0, 0, 1] = 10  # red plane, row 0, col 1
        px[0, 2, 31, 31] = 20  # blue plane, last pixel
        f = write_cifar(tmp_path, np.repeat(px, 10000, 0), np.zeros(10000, int), "cifar10", "test_batch.bin")
        raw = f.read_bytes()
        assert raw[1 + 1] == 10 and raw[3072] == 20
        ds = load_cifar(tmp_path, "cifar10", "test")
        assert ds.images[0, 0, 0, 1] == 10 and ds.images[0, 2, 31, 31] == 20

    def test_wrong_length_reports_bytes(self, tmp_path):
        (tmp_path / "test_batch.bin").write_bytes(b"\0" * 3073 * 9999)
        with pytest.raises(DataFormatError, match=r"expected 30730000 bytes, got 30726927"):
            load_cifar(tmp_path, "cifar10", "test")

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_cifar(tmp_path, "cifar10", "test")

    def test_image_in_unit_range(self, cifar10_dir):
        im = load_cifar(cifar10_dir, "cifar10", "test")[3]
        assert isinstance(im, Image)
        assert im.pixels.shape == (3, 32, 32)
        assert 0.0 <= im.pixels.min() and im.pixels.max() <= 1.0

    def test_env_fallback(self, cifar10_dir, monkeypatch):
        monkeypatch.setenv("MLRN_DATA", str(cifar10_dir))
        assert len(load_cifar(None, "cifar10", "test")) == 10000


class TestAugment:
    def test_identity(self, img):
        np.testing.assert_array_equal(augment_shift_flip(img, 0, 0, False), img)

    def test_identity_preserves_multiset(self, img):
        out = augment_shift_flip(img, 0, 0, False)
        np.testing.assert_array_equal(np.sort(out.ravel()), np.sort(img.ravel()))

    def test_shift_dx4(self, img):
        out = augment_shift_flip(img, 4, 0, False)
        # content moves left by 4: column x holds input column x + 4
        np.testing.assert_array_equal(out[:, :, :28], img[:, :, 4:])
        assert not out[:, :, 28:].any()

    @pytest.mark.parametrize("dx,dy", SHIFTS)
    def test_all_81_shifts(self, img, dx, dy):
        out = augment_shift_flip(img, dx, dy, False)
        for y in range(32):
            for x in range(32):
                sy, sx = y + dy, x + dx
                want = img[:, sy, sx] if 0 <= sy < 32 and 0 <= sx < 32 else 0.0
                np.testing.assert_array_equal(out[:, y, x], want)
        assert 0.0 <= out.min() and out.max() <= 1.0
        flipped = augment_shift_flip(img, dx, dy, True)
        np.testing.assert_array_equal(flipped, out[:, :, ::-1])
        np.testing.assert_array_equal(flipped[:, :, ::-1], out)  # double flip is identity

    def test_flip_involution(self, img):
        np.testing.assert_array_equal(augment_shift_flip(augment_shift_flip(img, 0, 0, True), 0, 0, True), img)

    @pytest.mark.parametrize("dy", range(-4, 5))
    def test_flip_commutes_with_dy(self, img, dy):
        a = augment_shift_flip(augment_shift_flip(img, 0, dy, False), 0, 0, True)
        b = augment_shift_flip(augment_shift_flip(img, 0, 0, True), 0, dy, False)
        np.testing.assert_array_equal(a, b)

    @pytest.mark.parametrize("dx,dy", [(5, 0), (0, -5), (9, 9)])
    def test_too_large(self, img, dx, dy):
        with pytest.raises(ValueError):
            augment_shift_flip(img, dx, dy, False)

    def test_image_wrapper(self, img):
        out = augment_shift_flip(Image(img, 3), 1, 1, True)
        assert isinstance(out, Image) and out.label == 3

    def test_batch_matches_single(self, rng):
        x = rng.uniform(0, 1, (20, 3, 32, 32))
        dx, dy = rng.integers(-4, 5, 20), rng.integers(-4, 5, 20)
        flip = rng.random(20) < 0.5
        out = augment_batch(x, dx, dy, flip)
        for i in range(20):
            np.testing.assert_array_equal(out[i], augment_shift_flip(x[i], int(dx[i]), int(dy[i]), bool(flip[i])))


class TestNormalize:
    def test_identity(self, img):
        np.testing.assert_array_equal(normalize(img, (0, 0, 0), (1, 1, 1)), img)

    def test_mean_image_to_zero(self):
        mean, std = CIFAR_STATS["cifar10"]
        x = np.broadcast_to(np.array(mean).reshape(3, 1, 1), (3, 32, 32))
        np.testing.assert_allclose(normalize(x, mean, std), 0.0, atol=1e-15)

    def test_zero_fill_becomes_negative_mean_over_std(self, img):
        mean, std = CIFAR_STATS["cifar10"]
        out = normalize(augment_shift_flip(img, 4, 0, False), mean, std)
        np.testing.assert_allclose(out[:, 0, 31], -np.array(mean) / np.array(std))

    @pytest.mark.skipif(not os.environ.get("MLRN_DATA"), reason="real CIFAR-10 not available (set MLRN_DATA)")
    def test_stats_recomputed_by_oracle(self):
        ds = load_cifar(os.environ["MLRN_DATA"], "cifar10", "train")
        # full pass, channel by channel, in exact integer arithmetic
        means = [int(ds.images[:, c].sum(dtype=np.int64)) / ds.images[:, c].size / 255 for c in range(3)]
        np.testing.assert_allclose(means, CIFAR_STATS["cifar10"][0], atol=1e-3)


class TestBatches:
    def make(self, n):
        return Dataset.from_arrays(np.zeros((n, 3, 32, 32), np.uint8), np.arange(n) % 10)

    def test_counts(self):
        assert sum(1 for _ in batches(self.make(50000), 10, 0, augment=False, normalized=False)) == 5000

    def test_partial_last(self):
        sizes = [len(y) for _, y in batches(self.make(17), 10, 0)]
        assert sizes == [10, 7]

    def test_visits_every_index_once(self):
        ds = Dataset.from_arrays(np.zeros((103, 3, 32, 32), np.uint8), np.arange(103))
        seen = np.concatenate([y for _, y in batches(ds, 10, 5, augment=False)])
        assert sorted(seen.tolist()) == list(range(103))
        assert seen.tolist() != list(range(103))

    def test_same_seed_same_stream(self, rng):
        ims = rng.integers(0, 256, (30, 3, 32, 32)).astype(np.uint8)
        ds = Dataset.from_arrays(ims, np.arange(30))
        a = list(batches(ds, 7, 11))
        b = list(batches(ds, 7, 11))
        for (xa, ya), (xb, yb) in zip(a, b):
            assert xa.tobytes() == xb.tobytes() and np.array_equal(ya, yb)
        c = list(batches(ds, 7, 12))
        assert any(not np.array_equal(ya, yc) for (_, ya), (_, yc) in zip(a, c))

    def test_shared_generator_reshuffles(self):
        ds = Dataset.from_arrays(np.zeros((50, 3, 32, 32), np.uint8), np.arange(50))
        g = np.random.default_rng(0)
        e1 = np.concatenate([y for _, y in batches(ds, 10, g, augment=False)])
        e2 = np.concatenate([y for _, y in batches(ds, 10, g, augment=False)])
        assert not np.array_equal(e1, e2)

    def test_augment_stays_in_range(self, rng):
        ds = Dataset.from_arrays(rng.integers(0, 256, (20, 3, 32, 32)).astype(np.uint8), np.zeros(20, int))
        for x, _ in batches(ds, 8, 0, normalized=False):
            assert x.min() >= 0 and x.max() <= 1 and x.dtype == np.float32

    def test_no_shuffle_order(self):
        ds = self.make(25)
        ys = np.concatenate([y for _, y in batches(ds, 10, 0, shuffle=False, augment=False)])
        np.testing.assert_array_equal(ys, np.arange(25) % 10)

    def test_bad_batch_size(self):
        with pytest.raises(ValueError):
            next(batches(self.make(3), 0))

    def test_draw_order(self):
        # permutation first, then dx, dy, flip per batch from the same stream
        ims = np.random.default_rng(3).integers(0, 256, (6, 3, 32, 32)).astype(np.uint8)
        ds = Dataset.from_arrays(ims, np.arange(6))
        (x, y), = list(batches(ds, 6, 9, normalized=False))
        r = np.random.default_rng(9)
        order = r.permutation(6)
        dx, dy = r.integers(-MAX_SHIFT, MAX_SHIFT + 1, 6), r.integers(-MAX_SHIFT, MAX_SHIFT + 1, 6)
        flip = r.random(6) < 0.5
        np.testing.assert_array_equal(y, order)
        for i in range(6):
            want = augment_shift_flip(ims[order[i]] / 255.0, int(dx[i]), int(dy[i]), bool(flip[i]))
            np.testing.assert_allclose(x[i], want, rtol=1e-6)
