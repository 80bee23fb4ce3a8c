"""Image pipeline tests.

Otsu and the component labeller are checked against brute-force oracles
written from the definitions: an exhaustive per-threshold variance scan and
a BFS flood fill. PNG writers are checked by decode round trips.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mammochrome.imaging import (
    BBox,
    CorruptImageError,
    DegenerateImageError,
    NoForegroundError,
    NotGrayscaleError,
    RawImage,
    bilinear_resize,
    crop_to_roi,
    load_png16,
    otsu_threshold,
    preprocess,
    quantize,
    read_rgb_png,
    resize_pad_normalize,
    write_gray_png,
    write_rgb_png,
)


def make_raw(pixels, bit_depth=8):
    pixels = np.asarray(pixels)
    return RawImage(width=pixels.shape[1], height=pixels.shape[0],
                    bit_depth=bit_depth, pixels=pixels)


# ---------------------------------------------------------------------------
# oracles
# ---------------------------------------------------------------------------


def otsu_oracle(pixels, bit_depth):
    """Literal scan: every threshold, explicit class masks, strict > keeps
    the smallest maximizer."""
    flat = np.asarray(pixels, dtype=np.float64).ravel()
    best_t, best_v = 0, -1.0
    for t in range((1 << bit_depth)):
        fg = flat > t
        n1 = fg.sum()
        n0 = flat.size - n1
        if n0 == 0 or n1 == 0:
            v = 0.0
        else:
            w0 = n0 / flat.size
            w1 = n1 / flat.size
            v = w0 * w1 * (flat[~fg].mean() - flat[fg].mean()) ** 2
        if v > best_v:
            best_t, best_v = t, v
    return best_t


def components_oracle(mask):
    """BFS flood fill, 4-connected, scan order labelling."""
    mask = np.asarray(mask, dtype=bool)
    seen = np.zeros_like(mask)
    comps = []
    h, w = mask.shape
    for sy in range(h):
        for sx in range(w):
            if not mask[sy, sx] or seen[sy, sx]:
                continue
            stack = [(sy, sx)]
            seen[sy, sx] = True
            cells = []
            while stack:
                y, x = stack.pop()
                cells.append((y, x))
                for ny, nx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
                    if 0 <= ny < h and 0 <= nx < w and mask[ny, nx] and not seen[ny, nx]:
                        seen[ny, nx] = True
                        stack.append((ny, nx))
            comps.append(cells)
    return comps


def largest_bbox_oracle(mask):
    comps = components_oracle(mask)
    best = max(comps, key=len)  # max keeps the first on ties
    ys = [c[0] for c in best]
    xs = [c[1] for c in best]
    return BBox(x=min(xs), y=min(ys), w=max(xs) - min(xs) + 1, h=max(ys) - min(ys) + 1), len(best)


# ---------------------------------------------------------------------------
# Otsu
# ---------------------------------------------------------------------------


class TestOtsu:
    def test_two_level_16bit_picks_smallest(self):
        px = np.zeros((4, 4), dtype=np.uint16)
        px[:, 2:] = 65535
        assert otsu_threshold(make_raw(px, 16)) == 0

    def test_constant_image_raises(self):
        with pytest.raises(DegenerateImageError):
            otsu_threshold(make_raw(np.full((3, 3), 7, dtype=np.uint8)))

    def test_bimodal_separates_modes(self):
        rng = np.random.default_rng(0)
        px = np.concatenate([
            rng.integers(10, 40, size=200),
            rng.integers(180, 220, size=200),
        ]).reshape(20, 20).astype(np.uint8)
        t = otsu_threshold(make_raw(px))
        assert 39 <= t < 180

    @settings(max_examples=120, deadline=None)
    @given(st.data())
    def test_matches_exhaustive_oracle(self, data):
        h = data.draw(st.integers(2, 10))
        w = data.draw(st.integers(2, 10))
        vals = data.draw(st.lists(st.integers(0, 255), min_size=h * w, max_size=h * w))
        px = np.array(vals, dtype=np.uint8).reshape(h, w)
        if np.all(px == px.flat[0]):
            px.flat[0] = (int(px.flat[0]) + 1) % 256
        img = make_raw(px)
        assert otsu_threshold(img) == otsu_oracle(px, 8)

    def test_matches_oracle_16bit_sparse_levels(self):
        rng = np.random.default_rng(3)
        levels = rng.integers(0, 65536, size=6)
        px = rng.choice(levels, size=(8, 8)).astype(np.uint16)
        if np.all(px == px.flat[0]):
            px[0, 0] = (int(px[0, 0]) + 1) % 65536
        # oracle restricted to informative thresholds: just below/at each level
        flat = px.astype(np.float64).ravel()
        best_t, best_v = 0, -1.0
        cands = sorted({int(v) for v in levels} | {int(v) - 1 for v in levels if v > 0} | {0})
        for t in cands:
            fg = flat > t
            if fg.all() or not fg.any():
                v = 0.0
            else:
                v = (fg.mean() * (1 - fg.mean())
                     * (flat[~fg].mean() - flat[fg].mean()) ** 2)
            if v > best_v:
                best_t, best_v = t, v
        got = otsu_threshold(make_raw(px, 16))
        # implementation scans all 65536; same variance must be attained
        fg = flat > got
        v_got = (fg.mean() * (1 - fg.mean())
                 * (flat[~fg].mean() - flat[fg].mean()) ** 2)
        assert v_got == pytest.approx(best_v, rel=1e-12)
        assert got <= best_t


# ---------------------------------------------------------------------------
# connected components / crop
# ---------------------------------------------------------------------------


class TestCrop:
    def test_single_blob_tight_box(self):
        px = np.zeros((10, 10), dtype=np.uint8)
        px[2:5, 3:8] = 200
        cropped, box = crop_to_roi(make_raw(px), 100)
        assert (box.x, box.y, box.w, box.h) == (3, 2, 5, 3)
        assert cropped.pixels.shape == (3, 5)
        assert np.all(cropped.pixels == 200)

    def test_largest_of_two_blobs_wins(self):
        px = np.zeros((12, 12), dtype=np.uint8)
        px[1:3, 1:3] = 255      # 4 pixels
        px[6:10, 6:10] = 255    # 16 pixels
        _, box = crop_to_roi(make_raw(px), 0)
        assert (box.x, box.y, box.w, box.h) == (6, 6, 4, 4)

    def test_diagonal_pixels_are_not_connected(self):
        px = np.zeros((6, 6), dtype=np.uint8)
        for i in range(4):
            px[i, i] = 255  # 4-connectivity: four separate size-1 components
        px[5, 0] = 255
        px[5, 1] = 255      # a size-2 component
        _, box = crop_to_roi(make_raw(px), 0)
        assert (box.x, box.y, box.w, box.h) == (0, 5, 2, 1)

    def test_tie_goes_to_first_in_scan_order(self):
        px = np.zeros((4, 4), dtype=np.uint8)
        px[0, 2] = 255
        px[2, 0] = 255
        _, box = crop_to_roi(make_raw(px), 0)
        assert (box.x, box.y) == (2, 0)

    def test_no_foreground_raises(self):
        px = np.full((3, 3), 5, dtype=np.uint8)
        with pytest.raises(NoForegroundError):
            crop_to_roi(make_raw(px), 5)

    @settings(max_examples=100, deadline=None)
    @given(st.data())
    def test_matches_bfs_oracle(self, data):
        h = data.draw(st.integers(2, 9))
        w = data.draw(st.integers(2, 9))
        bits = data.draw(st.lists(st.booleans(), min_size=h * w, max_size=h * w))
        mask = np.array(bits).reshape(h, w)
        if not mask.any():
            mask[0, 0] = True
        px = (mask * 255).astype(np.uint8)
        _, box = crop_to_roi(make_raw(px), 0)
        want, size = largest_bbox_oracle(mask)
        cropped, _ = crop_to_roi(make_raw(px), 0)
        assert (box.x, box.y, box.w, box.h) == (want.x, want.y, want.w, want.h)
        assert int((cropped.pixels > 0).sum()) >= size  # box may cover other comps


# ---------------------------------------------------------------------------
# resize / pad / normalize
# ---------------------------------------------------------------------------


class TestResizePad:
    def test_tall_image_pads_columns(self):
        px = np.full((100, 50), 255, dtype=np.uint8)
        out = resize_pad_normalize(make_raw(px), 64, 64)
        assert out.values.shape == (64, 64)
        body = out.values[:, 16:48]
        assert np.all(body > 0.99)
        assert np.all(out.values[:, :16] == 0.0)
        assert np.all(out.values[:, 48:] == 0.0)

    def test_wide_image_pads_rows(self):
        px = np.full((50, 100), 255, dtype=np.uint8)
        out = resize_pad_normalize(make_raw(px), 64, 64)
        assert np.all(out.values[:16, :] == 0.0)
        assert np.all(out.values[48:, :] == 0.0)
        assert np.all(out.values[16:48, :] > 0.99)

    def test_aspect_ratio_held_within_one_pixel(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            h = int(rng.integers(5, 300))
            w = int(rng.integers(5, 300))
            px = np.full((h, w), 100, dtype=np.uint8)
            out = resize_pad_normalize(make_raw(px), 64, 64)
            cols = np.flatnonzero(out.values.max(axis=0) > 0)
            rows = np.flatnonzero(out.values.max(axis=1) > 0)
            ch, cw = len(rows), len(cols)
            assert max(ch, cw) == 64
            ideal = min(64 / h, 64 / w)
            assert abs(ch - h * ideal) <= 1.0
            assert abs(cw - w * ideal) <= 1.0

    def test_max_intensity_maps_to_one(self):
        px = np.full((8, 8), 65535, dtype=np.uint16)
        out = resize_pad_normalize(make_raw(px, 16), 8, 8)
        assert np.all(out.values == 1.0)

    def test_normalization_uses_bit_depth(self):
        px8 = np.full((4, 4), 128, dtype=np.uint8)
        px16 = np.full((4, 4), 128, dtype=np.uint16)
        v8 = resize_pad_normalize(make_raw(px8), 4, 4).values[0, 0]
        v16 = resize_pad_normalize(make_raw(px16, 16), 4, 4).values[0, 0]
        assert v8 == pytest.approx(128 / 255)
        assert v16 == pytest.approx(128 / 65535)

    def test_bilinear_identity(self):
        v = np.arange(12, dtype=np.float64).reshape(3, 4)
        assert np.array_equal(bilinear_resize(v, 3, 4), v)

    def test_bilinear_known_values(self):
        v = np.array([[0.0, 1.0]])
        got = bilinear_resize(v, 1, 4)
        assert np.allclose(got, [[0.0, 0.25, 0.75, 1.0]])

    def test_bilinear_preserves_constant(self):
        v = np.full((5, 7), 0.37)
        got = bilinear_resize(v, 11, 3)
        assert np.allclose(got, 0.37)

    def test_bilinear_range_bounded(self):
        rng = np.random.default_rng(9)
        v = rng.random((6, 6))
        got = bilinear_resize(v, 17, 5)
        assert got.min() >= v.min() - 1e-12
        assert got.max() <= v.max() + 1e-12

    def test_full_preprocess_chain(self):
        px = np.zeros((120, 80), dtype=np.uint16)
        px[30:90, 20:60] = 40000
        out = preprocess(make_raw(px, 16), 64, 64)
        assert out.values.shape == (64, 64)
        assert (out.source_crop.x, out.source_crop.y) == (20, 30)
        assert (out.source_crop.w, out.source_crop.h) == (40, 60)
        assert out.values.max() == pytest.approx(40000 / 65535)


# ---------------------------------------------------------------------------
# PNG round trips
# ---------------------------------------------------------------------------


class TestPngIO:
    def test_gray8_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        px = rng.integers(0, 256, size=(13, 9)).astype(np.uint8)
        p = tmp_path / "g8.png"
        write_gray_png(make_raw(px), p)
        back = load_png16(p)
        assert back.bit_depth == 8
        assert np.array_equal(back.pixels, px)

    def test_gray16_round_trip(self, tmp_path):
        rng = np.random.default_rng(2)
        px = rng.integers(0, 65536, size=(7, 11)).astype(np.uint16)
        p = tmp_path / "g16.png"
        write_gray_png(make_raw(px, 16), p)
        back = load_png16(p)
        assert back.bit_depth == 16
        assert np.array_equal(back.pixels, px)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_png16(tmp_path / "nope.png")

    def test_corrupt_file(self, tmp_path):
        p = tmp_path / "bad.png"
        p.write_bytes(b"definitely not a png")
        with pytest.raises(CorruptImageError):
            load_png16(p)

    def test_rgb_input_rejected(self, tmp_path):
        from PIL import Image
        p = tmp_path / "rgb.png"
        Image.new("RGB", (4, 4), (10, 20, 30)).save(p)
        with pytest.raises(NotGrayscaleError):
            load_png16(p)

    def test_quantize_rounds_half_up(self):
        assert quantize(np.array([0.5]), 8)[0] == 128
        assert quantize(np.array([0.0]), 8)[0] == 0
        assert quantize(np.array([1.0]), 8)[0] == 255
        assert quantize(np.array([126.5 / 255]), 8)[0] == 127

    def test_rgb8_round_trip(self, tmp_path):
        rng = np.random.default_rng(4)
        chans = rng.random((3, 6, 5))
        p = tmp_path / "c8.png"
        write_rgb_png(chans, p, bit_depth=8)
        got, depth = read_rgb_png(p)
        assert depth == 8
        assert np.array_equal(got, quantize(chans, 8))

    def test_rgb16_round_trip(self, tmp_path):
        rng = np.random.default_rng(6)
        chans = rng.random((3, 9, 4))
        p = tmp_path / "c16.png"
        write_rgb_png(chans, p, bit_depth=16)
        got, depth = read_rgb_png(p)
        assert depth == 16
        assert np.array_equal(got, quantize(chans, 16))

    def test_rgb16_is_valid_png(self, tmp_path):
        from PIL import Image
        chans = np.zeros((3, 3, 3))
        chans[0] = 1.0
        p = tmp_path / "v.png"
        write_rgb_png(chans, p, bit_depth=16)
        with Image.open(p) as im:
            im.verify()  # checksums and structure
        with Image.open(p) as im:
            assert im.size == (3, 3)

    def test_quantize_idempotent_through_decode(self, tmp_path):
        rng = np.random.default_rng(7)
        chans = rng.random((3, 4, 4))
        p = tmp_path / "i.png"
        for depth in (8, 16):
            write_rgb_png(chans, p, bit_depth=depth)
            ints, _ = read_rgb_png(p)
            maxval = (1 << depth) - 1
            write_rgb_png(ints.astype(np.float64) / maxval, p, bit_depth=depth)
            again, _ = read_rgb_png(p)
            assert np.array_equal(ints, again)
