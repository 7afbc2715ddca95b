"""Collection matcher: packed entries, disk fields, relaxation, query mode."""

import hashlib
import math
import os
import zlib
import struct
from fractions import Fraction

import numpy as np
import pytest

from patchfield.annf import compute_nnf
from patchfield.core import (
    ImageBuffer,
    InputError,
    PatchGeometry,
    load_image,
    patch_distance,
    save_image,
)
from patchfield.patchweb import (
    MAX_IMAGES,
    MAX_SIDE,
    QMAX,
    WEB_SENTINEL,
    WebField,
    WorkingSet,
    WorkingSetPolicy,
    _merge_packed,
    _pack,
    _img_of,
    _q_of,
    _x_of,
    _y_of,
    build_web,
    coincidence_probability,
    dequantize_dist,
    expected_coincidence_sets,
    load_web,
    pack_web_entry,
    quantize_dist,
    query_web,
    read_manifest,
    read_web_field,
    relax,
    select_working_set,
    sentinel_field,
    unpack_web_entry,
    write_manifest,
    write_web_field,
)

P7 = PatchGeometry(7)


def texture(rng, h=24, w=24, c=3):
    return rng.random((h, w, c)).astype(np.float32)


def save_texture(arr, path):
    save_image(ImageBuffer(arr), str(path))
    return str(path)


def correlated_paths(tmp, rng, n, h=24, w=24, noise=0.08, base=None):
    """n noisy variants of one base texture, saved as PNGs."""
    if base is None:
        base = texture(rng, h, w)
    paths = []
    for i in range(n):
        img = np.clip(base + rng.normal(0.0, noise, base.shape), 0.0, 1.0)
        paths.append(save_texture(img.astype(np.float32), tmp / f"img{i}.png"))
    return paths


def dir_digest(web_dir):
    out = {}
    for fn in sorted(os.listdir(web_dir)):
        with open(os.path.join(web_dir, fn), "rb") as fh:
            out[fn] = hashlib.sha256(fh.read()).hexdigest()
    return out


def check_field_invariants(f, dims_of, own=None):
    """No self-targets, targets inside their image's valid rect."""
    tx, ty, ti, q = f.entries()
    m = f.assigned()
    own_idx = f.index if own is None else own
    assert not np.any(ti[m] == own_idx), "entry targets its own image"
    assert np.all(q[m] <= QMAX)
    for j in np.unique(ti[m]):
        w, h = dims_of[int(j)]
        r = f.geom.valid_rect(w, h)
        sel = m & (ti == j)
        assert np.all((tx[sel] >= r.x0) & (tx[sel] < r.x1))
        assert np.all((ty[sel] >= r.y0) & (ty[sel] < r.y1))


class TestPackedEntries:
    def test_round_trip(self):
        assert unpack_web_entry(pack_web_entry(5, 7, 3, 1000)) == (5, 7, 3, 1000)

    def test_field_maxima(self):
        w = pack_web_entry(4095, 4095, 65535, QMAX)
        assert unpack_web_entry(w) == (4095, 4095, 65535, QMAX)

    def test_saturation(self):
        w = pack_web_entry(1, 2, 3, (1 << 24) + 9)
        assert unpack_web_entry(w) == (1, 2, 3, QMAX)

    def test_sentinel_is_all_ones(self):
        assert int(WEB_SENTINEL) == (1 << 64) - 1
        assert int(WEB_SENTINEL) == pack_web_entry(4095, 4095, 65535, QMAX)

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError, match="coordinate"):
            pack_web_entry(4096, 0, 0, 0)
        with pytest.raises(ValueError, match="coordinate"):
            pack_web_entry(0, 4096, 0, 0)
        with pytest.raises(ValueError, match="coordinate"):
            pack_web_entry(-1, 0, 0, 0)
        with pytest.raises(ValueError, match="image index"):
            pack_web_entry(0, 0, 65536, 0)
        with pytest.raises(ValueError, match="non-negative"):
            pack_web_entry(0, 0, 0, -1)
        with pytest.raises(ValueError, match="64-bit"):
            unpack_web_entry(1 << 64)

    def test_round_trip_property(self):
        rng = np.random.default_rng(11)
        for _ in range(500):
            x = int(rng.integers(0, 4096))
            y = int(rng.integers(0, 4096))
            i = int(rng.integers(0, 65536))
            q = int(rng.integers(0, QMAX + 1))
            assert unpack_web_entry(pack_web_entry(x, y, i, q)) == (x, y, i, q)

    def test_kernel_helpers_agree_with_python(self):
        rng = np.random.default_rng(12)
        for _ in range(200):
            x = int(rng.integers(0, 4096))
            y = int(rng.integers(0, 4096))
            i = int(rng.integers(0, 65536))
            q = int(rng.integers(0, QMAX + 1))
            w = pack_web_entry(x, y, i, q)
            assert int(_pack(x, y, i, q)) == w
            u = np.uint64(w)
            assert (int(_x_of(u)), int(_y_of(u)), int(_img_of(u)), int(_q_of(u))) == (
                x, y, i, q,
            )


class TestQuantization:
    DMAX = 7 * 7 * 3.0

    def test_endpoints(self):
        assert quantize_dist(0.0, self.DMAX) == 0
        assert quantize_dist(self.DMAX, self.DMAX) == QMAX

    def test_saturates_beyond_ceiling(self):
        assert quantize_dist(self.DMAX * 10, self.DMAX) == QMAX

    def test_monotone(self):
        rng = np.random.default_rng(3)
        d = np.sort(rng.uniform(0, self.DMAX * 1.2, size=300))
        q = quantize_dist(d, self.DMAX)
        assert np.all(np.diff(q) >= 0)

    def test_quantization_error_within_half_step(self):
        rng = np.random.default_rng(4)
        d = rng.uniform(0, self.DMAX, size=300)
        back = dequantize_dist(quantize_dist(d, self.DMAX), self.DMAX)
        assert np.max(np.abs(back - d)) <= 0.5 * self.DMAX / QMAX + 1e-12

    def test_bad_inputs(self):
        with pytest.raises(ValueError, match="ceiling"):
            quantize_dist(1.0, 0.0)
        with pytest.raises(ValueError, match="non-negative"):
            quantize_dist(-1.0, self.DMAX)
        with pytest.raises(ValueError, match="ceiling"):
            dequantize_dist(5, -1.0)


class TestFieldIO:
    def random_field(self, seed, w=14, h=12):
        rng = np.random.default_rng(seed)
        f = sentinel_field(w, h, P7, 0)
        v = f.rect_view()
        words = (
            rng.integers(0, 4096, v.shape).astype(np.uint64)
            | (rng.integers(0, 4096, v.shape).astype(np.uint64) << np.uint64(12))
            | (rng.integers(0, 65536, v.shape).astype(np.uint64) << np.uint64(24))
            | (rng.integers(0, QMAX, v.shape).astype(np.uint64) << np.uint64(40))
        )
        v[:, :] = words
        return f

    def test_round_trip_bit_exact(self, tmp_path):
        f = self.random_field(5)
        path = str(tmp_path / "0.wnnf.z")
        write_web_field(f, path, merge=False)
        g = read_web_field(path, 0)
        assert g.dims == f.dims and g.geom.patch_size == 7 and g.index == 0
        assert np.array_equal(g.packed, f.packed)

    def test_header_layout(self, tmp_path):
        f = self.random_field(6, w=15, h=11)
        path = str(tmp_path / "0.wnnf.z")
        write_web_field(f, path, merge=False)
        raw = open(path, "rb").read()
        assert raw[:4] == b"WEB1"
        w, h, p = struct.unpack("<IIH", raw[4:14])
        assert (w, h, p) == (15, 11, 7)
        body = zlib.decompress(raw[14:])
        r = f.rect
        assert len(body) == r.area * 8
        assert np.array_equal(
            np.frombuffer(body, dtype="<u8").reshape(r.height, r.width),
            f.rect_view(),
        )

    def test_corrupt_files_rejected(self, tmp_path):
        f = self.random_field(7)
        path = str(tmp_path / "0.wnnf.z")
        write_web_field(f, path, merge=False)
        raw = open(path, "rb").read()
        bad = tmp_path / "bad.wnnf.z"
        bad.write_bytes(b"NOPE" + raw[4:])
        with pytest.raises(InputError, match="magic"):
            read_web_field(str(bad))
        bad.write_bytes(raw[:13])
        with pytest.raises(InputError, match="truncated|magic"):
            read_web_field(str(bad))
        bad.write_bytes(raw[:14] + b"garbage")
        with pytest.raises(InputError, match="corrupt"):
            read_web_field(str(bad))
        body = zlib.decompress(raw[14:])
        bad.write_bytes(raw[:14] + zlib.compress(body[:-8]))
        with pytest.raises(InputError, match="payload holds"):
            read_web_field(str(bad))
        with pytest.raises(InputError, match="cannot read"):
            read_web_field(str(tmp_path / "missing.wnnf.z"))

    def test_merge_keeps_pointwise_minimum(self, tmp_path):
        old = sentinel_field(14, 12, P7, 0)
        new = sentinel_field(14, 12, P7, 0)
        vo, vn = old.rect_view(), new.rect_view()
        # old assigned everywhere at q=100 except a sentinel hole at (0, 0)
        vo[:, :] = np.uint64(pack_web_entry(3, 3, 2, 100))
        vo[0, 0] = WEB_SENTINEL
        # new: better on row 1, worse on row 2, tie with a different target
        # on row 3, sentinel elsewhere
        vn[1, :] = np.uint64(pack_web_entry(4, 4, 1, 50))
        vn[2, :] = np.uint64(pack_web_entry(5, 5, 1, 200))
        vn[3, :] = np.uint64(pack_web_entry(6, 6, 1, 100))
        vn[0, 0] = np.uint64(pack_web_entry(7, 7, 1, 9999))
        path = str(tmp_path / "0.wnnf.z")
        write_web_field(old, path, merge=False)
        write_web_field(new, path, merge=True)
        got = read_web_field(path, 0).rect_view()
        expect = _merge_packed(vo, vn)
        assert np.array_equal(got, expect)
        assert got[0, 0] == np.uint64(pack_web_entry(7, 7, 1, 9999))  # fills hole
        assert np.all(got[1, :] == np.uint64(pack_web_entry(4, 4, 1, 50)))  # better
        assert np.all(got[2, :] == np.uint64(pack_web_entry(3, 3, 2, 100)))  # worse
        assert np.all(got[3, :] == np.uint64(pack_web_entry(3, 3, 2, 100)))  # tie
        assert np.all(got[4, :] == np.uint64(pack_web_entry(3, 3, 2, 100)))  # sentinel

    def test_merge_geometry_mismatch_rejected(self, tmp_path):
        path = str(tmp_path / "0.wnnf.z")
        write_web_field(sentinel_field(14, 12, P7, 0), path, merge=False)
        with pytest.raises(InputError, match="merge"):
            write_web_field(sentinel_field(16, 12, P7, 0), path, merge=True)

    def test_overwrite_without_merge(self, tmp_path):
        path = str(tmp_path / "0.wnnf.z")
        f1 = self.random_field(8)
        f2 = self.random_field(9)
        write_web_field(f1, path, merge=False)
        write_web_field(f2, path, merge=False)
        assert np.array_equal(read_web_field(path).packed, f2.packed)


class TestManifest:
    def test_round_trip(self, tmp_path):
        from patchfield.patchweb import WebImageInfo

        infos = [WebImageInfo("/a/b.png", 20, 30), WebImageInfo("rel.png", 7, 9)]
        write_manifest(infos, str(tmp_path))
        assert read_manifest(str(tmp_path)) == infos

    def test_malformed_lines_rejected(self, tmp_path):
        (tmp_path / "manifest").write_text("only_a_path\n")
        with pytest.raises(InputError, match="path, width, height"):
            read_manifest(str(tmp_path))
        (tmp_path / "manifest").write_text("p.png\tten\t10\n")
        with pytest.raises(InputError, match="bad dimensions"):
            read_manifest(str(tmp_path))
        (tmp_path / "manifest").write_text("")
        with pytest.raises(InputError, match="empty manifest"):
            read_manifest(str(tmp_path))

    def test_missing_directory(self, tmp_path):
        with pytest.raises(InputError, match="not a web directory"):
            read_manifest(str(tmp_path / "nope"))
        with pytest.raises(InputError):
            load_web(str(tmp_path / "nope"))


class TestWorkingSetSelection:
    def test_capacity_at_or_above_collection_takes_everything(self):
        ws = select_working_set(5, None, capacity=8)
        assert ws.indices == [0, 1, 2, 3, 4]

    def test_capacity_floor(self):
        with pytest.raises(ValueError, match="at least two"):
            select_working_set(10, None, capacity=1)

    def test_policy_validation(self):
        with pytest.raises(ValueError, match="sum to 1"):
            WorkingSetPolicy(0.5, 0.5, 0.5)
        with pytest.raises(ValueError, match="lie in"):
            WorkingSetPolicy(-0.5, 1.0, 0.5)

    def test_pure_uniform_policy(self):
        rng = np.random.default_rng(5)
        ws = select_working_set(
            30, None, WorkingSetPolicy(0.0, 1.0, 0.0), capacity=6, rng=rng
        )
        assert len(ws.indices) == 6
        assert len(set(ws.indices)) == 6
        assert all(0 <= i < 30 for i in ws.indices)
        rng2 = np.random.default_rng(5)
        ws2 = select_working_set(
            30, None, WorkingSetPolicy(0.0, 1.0, 0.0), capacity=6, rng=rng2
        )
        assert ws2.indices == ws.indices

    def test_keep_everything_policy_is_identity(self):
        prev = WorkingSet([4, 9, 2, 17], 4, WorkingSetPolicy(1.0, 0.0, 0.0))
        ws = select_working_set(
            30, prev, WorkingSetPolicy(1.0, 0.0, 0.0), capacity=4,
            rng=np.random.default_rng(0),
        )
        assert ws.indices == [4, 9, 2, 17]

    def test_default_thirds_mix(self):
        prev = WorkingSet([0, 1, 2, 3, 4, 5], 6, WorkingSetPolicy())
        ws = select_working_set(
            30, prev, capacity=6, rng=np.random.default_rng(1)
        )
        assert len(ws.indices) == 6
        assert len(set(ws.indices)) == 6
        kept = set(ws.indices) & set(prev.indices)
        assert len(kept) >= 2  # the keep third survives

    def test_enrich_prefers_modal_targets(self):
        f0 = sentinel_field(12, 12, P7, 0)
        f1 = sentinel_field(12, 12, P7, 1)
        v0, v1 = f0.rect_view(), f1.rect_view()
        v0[:, :] = np.uint64(pack_web_entry(3, 3, 7, 5))
        v0[0, :] = np.uint64(pack_web_entry(3, 3, 3, 5))  # 6 votes for image 3
        v1[:, :] = np.uint64(pack_web_entry(3, 3, 7, 5))  # 36 votes for image 7
        prev = WorkingSet(
            [0, 1], 4, WorkingSetPolicy(), fields={0: f0, 1: f1}
        )
        ws = select_working_set(
            10, prev, WorkingSetPolicy(0.5, 0.0, 0.5), capacity=4,
            rng=np.random.default_rng(0),
        )
        assert ws.indices == [0, 1, 7, 3]

    def test_enrich_tie_prefers_smaller_index(self):
        f0 = sentinel_field(12, 12, P7, 0)
        v = f0.rect_view()
        v[:3, :] = np.uint64(pack_web_entry(3, 3, 5, 5))
        v[3:, :] = np.uint64(pack_web_entry(3, 3, 2, 5))
        prev = WorkingSet([0], 3, WorkingSetPolicy(), fields={0: f0})
        ws = select_working_set(
            10, prev, WorkingSetPolicy(0.4, 0.0, 0.6), capacity=3,
            rng=np.random.default_rng(0),
        )
        assert ws.indices[0] == 0 and ws.indices[1] == 2 and ws.indices[2] == 5

    def test_query_slot_never_kept(self):
        prev = WorkingSet([6, 3], 2, WorkingSetPolicy(1.0, 0.0, 0.0), query_index=6)
        ws = select_working_set(
            6, prev, WorkingSetPolicy(1.0, 0.0, 0.0), capacity=2,
            rng=np.random.default_rng(2),
        )
        assert 6 not in ws.indices
        assert 3 in ws.indices

    def test_enrich_on_cluster_pair_selects_cluster_mate(self, tmp_path):
        # Three well-separated texture clusters; after relaxing one
        # cluster's pair together, enrichment links point to the mate.
        rng = np.random.default_rng(21)
        bases = [
            texture(rng) * 0.2,
            texture(rng) * 0.2 + 0.4,
            texture(rng) * 0.2 + 0.8,
        ]
        paths, imgs = [], []
        for ci, b in enumerate(bases):
            for j in range(2):
                arr = np.clip(b + rng.normal(0, 0.02, b.shape), 0, 1).astype(np.float32)
                paths.append(save_texture(arr, tmp_path / f"c{ci}_{j}.png"))
        imgs = [load_image(p) for p in paths]
        ws = WorkingSet([0, 1], 2, WorkingSetPolicy(0.5, 0.0, 0.5))
        ws.images = {0: imgs[0], 1: imgs[1]}
        ws.fields = {
            0: sentinel_field(24, 24, P7, 0),
            1: sentinel_field(24, 24, P7, 1),
        }
        relax(ws, 2, seed=0)
        nxt = select_working_set(
            6, ws, WorkingSetPolicy(0.5, 0.0, 0.5), capacity=2,
            rng=np.random.default_rng(3),
        )
        assert set(nxt.indices) == {0, 1}


class TestRelax:
    def build_ws(self, tmp_path, rng, n=3, h=24, w=24, noise=0.08):
        paths = correlated_paths(tmp_path, rng, n, h=h, w=w, noise=noise)
        imgs = [load_image(p) for p in paths]
        ws = WorkingSet(list(range(n)), n, WorkingSetPolicy())
        ws.images = {i: imgs[i] for i in range(n)}
        ws.fields = {
            i: sentinel_field(imgs[i].width, imgs[i].height, P7, i) for i in range(n)
        }
        return ws, imgs

    def test_pointwise_monotone_and_invariants(self, tmp_path):
        ws, imgs = self.build_ws(tmp_path, np.random.default_rng(31))
        dims_of = {i: (im.width, im.height) for i, im in enumerate(imgs)}
        prev = None
        for s in range(6):
            n_up = relax(ws, 1, seed=7, first_sweep=s)
            qs = np.stack(
                [(ws.fields[i].rect_view() >> np.uint64(40)).astype(np.int64)
                 for i in range(3)]
            )
            if prev is not None:
                assert np.all(qs <= prev), f"distance increased on sweep {s}"
            if s == 0:
                assert n_up > 0
            prev = qs
        for i in range(3):
            f = ws.fields[i]
            assert f.assigned().all()
            check_field_invariants(f, dims_of)

    def test_stored_distances_are_exact(self, tmp_path):
        ws, imgs = self.build_ws(tmp_path, np.random.default_rng(33))
        relax(ws, 3, seed=1)
        dmax = 7 * 7 * imgs[0].channels
        rng = np.random.default_rng(0)
        for i in range(3):
            f = ws.fields[i]
            tx, ty, ti, q = f.entries()
            r = f.rect
            for _ in range(20):
                row = int(rng.integers(0, r.height))
                col = int(rng.integers(0, r.width))
                ax, ay = r.x0 + col, r.y0 + row
                j = int(ti[row, col])
                d = patch_distance(
                    imgs[i], (ax, ay), imgs[j],
                    (int(tx[row, col]), int(ty[row, col])), P7,
                )
                assert int(q[row, col]) == quantize_dist(d, dmax)

    def test_single_image_visits_leave_others_untouched(self, tmp_path):
        ws, imgs = self.build_ws(tmp_path, np.random.default_rng(35), n=2)
        before1 = ws.fields[1].packed.copy()
        relax(ws, 2, seed=3, only=0)
        f0 = ws.fields[0]
        assert f0.assigned().all()
        tx, ty, ti, q = f0.entries()
        assert np.all(ti == 1)
        assert np.array_equal(ws.fields[1].packed, before1)
        assert np.all(ws.fields[1].packed == WEB_SENTINEL)

    def test_mirror_updates_flow_back(self, tmp_path):
        ws, imgs = self.build_ws(tmp_path, np.random.default_rng(36), n=2)
        # Freeze image 1's own visits off by comparing against a run where
        # mirroring is the only way entries can appear... both images are
        # active here, so instead check reciprocity: after one sweep both
        # fields hold assignments even though sweep 0 visits image 0 first
        # with image 1's field still empty.
        relax(ws, 1, seed=5)
        assert ws.fields[0].assigned().all()
        assert ws.fields[1].assigned().any()

    def test_uniform_only_is_worse_at_equal_sweeps(self, tmp_path):
        rng = np.random.default_rng(37)
        ws_full, _ = self.build_ws(tmp_path, rng, n=3)
        full_dir = tmp_path / "u"
        full_dir.mkdir()
        ws_uni, _ = self.build_ws(full_dir, np.random.default_rng(37), n=3)
        relax(ws_full, 4, seed=9)
        relax(ws_uni, 4, seed=9, uniform_only=True)
        mean_full = np.mean([ws_full.fields[i].mean_quantized() for i in range(3)])
        mean_uni = np.mean([ws_uni.fields[i].mean_quantized() for i in range(3)])
        assert mean_full < mean_uni

    def test_entries_targeting_unloaded_high_indexes(self, tmp_path):
        # Loaded fields may point at any manifest index, including images
        # far beyond the current working set; those targets are simply
        # unavailable as hop/search anchors, never out-of-bounds reads.
        ws, imgs = self.build_ws(tmp_path, np.random.default_rng(39), n=2)
        v = ws.fields[0].rect_view()
        v[:, :] = np.uint64(pack_web_entry(8, 8, 60000, 12345))
        v[0, :] = np.uint64(pack_web_entry(9, 9, 500, 777))
        n_up = relax(ws, 2, seed=13)
        assert n_up > 0
        tx, ty, ti, q = ws.fields[0].entries()
        m = ws.fields[0].assigned()
        # replacements may only come from the loaded image
        replaced = m & (q < 777)
        assert np.all(ti[replaced] == 1)

    def test_validation_errors(self, tmp_path):
        ws, imgs = self.build_ws(tmp_path, np.random.default_rng(38), n=2)
        solo = WorkingSet([0], 1, WorkingSetPolicy())
        solo.images = {0: ws.images[0]}
        solo.fields = {0: ws.fields[0]}
        with pytest.raises(ValueError, match="at least two"):
            relax(solo, 1)
        dup = WorkingSet([0, 0], 2, WorkingSetPolicy())
        dup.images = dict(ws.images)
        dup.fields = dict(ws.fields)
        with pytest.raises(ValueError, match="repeats"):
            relax(dup, 1)
        missing = WorkingSet([0, 1], 2, WorkingSetPolicy())
        missing.images = {0: ws.images[0]}
        missing.fields = dict(ws.fields)
        with pytest.raises(ValueError, match="not loaded"):
            relax(missing, 1)
        with pytest.raises(ValueError, match="not in the working set"):
            relax(ws, 1, only=5)
        with pytest.raises(ValueError, match="sweep count"):
            relax(ws, 0)
        gray = ImageBuffer(np.clip(ws.images[0].data.mean(axis=2), 0, 1))
        mixed = WorkingSet([0, 1], 2, WorkingSetPolicy())
        mixed.images = {0: ws.images[0], 1: gray}
        mixed.fields = {
            0: ws.fields[0],
            1: sentinel_field(gray.width, gray.height, P7, 1),
        }
        with pytest.raises(InputError, match="channel"):
            relax(mixed, 1)


class TestBuildWeb:
    def test_invariants_and_files(self, tmp_path):
        rng = np.random.default_rng(41)
        paths = correlated_paths(tmp_path, rng, 4)
        wd = str(tmp_path / "web")
        # selection is stochastic; six rounds at this seed visit every image
        web = build_web(paths, wd, capacity=3, rounds=6, seed=2)
        assert len(web) == 4
        assert sorted(os.listdir(wd)) == [
            "0.wnnf.z", "1.wnnf.z", "2.wnnf.z", "3.wnnf.z", "manifest",
        ]
        dims_of = {i: (inf.width, inf.height) for i, inf in enumerate(web.images)}
        for i in range(4):
            f = web.read_field(i)
            assert f.assigned().all()
            check_field_invariants(f, dims_of)

    def test_duplicate_pair_reaches_zero(self, tmp_path):
        rng = np.random.default_rng(42)
        arr = texture(rng)
        pa = save_texture(arr, tmp_path / "a.png")
        pb = save_texture(arr, tmp_path / "b.png")
        web = build_web([pa, pb], str(tmp_path / "web"), capacity=2, rounds=3, seed=3)
        for i in range(2):
            f = web.read_field(i)
            assert f.assigned().all()
            assert f.mean_quantized() == 0.0

    def test_rebuild_is_byte_identical(self, tmp_path):
        rng = np.random.default_rng(43)
        paths = correlated_paths(tmp_path, rng, 3)
        build_web(paths, str(tmp_path / "wa"), capacity=2, rounds=3, seed=11)
        build_web(paths, str(tmp_path / "wb"), capacity=2, rounds=3, seed=11)
        for i in range(3):
            a = open(tmp_path / "wa" / f"{i}.wnnf.z", "rb").read()
            b = open(tmp_path / "wb" / f"{i}.wnnf.z", "rb").read()
            assert a == b

    def test_extra_rounds_only_improve(self, tmp_path):
        rng = np.random.default_rng(44)
        paths = correlated_paths(tmp_path, rng, 4)
        web1 = build_web(paths, str(tmp_path / "w1"), capacity=2, rounds=1, seed=6)
        web2 = build_web(paths, str(tmp_path / "w2"), capacity=2, rounds=3, seed=6)
        for i in range(4):
            q1 = (web1.read_field(i).rect_view() >> np.uint64(40)).astype(np.int64)
            q2 = (web2.read_field(i).rect_view() >> np.uint64(40)).astype(np.int64)
            assert np.all(q2 <= q1)

    def test_persistence_round_trip(self, tmp_path):
        rng = np.random.default_rng(45)
        paths = correlated_paths(tmp_path, rng, 3)
        wd = str(tmp_path / "web")
        web = build_web(paths, wd, capacity=3, rounds=2, seed=8)
        first = [web.read_field(i).packed.copy() for i in range(3)]
        reopened = load_web(wd)
        assert reopened.geom.patch_size == 7
        for i in range(3):
            assert np.array_equal(reopened.read_field(i).packed, first[i])

    def test_two_image_web_matches_direct_field(self, tmp_path):
        rng = np.random.default_rng(46)
        base = texture(rng, 48, 48)
        a_arr = np.clip(base + rng.normal(0, 0.06, base.shape), 0, 1).astype(np.float32)
        b_arr = np.clip(
            np.roll(base, (3, -2), axis=(0, 1)) + rng.normal(0, 0.06, base.shape), 0, 1
        ).astype(np.float32)
        pa = save_texture(a_arr, tmp_path / "a.png")
        pb = save_texture(b_arr, tmp_path / "b.png")
        web = build_web([pa, pb], str(tmp_path / "web"), capacity=2, rounds=3, seed=0)
        f = web.read_field(0)
        assert f.assigned().all()
        web_mean = float(f.distances(3)[f.assigned()].mean())
        nnf = compute_nnf(load_image(pa), load_image(pb), seed=0)
        nnf_mean = float(nnf.valid_dist.mean())
        assert abs(web_mean - nnf_mean) <= 0.05 * nnf_mean

    def test_input_validation(self, tmp_path):
        rng = np.random.default_rng(47)
        paths = correlated_paths(tmp_path, rng, 2)
        with pytest.raises(InputError, match="at least two"):
            build_web(paths[:1], str(tmp_path / "w"))
        wide = save_texture(texture(rng, 8, MAX_SIDE + 4), tmp_path / "wide.png")
        with pytest.raises(InputError, match="format ceiling"):
            build_web([wide, paths[0]], str(tmp_path / "w"))
        tiny = save_texture(texture(rng, 4, 4), tmp_path / "tiny.png")
        with pytest.raises(InputError, match="smaller than"):
            build_web([tiny, paths[0]], str(tmp_path / "w"))
        gray = save_texture(texture(rng, 24, 24, c=1)[:, :, 0], tmp_path / "gray.png")
        with pytest.raises(InputError, match="channels"):
            build_web([paths[0], gray], str(tmp_path / "w"))
        with pytest.raises(ValueError, match="capacity"):
            build_web(paths, str(tmp_path / "w"), capacity=1)
        with pytest.raises(ValueError, match="sweeps"):
            build_web(paths, str(tmp_path / "w"), sweeps_per_round=0)


class TestQueryWeb:
    def make_web(self, tmp_path, rng, n=3):
        paths = correlated_paths(tmp_path, rng, n)
        wd = str(tmp_path / "web")
        build_web(paths, wd, capacity=min(3, n), rounds=2, seed=5)
        return wd, paths

    def test_member_query_reaches_zero_and_files_untouched(self, tmp_path):
        wd, paths = self.make_web(tmp_path, np.random.default_rng(51))
        before = dir_digest(wd)
        qf = query_web(wd, load_image(paths[1]), capacity=4, rounds=3, seed=9)
        assert dir_digest(wd) == before
        assert qf.assigned().all()
        assert qf.mean_quantized() == 0.0
        tx, ty, ti, q = qf.entries()
        assert not np.any(ti == qf.index)

    def test_query_is_deterministic(self, tmp_path):
        wd, paths = self.make_web(tmp_path, np.random.default_rng(52))
        q1 = query_web(wd, load_image(paths[0]), capacity=3, rounds=2, seed=4)
        q2 = query_web(wd, load_image(paths[0]), capacity=3, rounds=2, seed=4)
        assert np.array_equal(q1.packed, q2.packed)

    def test_worker_merge_never_hurts(self, tmp_path):
        wd, paths = self.make_web(tmp_path, np.random.default_rng(53), n=4)
        rng = np.random.default_rng(99)
        probe = np.clip(
            load_image(paths[2]).data + rng.normal(0, 0.03, (24, 24, 3)), 0, 1
        ).astype(np.float32)
        q1 = query_web(wd, ImageBuffer(probe), capacity=3, rounds=2, seed=4)
        q2 = query_web(wd, ImageBuffer(probe), capacity=3, rounds=2, seed=4, workers=3)
        before = dir_digest(wd)
        v1 = (q1.rect_view() >> np.uint64(40)).astype(np.int64)
        v2 = (q2.rect_view() >> np.uint64(40)).astype(np.int64)
        assert v2.mean() <= v1.mean() + 1e-12
        assert dir_digest(wd) == before
        dims_of = {i: (inf.width, inf.height) for i, inf in enumerate(load_web(wd).images)}
        check_field_invariants(q2, dims_of, own=q2.index)

    def test_query_validation(self, tmp_path):
        wd, paths = self.make_web(tmp_path, np.random.default_rng(54))
        big = ImageBuffer(np.zeros((8, MAX_SIDE + 1, 3), dtype=np.float32))
        with pytest.raises(InputError, match="format ceiling"):
            query_web(wd, big)
        with pytest.raises(ValueError, match="capacity"):
            query_web(wd, load_image(paths[0]), capacity=1)
        with pytest.raises(ValueError, match="worker count"):
            query_web(wd, load_image(paths[0]), workers=0)


class TestCoincidenceModel:
    def test_full_working_set_is_certain(self):
        assert coincidence_probability(7, 7) == 1.0
        assert expected_coincidence_sets(7, 7) == 0.0

    def test_ten_choose_five_by_enumeration(self):
        from itertools import combinations

        hits = sum(1 for s in combinations(range(10), 5) if 0 in s and 1 in s)
        total = math.comb(10, 5)
        assert Fraction(hits, total) == Fraction(2, 9)
        assert coincidence_probability(10, 5) == pytest.approx(2.0 / 9.0, abs=1e-15)

    def test_hundred_choose_ten(self):
        exact = Fraction(math.comb(98, 8), math.comb(100, 10))
        assert exact == Fraction(1, 110)
        assert coincidence_probability(100, 10) == pytest.approx(1.0 / 110.0, abs=1e-15)

    def test_bad_arguments(self):
        with pytest.raises(ValueError, match="at least two"):
            coincidence_probability(10, 1)
        with pytest.raises(ValueError, match="exceed"):
            coincidence_probability(5, 6)

    def test_expected_sets_matches_geometric_simulation(self):
        n, m = 10, 5
        p = coincidence_probability(n, m)
        expect = expected_coincidence_sets(n, m)
        assert expect == pytest.approx(1.0 / p - 1.0)
        rng = np.random.default_rng(77)
        fails = []
        for _ in range(800):
            k = 0
            while True:
                s = rng.choice(n, size=m, replace=False)
                if 0 in s and 1 in s:
                    break
                k += 1
            fails.append(k)
        assert np.mean(fails) == pytest.approx(expect, rel=0.15)
