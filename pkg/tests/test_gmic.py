import math
import os

import numpy as np
import pytest

from detrisk import autodiff as ad
from detrisk import gmic, imaging, survival
from detrisk.gmic import GmicConfig, GmicModel, GmicOutputs

from .gradcheck import numeric_grad, max_relative_error


MICRO = GmicConfig(input_side=16, saliency_side=8, num_windows=4,
                   stage_channels=(4, 8), crop_side=4, patch_side=4,
                   num_patches=2, local_stage_channels=(4,),
                   attention_dim=3, seed=7)


def naive_retrieve(saliency, image, cfg):
    """Loop-oracle for ROI retrieval: same rule, written as nested scans."""
    s = cfg.saliency_side
    crit = np.zeros((s, s))
    for t in range(saliency.shape[0]):
        m = saliency[t]
        lo, hi = m.min(), m.max()
        crit += (m - lo) / (hi - lo) if hi > lo else np.zeros_like(m)
    wc = cfg.window_cells
    scale = cfg.input_side // s
    claimed = np.zeros((s, s), dtype=bool)
    out = []
    for _ in range(cfg.num_patches):
        best, best_val = None, None
        for i in range(s - wc + 1):
            for j in range(s - wc + 1):
                if claimed[i:i + wc, j:j + wc].any():
                    continue
                v = crit[i:i + wc, j:j + wc].sum()
                if best_val is None or v > best_val:
                    best, best_val = (i, j), v
        claimed[best[0]:best[0] + wc, best[1]:best[1] + wc] = True
        out.append((best[0] * scale, best[1] * scale))
    return np.array(out)


class TestConfig:
    def test_default_derived_values(self):
        cfg = GmicConfig()
        assert cfg.pool_stage_count == 3
        assert cfg.window_cells == 2
        assert cfg.top_k == 32
        assert cfg.feature_channels == 64

    def test_ratio_must_be_power_of_two(self):
        with pytest.raises(ValueError):
            GmicConfig(input_side=48, saliency_side=8)

    def test_crop_must_align_to_cells(self):
        with pytest.raises(ValueError):
            GmicConfig(crop_side=12)

    def test_too_many_patches(self):
        # 49 positions, 9 invalidated per pick: 6 guaranteed, 7 is not
        with pytest.raises(ValueError):
            GmicConfig(num_patches=7)
        GmicConfig(num_patches=6)

    def test_patch_side_pool_divisibility(self):
        with pytest.raises(ValueError):
            GmicConfig(patch_side=13)

    def test_pool_fraction_range(self):
        with pytest.raises(ValueError):
            GmicConfig(pool_fraction=0.0)

    def test_drc_flavor(self):
        cfg = gmic.drc_config()
        assert cfg.num_windows == survival.NUM_CHANNELS
        assert len(cfg.stage_channels) == 5


class TestAggregateTopr:
    def test_single_cell_fraction(self):
        m = np.zeros((2, 2))
        m[0, 0] = 1.0
        assert gmic.aggregate_topr(m, 0.25) == 1.0

    def test_full_fraction_is_mean(self):
        rng = np.random.default_rng(0)
        m = rng.random((5, 7))
        assert abs(gmic.aggregate_topr(m, 1.0) - m.mean()) < 1e-15

    def test_matches_sort_oracle(self):
        rng = np.random.default_rng(41)
        for _ in range(200):
            h, w = rng.integers(1, 9, size=2)
            m = rng.standard_normal((h, w))
            r = float(rng.uniform(0.05, 1.0))
            k = math.ceil(r * h * w)
            expect = float(np.sort(m.reshape(-1))[::-1][:k].mean())
            assert abs(gmic.aggregate_topr(m, r) - expect) < 1e-12

    def test_rejects_bad_fraction(self):
        with pytest.raises(ValueError):
            gmic.aggregate_topr(np.zeros((2, 2)), 1.5)


class TestRetrieveRois:
    def test_uniform_map_tiles_in_scan_order(self):
        cfg = GmicConfig()  # s=8, wc=2, K=6
        sal = np.full((4, 8, 8), 0.3)
        img = np.zeros((64, 64))
        rois = gmic.retrieve_rois(sal, img, cfg)
        expect = [(0, 0), (0, 16), (0, 32), (0, 48), (16, 0), (16, 16)]
        assert [tuple(p) for p in rois.positions] == expect

    def test_hot_cell_claimed_first(self):
        cfg = GmicConfig()
        for cell in [(0, 0), (3, 4), (7, 7), (0, 7)]:
            sal = np.zeros((4, 8, 8))
            sal[1][cell] = 1.0
            rois = gmic.retrieve_rois(sal, np.zeros((64, 64)), cfg)
            r, c = rois.positions[0]
            i, j = r // 8, c // 8
            # footprint covers the hot cell
            assert i <= cell[0] < i + 2 and j <= cell[1] < j + 2
            # smallest covering position wins the tie
            assert i == min(max(0, cell[0] - 1), 8 - 2)
            assert j == min(max(0, cell[1] - 1), 8 - 2)

    def test_matches_loop_oracle(self):
        cfg = GmicConfig()
        rng = np.random.default_rng(99)
        img = np.zeros((64, 64))
        for _ in range(200):
            t = int(rng.integers(1, 6))
            sal = rng.random((t, 8, 8))
            got = gmic.retrieve_rois(sal, img, cfg).positions
            expect = naive_retrieve(sal, img, cfg)
            assert np.array_equal(got, expect)

    def test_footprints_disjoint(self):
        cfg = GmicConfig()
        rng = np.random.default_rng(5)
        sal = rng.random((4, 8, 8))
        rois = gmic.retrieve_rois(sal, np.zeros((64, 64)), cfg)
        claimed = np.zeros((8, 8), dtype=int)
        for r, c in rois.positions:
            claimed[r // 8:r // 8 + 2, c // 8:c // 8 + 2] += 1
        assert claimed.max() == 1
        assert claimed.sum() == 4 * cfg.num_patches

    def test_patch_is_exact_crop_at_native_side(self):
        cfg = GmicConfig(crop_side=16, patch_side=16)
        rng = np.random.default_rng(11)
        sal = rng.random((4, 8, 8))
        img = rng.random((64, 64))
        rois = gmic.retrieve_rois(sal, img, cfg)
        for (r, c), patch in zip(rois.positions, rois.patches):
            assert np.array_equal(patch, img[r:r + 16, c:c + 16])

    def test_bad_shapes_rejected(self):
        cfg = GmicConfig()
        with pytest.raises(ValueError):
            gmic.retrieve_rois(np.zeros((4, 8, 8)), np.zeros((32, 32)), cfg)
        with pytest.raises(ValueError):
            gmic.retrieve_rois(np.zeros((8, 8)), np.zeros((64, 64)), cfg)


class TestForward:
    def test_shapes_and_ranges(self):
        model = GmicModel(MICRO)
        rng = np.random.default_rng(3)
        x = rng.random((3, 16, 16))
        out = model.forward(x)
        assert out.y_global.data.shape == (3, 4)
        assert out.y_local.data.shape == (3, 4)
        assert out.y_fusion.data.shape == (3, 4)
        assert out.saliency.data.shape == (3, 4, 8, 8)
        for y in (out.y_global, out.y_local, out.y_fusion, out.saliency):
            assert np.all((y.data > 0.0) & (y.data < 1.0))
        assert len(out.rois) == 3
        assert out.attention.data.shape == (3, 2)

    def test_global_head_matches_pool_of_saliency(self):
        model = GmicModel(MICRO)
        x = np.random.default_rng(4).random((2, 16, 16))
        out = model.forward(x)
        for i in range(2):
            for t in range(4):
                expect = gmic.aggregate_topr(out.saliency.data[i, t], MICRO.pool_fraction)
                assert abs(out.y_global.data[i, t] - expect) < 1e-12

    def test_attention_rows_sum_to_one(self):
        model = GmicModel(MICRO)
        x = np.random.default_rng(6).random((4, 16, 16))
        out = model.forward(x)
        np.testing.assert_allclose(out.attention.data.sum(axis=1), 1.0, atol=1e-12)
        for roi in out.rois:
            np.testing.assert_allclose(roi.alphas.sum(), 1.0, atol=1e-12)

    def test_deterministic_by_seed(self):
        x = np.random.default_rng(8).random((2, 16, 16))
        a = GmicModel(MICRO).forward(x)
        b = GmicModel(MICRO).forward(x)
        assert np.array_equal(a.y_fusion.data, b.y_fusion.data)
        c = GmicModel(GmicConfig(**{**MICRO.__dict__, "seed": 8})).forward(x)
        assert not np.array_equal(a.y_fusion.data, c.y_fusion.data)

    def test_rejects_bad_input(self):
        model = GmicModel(MICRO)
        with pytest.raises(ValueError):
            model.forward(np.zeros((2, 8, 8)))
        with pytest.raises(ValueError):
            model.forward(np.full((1, 16, 16), np.nan))


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        model = GmicModel(MICRO)
        x = np.random.default_rng(9).random((2, 16, 16))
        before = model.predict(x)
        path = tmp_path / "model.ckpt"
        model.save(path)
        again = GmicModel.load(path)
        assert again.cfg == MICRO
        assert np.array_equal(again.predict(x), before)

    def test_config_tuples_restored(self, tmp_path):
        model = GmicModel(MICRO)
        model.save(tmp_path / "m.ckpt")
        again = GmicModel.load(tmp_path / "m.ckpt")
        assert isinstance(again.cfg.stage_channels, tuple)


def _fake_outputs(n, t, heads=0.5, sal=0.5, side=4):
    const = lambda v, shape: ad.Tensor(np.full(shape, v))
    return GmicOutputs(y_global=const(heads, (n, t)), y_local=const(heads, (n, t)),
                       y_fusion=const(heads, (n, t)),
                       saliency=const(sal, (n, t, side, side)),
                       rois=[], attention=const(1.0 / t, (n, t)))


class TestLosses:
    def test_half_probability_heads(self):
        out = _fake_outputs(2, 4)
        y = np.array([[1, 0, 0, 0], [1, 1, 1, 0]], dtype=float)
        loss = gmic.gmic_loss(y, out, sparsity_weight=0.0)
        assert abs(loss.data - 3 * math.log(2)) < 1e-12

    def test_sparsity_term(self):
        out = _fake_outputs(1, 4, sal=0.5, side=4)
        y = np.zeros((1, 4))
        loss = gmic.gmic_loss(y, out, sparsity_weight=0.1)
        expect = 3 * math.log(2) + 0.1 * 0.5 * 16
        assert abs(loss.data - expect) < 1e-12

    def test_label_shape_mismatch(self):
        out = _fake_outputs(2, 4)
        with pytest.raises(ValueError):
            gmic.gmic_loss(np.zeros((2, 3)), out, 0.0)

    def test_drc_loss_censored_hand_value(self):
        n, t = 1, survival.NUM_CHANNELS
        p = np.full((n, t), 0.1)
        const = ad.Tensor(p)
        out = GmicOutputs(y_global=const, y_local=ad.Tensor(p.copy()),
                          y_fusion=ad.Tensor(p.copy()),
                          saliency=ad.Tensor(np.full((n, t, 4, 4), 0.2)),
                          rois=[], attention=ad.Tensor(np.full((n, t), 1.0 / t)))
        label = survival.SurvivalLabel(event_observed=False, interval_index=None, censor_index=1)
        loss = gmic.drc_loss([label], out, sparsity_weight=0.0)
        assert abs(loss.data - 3 * -math.log(0.9)) < 1e-12

    def test_drc_sparsity_covers_all_channels(self):
        n, t = 1, survival.NUM_CHANNELS
        p = np.full((n, t), 0.1)
        out = GmicOutputs(y_global=ad.Tensor(p), y_local=ad.Tensor(p.copy()),
                          y_fusion=ad.Tensor(p.copy()),
                          saliency=ad.Tensor(np.full((n, t, 4, 4), 0.2)),
                          rois=[], attention=ad.Tensor(np.full((n, t), 1.0 / t)))
        label = survival.SurvivalLabel(event_observed=False, interval_index=None, censor_index=1)
        loss = gmic.drc_loss([label], out, sparsity_weight=0.01)
        expect = 3 * -math.log(0.9) + 0.01 * 0.2 * t * 16
        assert abs(loss.data - expect) < 1e-10


def _loss_for_params(model, names, arrays, x, y, loss_kind):
    for name, arr in zip(names, arrays):
        model.params[name].data = arr.astype(np.float64)
    out = model.forward(x)
    if loss_kind == "gmic":
        return gmic.gmic_loss(y, out, sparsity_weight=1e-3)
    return gmic.drc_loss(y, out, sparsity_weight=1e-3)


class TestEndToEndGradients:
    CHECK = ["global.stage0.w", "saliency.w", "local.stage0.w",
             "attention.score", "fusion.w", "fusion.b"]

    def _run(self, cfg, labels, loss_kind):
        model = GmicModel(cfg)
        rng = np.random.default_rng(12)
        x = rng.random((2, cfg.input_side, cfg.input_side))
        names = self.CHECK
        base = [model.params[n].data.copy() for n in names]

        loss = _loss_for_params(model, names, base, x, labels, loss_kind)
        loss.backward()
        analytic = [model.params[n].grad.copy() for n in names]
        for i, name in enumerate(names):
            def f(arr, i=i):
                arrays = [b.copy() for b in base]
                arrays[i] = arr
                return _loss_for_params(model, names, arrays, x, labels, loss_kind).data
            num = numeric_grad(f, base[i])
            err = max_relative_error(analytic[i], num)
            assert err < 1e-3, f"{loss_kind} {name}: rel error {err:.2e}"

    def test_classifier_loss_gradients(self):
        y = np.array([[1, 1, 0, 0], [0, 0, 0, 0]], dtype=float)
        self._run(MICRO, y, "gmic")

    def test_drc_loss_gradients(self):
        cfg = GmicConfig(**{**MICRO.__dict__, "num_windows": survival.NUM_CHANNELS})
        labels = [survival.SurvivalLabel(True, 3, 2),
                  survival.SurvivalLabel(False, None, 5)]
        self._run(cfg, labels, "drc")


class TestExport:
    def test_saliency_and_roi_files(self, tmp_path):
        model = GmicModel(MICRO)
        x = np.random.default_rng(10).random((1, 16, 16))
        out = model.forward(x)
        labels = ["24h", "48h", "72h", "96h"]
        gmic.export_saliency(tmp_path, out.saliency.data[0], out.rois[0], labels)
        for t, lab in enumerate(labels):
            img = imaging.read_pgm(tmp_path / f"saliency_{lab}.pgm")
            expect = np.rint(out.saliency.data[0, t] * imaging.PGM_MAXVAL)
            assert np.array_equal(img, expect)
        rows = (tmp_path / "roi.csv").read_text().strip().split("\n")
        assert rows[0] == "window,rank,row,col,alpha"
        assert len(rows) == 1 + len(labels) * MICRO.num_patches
        first = rows[1].split(",")
        assert first[0] == "24h" and first[1] == "1"
        assert abs(float(first[4]) - out.rois[0].alphas[0]) < 1e-15
