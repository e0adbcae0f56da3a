import numpy as np
import pytest

from texsplat.denoiser import (Denoiser, DenoiserConfig, PromptTokens,
                               init_params, prompt_from_names)
from texsplat.errors import EmptyMaskError
from texsplat.guidance import GuidanceWeights
from texsplat.latent import masked_encode
from texsplat.progressive import (EditSettings, acquire_reference,
                                  build_reference_set, edit_all, edit_view,
                                  order_views, refine_depth)
from texsplat.render import make_view_record
from texsplat.scene import camera_ring, synth_scene
from texsplat.schedule import assign_kappa, build_schedule
from texsplat.textures import texture_patch


def ring_poses(count=8):
    return camera_ring(count, 3.4, 18.0, 32, 32, 32.0)


class TestOrderViews:
    def test_eight_ring_oracle(self):
        # brute-force: alternating minimal angular distance, ties to increasing
        o = order_views(ring_poses(8), 0)
        assert o.sequence == (0, 1, 7, 2, 6, 3, 5, 4)

    def test_two_views(self):
        o = order_views(ring_poses(2), 1)
        assert o.sequence == (1, 0)

    def test_nonzero_tau(self):
        o = order_views(ring_poses(8), 3)
        assert o.sequence == (3, 4, 2, 5, 1, 6, 0, 7)

    def test_prefix_contiguity_random_rings(self):
        rng = np.random.default_rng(0)
        for _ in range(30):
            n = int(rng.integers(2, 65))
            azimuths = np.sort(rng.choice(3600, size=n, replace=False) / 10.0)
            poses = {i: p for i, p in enumerate(
                camera_ring(n, 3.4, 18.0, 16, 16, 16.0))}
            import dataclasses
            poses = {i: dataclasses.replace(p, azimuth=float(azimuths[i]))
                     for i, p in poses.items()}
            tau = int(rng.integers(0, n))
            o = order_views(poses, tau)
            ring = sorted(range(n), key=lambda i: azimuths[i])
            for k in range(1, n + 1):
                prefix = set(o.sequence[:k])
                positions = sorted(ring.index(i) for i in prefix)
                # contiguous arc mod n: exactly one gap in the circular order
                gaps = sum(1 for a, b in zip(positions, positions[1:] + [positions[0] + n])
                           if b - a > 1)
                assert gaps <= 1, (k, o.sequence)

    def test_duplicate_azimuth_error(self):
        import dataclasses
        poses = ring_poses(4)
        poses = [poses[0], dataclasses.replace(poses[1], azimuth=0.0),
                 poses[2], poses[3]]
        with pytest.raises(ValueError):
            order_views(poses, 0)


class SceneFixture:
    def __init__(self, seed=0, views=8, size=32):
        self.scene, self.poses = synth_scene("sphere-blob", seed,
                                             ring_count=views, num_splats=48,
                                             width=size, height=size)
        self.views = {i: make_view_record(self.scene, p, i)
                      for i, p in enumerate(self.poses)}
        self.ordering = order_views({i: v.pose for i, v in self.views.items()}, 0)
        self.patch = texture_patch("checker-green", size=size, seed=0)
        self.acq = acquire_reference("crop-paste", self.views[0], None, None,
                                     patch=self.patch)


@pytest.fixture(scope="module")
def fx():
    return SceneFixture()


class TestReferenceSet:
    def test_reference_view_singleton(self, fx):
        refs = build_reference_set(0, 0, fx.ordering, {0: fx.acq.image},
                                   fx.views, False, 0.6)
        assert len(refs.entries) == 1
        assert refs.entries[0].tag == "reference"
        assert refs.entries[0].weight == 1.0

    def test_adjacent_view_dedupes_to_reference(self, fx):
        # predecessor of view 1 is the reference itself
        refs = build_reference_set(1, 0, fx.ordering, {0: fx.acq.image},
                                   fx.views, False, 0.6)
        assert len(refs.entries) == 1
        assert abs(refs.entries[0].weight - 1.0) < 1e-12

    def test_distant_view_two_entries(self, fx):
        edited = {0: fx.acq.image, 1: fx.views[1].rendered}
        refs = build_reference_set(2, 0, fx.ordering, edited, fx.views,
                                   False, 0.6)
        assert [e.tag for e in refs.entries] == ["reference", "previous"]
        assert abs(sum(e.weight for e in refs.entries) - 1.0) < 1e-12

    def test_symmetric_adds_pixelexact_flip(self, fx):
        edited = {0: fx.acq.image, 1: fx.views[1].rendered}
        refs = build_reference_set(2, 0, fx.ordering, edited, fx.views,
                                   True, 0.6)
        assert refs.entries[-1].tag == "flipped"
        flipped_img = fx.acq.image[:, ::-1]
        flipped_mask = fx.views[0].mask[:, ::-1]
        expect = masked_encode(flipped_img, flipped_mask)
        assert np.array_equal(refs.entries[-1].latent, expect)

    def test_flip_is_involution(self, fx):
        img = fx.acq.image
        assert np.array_equal(img[:, ::-1][:, ::-1], img)

    def test_missing_predecessor_error(self, fx):
        with pytest.raises(ValueError):
            build_reference_set(2, 0, fx.ordering, {0: fx.acq.image},
                                fx.views, False, 0.6)

    def test_propagation_off_uses_reference_only(self, fx):
        edited = {0: fx.acq.image, 1: fx.views[1].rendered}
        refs = build_reference_set(4, 0, fx.ordering, edited, fx.views,
                                   False, 0.6, propagate=False)
        assert [e.tag for e in refs.entries] == ["reference"]


class TestAcquireReference:
    def test_crop_paste_recolors_mask_only(self, fx):
        view = fx.views[0]
        img = fx.acq.image
        assert np.array_equal(img[~view.mask], view.rendered[~view.mask])
        tiled_ok = np.any(img[view.mask] != view.rendered[view.mask])
        assert tiled_ok

    def test_crop_paste_requires_patch(self, fx):
        with pytest.raises(ValueError):
            acquire_reference("crop-paste", fx.views[0], None, None)

    def test_empty_mask_error(self, fx):
        import copy
        view = copy.copy(fx.views[0])
        view.mask = np.zeros_like(view.mask)
        with pytest.raises(EmptyMaskError):
            acquire_reference("crop-paste", view, None, None, patch=fx.patch)

    def test_unknown_mode(self, fx):
        with pytest.raises(ValueError):
            acquire_reference("telepathy", fx.views[0], None, None)


class TestRefineDepth:
    def test_changes_only_inside_band(self, fx):
        from scipy import ndimage
        view = fx.views[0]
        refined = refine_depth(view.depth, view.mask, dilate_radius=3, blur_size=5)
        m = view.mask
        band = ndimage.binary_dilation(m, iterations=3) & ~ndimage.binary_erosion(m, iterations=3)
        changed = refined != view.depth
        assert np.all(~changed | band)
        interior = ndimage.binary_erosion(m, iterations=3)
        assert np.array_equal(refined[interior], view.depth[interior])


class SmallEditFixture:
    def __init__(self):
        cfg = DenoiserConfig()
        self.model = Denoiser(init_params(cfg, 4), cfg)
        self.schedule = build_schedule(20, 1e-4, 0.02)
        self.sf = SceneFixture()
        self.prompt = prompt_from_names("checker-green")


@pytest.fixture(scope="module")
def efx():
    return SmallEditFixture()


class TestEditView:
    def test_background_pixels_exact(self, efx):
        view = efx.sf.views[1]
        view.latent = masked_encode(view.rendered, view.mask)
        refs = build_reference_set(1, 0, efx.sf.ordering,
                                   {0: efx.sf.acq.image}, efx.sf.views,
                                   False, 0.6)
        bg = efx.sf.scene.background
        img, trace = edit_view(view, refs, efx.prompt, None,
                               GuidanceWeights(1.0, 0.5, 0.0), 5,
                               efx.schedule, efx.model, bg)
        assert np.array_equal(img[~view.mask], np.tile(bg, (int((~view.mask).sum()), 1)))
        assert len(trace.steps) == 5

    def test_deterministic(self, efx):
        view = efx.sf.views[1]
        view.latent = masked_encode(view.rendered, view.mask)
        refs = build_reference_set(1, 0, efx.sf.ordering,
                                   {0: efx.sf.acq.image}, efx.sf.views,
                                   False, 0.6)
        args = (view, refs, efx.prompt, None, GuidanceWeights(1.0, 0.5, 0.0),
                4, efx.schedule, efx.model, efx.sf.scene.background)
        a, _ = edit_view(*args)
        b, _ = edit_view(*args)
        assert np.array_equal(a, b)

    def test_smaller_kappa_changes_view_less(self, efx):
        # partial depth controls edit strength: the same view edited at the
        # reference depth moves less than at the larger depth
        deltas = {}
        for kappa in (3, 12):
            view = efx.sf.views[1]
            view.latent = masked_encode(view.rendered, view.mask)
            refs = build_reference_set(1, 0, efx.sf.ordering,
                                       {0: efx.sf.acq.image}, efx.sf.views,
                                       False, 0.6)
            img, _ = edit_view(view, refs, efx.prompt, None,
                               GuidanceWeights(2.0, 1.0, 0.0), kappa,
                               efx.schedule, efx.model, efx.sf.scene.background)
            m = view.mask
            deltas[kappa] = float(np.sqrt(np.mean(
                (img[m] - view.rendered[m]) ** 2)))
        assert deltas[3] < deltas[12]


class TestEditAll:
    def test_single_view_keeps_acquisition(self, efx):
        sf = SceneFixture(views=1)
        kappas = {0: 3}
        edited, traces = edit_all(sf.views, 0, sf.acq.image, efx.prompt, None,
                                  kappas, efx.schedule, efx.model,
                                  EditSettings(weights=GuidanceWeights(1, 1, 0)),
                                  sf.scene.background)
        assert set(edited) == {0}
        assert np.array_equal(edited[0], sf.acq.image)
        assert traces == {}

    def test_every_view_edited_once_predecessor_first(self, efx):
        sf = SceneFixture()
        kappas = assign_kappa(list(range(8)), 0, 2, 4)
        edited, traces = edit_all(sf.views, 0, sf.acq.image, efx.prompt, None,
                                  kappas, efx.schedule, efx.model,
                                  EditSettings(weights=GuidanceWeights(1.0, 0.5, 0.0)),
                                  sf.scene.background)
        assert set(edited) == set(range(8))
        assert set(traces) == set(range(8))
        # reference view gets fewer steps than the others
        assert len(traces[0].steps) == 2
        assert all(len(traces[i].steps) == 4 for i in range(1, 8))
