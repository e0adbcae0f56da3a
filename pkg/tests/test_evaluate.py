import numpy as np
import pytest

from texsplat.errors import EmptyMaskError
from texsplat.evaluate import (EvalReport, NoOverlapError, eval_consistency,
                               eval_similarity)
from texsplat.render import make_view_record
from texsplat.scene import synth_scene


@pytest.fixture(scope="module")
def ring():
    scene, poses = synth_scene("sphere-blob", 3, ring_count=8, num_splats=48,
                               width=64, height=64)
    views = {i: make_view_record(scene, p, i) for i, p in enumerate(poses)}
    renders = {i: v.rendered for i, v in views.items()}
    return scene, views, renders


class TestConsistency:
    def test_self_consistency_below_threshold(self, ring):
        _, views, renders = ring
        err, pairs = eval_consistency(renders, views)
        assert err < 0.02
        assert len(pairs) > 0

    def test_random_recoloring_is_worse(self, ring):
        _, views, renders = ring
        base, _ = eval_consistency(renders, views)
        rng = np.random.default_rng(0)
        hueshift = {i: np.clip(r + rng.uniform(-0.3, 0.3, size=3), 0, 1)
                    for i, r in renders.items()}
        worse, _ = eval_consistency(hueshift, views)
        assert worse > base

    def test_symmetric_under_view_reversal(self, ring):
        _, views, renders = ring
        err_fwd, pairs_fwd = eval_consistency(renders, views)
        rev_views = {7 - i: views[i] for i in views}
        rev_renders = {7 - i: renders[i] for i in renders}
        err_rev, pairs_rev = eval_consistency(rev_renders, rev_views)
        assert abs(err_fwd - err_rev) < 1e-12
        assert len(pairs_fwd) == len(pairs_rev)

    def test_pair_gap_limit(self, ring):
        _, views, renders = ring
        _, pairs = eval_consistency(renders, views, max_gap_deg=90.0)
        for i, j, _, _ in pairs:
            gap = abs(views[i].pose.azimuth - views[j].pose.azimuth) % 360
            assert min(gap, 360 - gap) <= 90.0

    def test_needs_two_views(self, ring):
        _, views, renders = ring
        with pytest.raises(ValueError):
            eval_consistency({0: renders[0]}, {0: views[0]})

    def test_no_overlap_error(self, ring):
        import copy
        _, views, renders = ring
        blanked = {}
        for i, v in views.items():
            v2 = copy.copy(v)
            v2.mask = np.zeros_like(v.mask)
            v2.depth = np.zeros_like(v.depth)
            blanked[i] = v2
        with pytest.raises(NoOverlapError):
            eval_consistency(renders, blanked)


class TestSimilarity:
    def test_identity_gives_unit_cosine(self, ring):
        _, views, renders = ring
        sim, per_view = eval_similarity({0: renders[0]}, views, renders[0],
                                        views[0].mask)
        assert abs(per_view[0] - 1.0) < 1e-9

    def test_range(self, ring):
        _, views, renders = ring
        rng = np.random.default_rng(1)
        noise_ref = rng.random((64, 64, 3))
        sim, per_view = eval_similarity(renders, views, noise_ref, views[0].mask)
        assert -1.0 <= sim <= 1.0
        assert all(-1.0 <= v <= 1.0 for v in per_view.values())

    def test_empty_mask(self, ring):
        _, views, renders = ring
        with pytest.raises(EmptyMaskError):
            eval_similarity(renders, views, renders[0],
                            np.zeros_like(views[0].mask))


class TestReport:
    def test_text_roundtrip_stability(self):
        rep = EvalReport(consistency=0.0123456789012345,
                         similarity=0.5, baseline_consistency=0.01,
                         baseline_similarity=0.4,
                         per_view_similarity={0: 0.5, 1: 0.25},
                         pair_errors=[(0, 1, 0.02, 100)],
                         notes=["x"])
        text1 = rep.to_text()
        text2 = rep.to_text()
        assert text1 == text2
        assert "consistency_error = 0.0123456789012345" in text1
        assert "summary:" in text1
