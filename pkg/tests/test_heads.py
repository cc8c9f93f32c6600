import itertools

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from torch.nn import functional as F

from attentionmask.backbone import ScaleSpec
from attentionmask.heads import (AttentionalHead, ObjectnessHead, Proposal, SegmentationHead, assemble_proposal,
                                 attentional_head, bilinear_matrix, box_iou, box_nms, objectness_score,
                                 segment_window, select_top_windows)
from attentionmask.masks import mask_bbox
from attentionmask.sampler import WindowRef

from fdcheck import fd_errors


def test_objectness_zero_final_layer_is_half():
    head = ObjectnessHead(8)
    with torch.no_grad():
        head.fc.weight.zero_()
        head.fc.bias.zero_()
    for seed in range(5):
        torch.manual_seed(seed)
        assert objectness_score(torch.randn(8, 10, 10) * 5, head) == 0.5


def test_objectness_scores_in_unit_interval():
    torch.manual_seed(0)
    head = ObjectnessHead(4, 8)
    with torch.no_grad():
        scores = torch.sigmoid(head(torch.randn(10_000, 4, 10, 10) * 3))
    assert scores.shape == (10_000,)
    assert bool(((scores >= 0) & (scores <= 1)).all())


def test_attentional_gate_identity_and_annihilator():
    head = AttentionalHead(6)
    window = torch.randn(6, 10, 10)
    with torch.no_grad():
        head.conv.weight.zero_()
        head.conv.bias.fill_(20.0)
        weighted, attn = attentional_head(window, head)
        assert attn.shape == (10, 10)
        assert (weighted - window).abs().max() <= 1e-6
        head.conv.bias.fill_(-1e4)
        weighted, attn = attentional_head(window, head)
        assert torch.equal(attn, torch.zeros(10, 10))
        assert not weighted.any()


def test_gate_multiplies_every_channel():
    torch.manual_seed(1)
    head = AttentionalHead(3)
    window = torch.randn(3, 10, 10)
    with torch.no_grad():
        weighted, attn = attentional_head(window, head)
    assert torch.allclose(weighted, window * attn[None])


def test_segmentation_shape_and_zero_init():
    head = SegmentationHead(8)
    with torch.no_grad():
        out = segment_window(torch.randn(8, 10, 10), head)
        assert out.shape == (40, 40)
        head.up2.weight.zero_()
        head.up2.bias.zero_()
        assert torch.equal(segment_window(torch.randn(8, 10, 10), head), torch.zeros(40, 40))


def test_segmentation_other_sizes_resize():
    head = SegmentationHead(4, out_size=28)
    assert head(torch.randn(2, 4, 10, 10)).shape == (2, 28, 28)


def test_heads_gradient():
    torch.manual_seed(0)
    att, seg, obj = AttentionalHead(3).double(), SegmentationHead(3, 4).double(), ObjectnessHead(3, 4).double()
    x = torch.randn(2, 3, 10, 10, dtype=torch.float64)
    target = (torch.rand(2, 40, 40) > 0.5).double()

    def loss():
        weighted, gate = att(x)
        return (F.binary_cross_entropy_with_logits(seg(weighted), target)
                + F.binary_cross_entropy_with_logits(obj(x), torch.tensor([1.0, 0.0], dtype=torch.float64))
                + gate.pow(2).mean())

    params = itertools.chain(att.named_parameters("att"), seg.named_parameters("seg"), obj.named_parameters("obj"))
    errors = fd_errors(loss, list(params), max_elems=16, n_dirs=3)
    assert max(errors.values()) < 1e-4, errors


# --- paste-back -------------------------------------------------------------


@pytest.mark.parametrize("out_len,in_len", [(160, 40), (80, 40), (40, 40), (25, 40), (17, 5)])
def test_bilinear_matrix_matches_interpolate(out_len, in_len):
    x = torch.randn(1, 1, in_len, 3, dtype=torch.float64)
    ref = F.interpolate(x, size=(out_len, 3), mode="bilinear", align_corners=False)[0, 0].numpy()
    m = bilinear_matrix(out_len, in_len)
    np.testing.assert_allclose(m @ x[0, 0].numpy(), ref, atol=1e-12)
    np.testing.assert_allclose(bilinear_matrix(out_len, in_len, 3, out_len - 2), m[3:out_len - 2])
    np.testing.assert_allclose(m.sum(1), 1.0)


def test_uniform_positive_logits_fill_rect():
    ref = WindowRef(ScaleSpec(8), (10, 12))
    p = assemble_proposal(torch.full((40, 40), 10.0), ref, 0.9, (200, 200))
    x, y, w, h = ref.image_rect
    assert p.area == w * h and mask_bbox(p.mask) == (x, y, w, h)
    assert p.score == 0.9 and p.source is ref


def test_paste_clips_at_borders():
    ref = WindowRef(ScaleSpec(8), (0, 0))  # rect (-32, -32, 80, 80)
    p = assemble_proposal(np.full((40, 40), 10.0), ref, 0.5, (100, 60))
    assert p.area == 48 * 48 and mask_bbox(p.mask) == (0, 0, 48, 48)
    far = WindowRef(ScaleSpec(8), (30, 30))
    assert assemble_proposal(np.full((40, 40), 10.0), far, 0.5, (100, 60)).area == 0


def test_resize_matches_nearest_neighbour_oracle():
    seg = np.full((40, 40), -10.0)
    seg[10:30, 10:30] = 10.0
    ref = WindowRef(ScaleSpec(16), (6, 6))  # rect (32, 32, 160, 160)
    p = assemble_proposal(seg, ref, 1.0, (256, 256))
    crop = p.mask[32:192, 32:192]
    idx = np.arange(160) * 40 // 160
    oracle = seg[idx][:, idx] > 0
    x, y, w, h = mask_bbox(crop)
    ox, oy, ow, oh = mask_bbox(oracle)
    assert (ox, oy, ow, oh) == (40, 40, 80, 80)
    for a, b in [(x, ox), (y, oy), (x + w, ox + ow), (y + h, oy + oh)]:
        assert abs(a - b) <= 1
    assert not p.mask[:32].any() and not p.mask[:, :32].any()


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), stride=st.sampled_from([8, 16, 24, 32]), r=st.integers(-2, 14),
       c=st.integers(-2, 14))
def test_masks_never_exceed_source_rect(seed, stride, r, c):
    logits = np.random.default_rng(seed).normal(0, 3, (40, 40))
    ref = WindowRef(ScaleSpec(stride), (r, c))
    p = assemble_proposal(logits, ref, 0.5, (120, 100))
    x, y, w, h = ref.image_rect
    allowed = np.zeros((120, 100), dtype=bool)
    allowed[max(y, 0):max(y + h, 0), max(x, 0):max(x + w, 0)] = True
    assert not (p.mask & ~allowed).any()


def _scored(rng, n):
    out = []
    for _ in range(n):
        s = int(rng.choice([8, 16, 24]))
        ref = WindowRef(ScaleSpec(s), (int(rng.integers(0, 4)), int(rng.integers(0, 4))),
                        float(rng.choice([0.2, 0.5, 0.9])))
        out.append((ref, float(rng.choice([0.1, 0.4, 0.4, 0.7]))))
    return out


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n=st.integers(0, 40), k=st.integers(1, 50))
def test_select_top_windows_matches_sort_and_ignores_input_order(seed, n, k):
    rng = np.random.default_rng(seed)
    scored = _scored(rng, n)
    key = lambda it: (-it[1], -it[0].attention, -it[0].scale.stride, it[0].center)  # noqa: E731
    expected = sorted(scored, key=key)[:k]
    got = select_top_windows(scored, k)
    assert got == expected
    perm = list(scored)
    rng.shuffle(perm)
    assert [key(a) for a in select_top_windows(perm, k)] == [key(a) for a in got]
    assert len(got) == min(k, n)


def test_select_top_windows_rejects_zero_k():
    with pytest.raises(ValueError):
        select_top_windows([], 0)


def test_box_nms():
    def prop(x, y, w, h, score):
        m = np.zeros((50, 50), dtype=bool)
        m[y:y + h, x:x + w] = True
        return Proposal(m, score)

    props = [prop(0, 0, 20, 20, 0.9), prop(1, 1, 20, 20, 0.8), prop(30, 30, 10, 10, 0.7)]
    assert box_iou((0, 0, 10, 10), (5, 0, 10, 10)) == pytest.approx(1 / 3)
    kept = box_nms(props, 0.7)
    assert [p.score for p in kept] == [0.9, 0.7]
