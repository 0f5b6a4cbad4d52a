import numpy as np
import pytest
import torch

from dyolo.detector import (ABLATIONS, DYOLO, Backbone, DetectorConfig, Head, assign_targets, box_iou_np,
                            count_parameters, decode_and_nms, decode_level, detection_loss, nms)

from conftest import central_difference_check


def _x(n=2, size=64, seed=0):
    return torch.rand(n, 3, size, size, generator=torch.Generator().manual_seed(seed))


@pytest.mark.parametrize("name", sorted(ABLATIONS))
def test_every_ablation_builds_and_runs(name):
    torch.manual_seed(0)
    m = DYOLO(DetectorConfig.ablation(name)).train()
    out = m(_x(), _x(seed=1))
    assert [tuple(p.shape) for p in out.head] == [(2, 10, 8, 8), (2, 10, 4, 4), (2, 10, 2, 2)]
    assert (out.f_c is not None) == ABLATIONS[name][1]
    assert (out.f_d is not None) == ABLATIONS[name][2]


def test_config_invariants():
    with pytest.raises(ValueError):
        DetectorConfig(dual_branch=False, use_af=True)
    with pytest.raises(ValueError):
        DetectorConfig(dual_branch=True, use_fa=False, use_af=False)
    with pytest.raises(ValueError):
        DetectorConfig(conv_kind="deform")
    with pytest.raises(ValueError):
        DetectorConfig.ablation("V9")


def test_backbone_rejects_bad_input():
    with pytest.raises(ValueError):
        Backbone()(torch.zeros(1, 3, 60, 64))


def test_plain_variant_matches_bare_backbone_and_head():
    torch.manual_seed(3)
    m = DYOLO(DetectorConfig.ablation("V0")).eval()
    x = _x()
    with torch.no_grad():
        direct = Head.forward(m.head, Backbone.forward(m.backbone, x))
        out = m(x).head
    for a, b in zip(direct, out):
        torch.testing.assert_close(a, b, rtol=0, atol=0)


def test_inference_excludes_clear_branch():
    torch.manual_seed(0)
    m = DYOLO(DetectorConfig.ablation("V5"))
    full = count_parameters(m.state_dict())
    inf = count_parameters(m.inference_state_dict())
    assert inf == full - count_parameters(m.cfe.state_dict())
    assert not any(k.startswith("cfe.") for k in m.inference_state_dict())
    m.eval()
    m.cfe.calls = 0
    with torch.no_grad():
        m(_x())
        m(_x(), _x(seed=1))
    assert m.cfe.calls == 0
    with pytest.raises(RuntimeError):
        m.cfe_forward(_x())
    fresh = DYOLO(DetectorConfig.ablation("V5"), build_cfe=False)
    assert fresh.cfe is None
    fresh.load_inference_state_dict(m.inference_state_dict())
    fresh.eval()
    with torch.no_grad():
        for a, b in zip(fresh(_x()).head, m(_x()).head):
            torch.testing.assert_close(a, b, rtol=0, atol=0)


def test_training_with_clear_branch_needs_clean_image():
    m = DYOLO(DetectorConfig.ablation("V5")).train()
    with pytest.raises(ValueError):
        m(_x())


def test_frozen_clear_branch_stays_in_eval_mode():
    m = DYOLO(DetectorConfig.ablation("V5"))
    m.cfe.freeze()
    m.train()
    assert not m.cfe.training and m.backbone.training
    f = m.cfe_forward(_x())
    assert all(not t.requires_grad for t in f)


def test_clear_branch_matchers_start_as_identity():
    m = DYOLO(DetectorConfig.ablation("V5")).train()
    x = _x()
    m.cfe.eval()
    with torch.no_grad():
        raw = m.cfe.backbone(x)
        matched = m.cfe(x)
    for a, b in zip(raw, matched):
        torch.testing.assert_close(a, b)


def test_forward_deterministic():
    torch.manual_seed(7)
    m = DYOLO(DetectorConfig.ablation("V5")).eval()
    x = _x()
    with torch.no_grad():
        a = m(x).head
        b = m(x).head
    for u, v in zip(a, b):
        assert torch.equal(u, v)


def test_backbone_gradcheck():
    torch.manual_seed(0)
    bb = Backbone((4, 6, 8), 4).double().eval()
    x = torch.rand(1, 3, 32, 32, dtype=torch.float64, requires_grad=True)
    err = central_difference_check(lambda: torch.cat([f.flatten() for f in bb(x)]), [x], eps=1e-6)
    assert err < 1e-5


# --- NMS ---------------------------------------------------------------------


def nms_oracle(boxes, scores, classes, thr):
    """Recursive definition: keep the best box, drop same-class overlaps, repeat."""
    items = sorted(range(len(scores)), key=lambda i: (-scores[i], *boxes[i]))
    keep = []
    while items:
        best = items.pop(0)
        keep.append(best)
        rest = []
        for j in items:
            a, b = boxes[best], boxes[j]
            ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
            iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
            inter = ix * iy
            u = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
            if not (classes[j] == classes[best] and inter / u > thr):
                rest.append(j)
        items = rest
    return keep


def test_nms_matches_oracle(rng):
    for _ in range(300):
        n = int(rng.integers(0, 25))
        xy = rng.uniform(0, 40, (n, 2))
        wh = rng.uniform(2, 20, (n, 2))
        boxes = np.concatenate([xy, xy + wh], 1)
        scores = rng.integers(1, 6, n) / 5.0
        classes = rng.integers(0, 3, n)
        thr = float(rng.choice([0.3, 0.5, 0.7]))
        assert nms(boxes, scores, classes, thr) == nms_oracle(boxes.tolist(), scores.tolist(), classes.tolist(), thr)


def test_nms_permutation_invariant(rng):
    boxes = np.array([[0, 0, 10, 10], [1, 1, 11, 11], [0, 0, 10, 10], [30, 30, 40, 40]], float)
    scores = np.array([0.9, 0.9, 0.5, 0.9])
    classes = np.array([0, 0, 0, 0])
    kept = {tuple(boxes[i]) for i in nms(boxes, scores, classes, 0.5)}
    for _ in range(10):
        p = rng.permutation(4)
        assert {tuple(boxes[p][i]) for i in nms(boxes[p], scores[p], classes[p], 0.5)} == kept


def test_nms_is_class_aware():
    boxes = np.array([[0, 0, 10, 10], [0, 0, 10, 10]], float)
    assert nms(boxes, [0.9, 0.8], [0, 1], 0.5) == [0, 1]
    assert nms(boxes, [0.9, 0.8], [0, 0], 0.5) == [0]


def _head_maps(seed=0, n=2):
    g = torch.Generator().manual_seed(seed)
    return [torch.randn(n, 10, s, s, generator=g) for s in (8, 4, 2)]


def test_decode_conf_threshold_one_gives_nothing():
    out = decode_and_nms(_head_maps(), conf_thr=1.0)
    assert out == [[], []]


def test_decode_scores_sorted_and_above_threshold():
    for det in decode_and_nms(_head_maps(1), conf_thr=0.1, iou_thr=0.5, image_size=(64, 64)):
        conf = [d.confidence for d in det]
        assert conf == sorted(conf, reverse=True) and all(c > 0.1 for c in conf)
        for d in det:
            x0, y0, x1, y1 = d.box
            assert 0 <= x0 < x1 <= 64 and 0 <= y0 < y1 <= 64


def test_decode_threshold_validation():
    with pytest.raises(ValueError):
        decode_and_nms(_head_maps(), conf_thr=1.5)


def test_decode_level_geometry():
    pred = torch.zeros(1, 10, 2, 2)
    boxes, _, _ = decode_level(pred, 16, 5)
    d = float(torch.nn.functional.softplus(torch.zeros(())) * 16)
    torch.testing.assert_close(boxes[0, 0], torch.tensor([8 - d, 8 - d, 8 + d, 8 + d]))
    torch.testing.assert_close(boxes[0, 3], torch.tensor([24 - d, 24 - d, 24 + d, 24 + d]))


# --- targets and loss --------------------------------------------------------


def test_assign_targets_levels():
    shapes = [(8, 8), (4, 4), (2, 2)]
    boxes = [[(4, 4, 20, 14), (10, 10, 50, 40), (0, 0, 64, 60)]]
    t = assign_targets(boxes, [[0, 1, 2]], shapes)
    assert t[0][0].any() and set(t[0][1][t[0][0]]) == {0}
    assert set(t[1][1][t[1][0]]) == {1}
    assert set(t[2][1][t[2][0]]) == {2}


def test_assign_targets_tiny_box_gets_center_cell():
    t = assign_targets([[(17, 17, 19, 19)]], [[4]], [(8, 8), (4, 4), (2, 2)])
    pos = t[0][0].reshape(8, 8)
    assert pos.sum() == 1 and pos[2, 2]


def test_detection_loss_finite_with_gradient():
    torch.manual_seed(0)
    maps = [torch.zeros(1, 10, s, s, requires_grad=True) for s in (8, 4, 2)]
    gt = [[(8.0, 8.0, 24.0, 24.0)]]
    base = detection_loss(maps, gt, [[1]])
    base.backward()
    assert torch.isfinite(base) and base > 0
    assert maps[0].grad.abs().sum() > 0


def test_detection_loss_descends():
    torch.manual_seed(0)
    m = DYOLO(DetectorConfig.ablation("V0")).train()
    opt = torch.optim.SGD(m.parameters(), lr=0.01, momentum=0.9)
    x = _x(2)
    gt_boxes = [[(8.0, 8.0, 30.0, 26.0)], [(30.0, 20.0, 60.0, 60.0)]]
    gt_cls = [[0], [2]]
    losses = []
    for _ in range(30):
        opt.zero_grad()
        loss = detection_loss(m(x).head, gt_boxes, gt_cls)
        loss.backward()
        opt.step()
        losses.append(loss.item())
    assert losses[-1] < 0.5 * losses[0]


def test_box_iou_np_matches_scalar(rng):
    from dyolo.evaluation import iou

    a = np.concatenate([rng.uniform(0, 10, (5, 2)), rng.uniform(11, 20, (5, 2))], 1)
    b = np.concatenate([rng.uniform(0, 10, (4, 2)), rng.uniform(11, 20, (4, 2))], 1)
    m = box_iou_np(a, b)
    for i in range(5):
        for j in range(4):
            assert m[i, j] == pytest.approx(iou(a[i], b[j]), abs=1e-12)
