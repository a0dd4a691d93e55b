import dataclasses
import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from salrank import autograd as ag
from salrank.autograd import Tensor
from salrank.gradsuite import check_case, end_to_end_case
from salrank.params import load_params, map_tensors, named_tensors, save_params
from salrank.rankpipe import boxes as bx
from salrank.rankpipe.losses import (
    GroundTruth,
    dice_loss,
    pairwise_rank_loss,
    set_prediction_loss,
    stage_set_loss,
)
from salrank.rankpipe.matching import assignment_cost, hungarian_match
from salrank.rankpipe.model import (
    PipelineConfig,
    PipelineParams,
    StageOutput,
    context_features,
    forward,
    initial_state,
    run_pipeline,
    stage_forward,
)
from salrank.rankpipe.roi import roi_extract
from salrank.rankpipe.scenes import SceneConfig, generate_scene, generate_scenes, write_pgm
from salrank.rankpipe.train import (
    NumericError,
    OptimizerState,
    TrainConfig,
    apply_update,
    loss_and_grads,
    loss_reduction,
    train_step,
)

SMALL = PipelineConfig(channels=8, num_queries=4, stages=1, heads=4, image_size=16, grid=8, roi_size=4, mask_size=8)


def small_batch(n=2, seed=0):
    cfg = SceneConfig(seed=seed, image_size=16, min_radius=2.0, max_radius=4.0)
    return generate_scenes(cfg, n)


# --- boxes


def test_box_conversion_round_trip():
    b = np.random.default_rng(0).uniform(0.1, 0.9, (10, 4))
    np.testing.assert_allclose(bx.xyxy_to_cxcywh(bx.cxcywh_to_xyxy(b)), b, atol=1e-15)


def test_giou_examples():
    a = np.array([0.0, 0.0, 1.0, 1.0])
    assert bx.giou(a, a) == 1.0
    # disjoint unit squares two apart: enclosing area 3, union 2
    assert bx.giou(a, np.array([2.0, 0.0, 3.0, 1.0])) == pytest.approx(-1 / 3, abs=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_giou_range_and_tensor_agreement(seed):
    rng = np.random.default_rng(seed)
    lo = rng.uniform(0, 0.8, (2, 2))
    hi = lo + rng.uniform(1e-3, 0.2, (2, 2))
    a, b = np.concatenate([lo[0], hi[0]]), np.concatenate([lo[1], hi[1]])
    g = bx.giou(a, b)
    assert -1.0 <= g <= 1.0
    assert bx.giou(a, a) == pytest.approx(1.0, abs=1e-12)
    assert bx.tensor_giou(Tensor(a), b).item() == pytest.approx(g, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_clip_boxes_stay_in_unit_square(seed):
    raw = np.random.default_rng(seed).uniform(-1, 2, (6, 4))
    xyxy = bx.cxcywh_to_xyxy(bx.clip_boxes(Tensor(raw)).data)
    assert (xyxy >= -1e-12).all() and (xyxy <= 1 + 1e-12).all()
    assert (xyxy[:, 2] - xyxy[:, 0] >= bx.MIN_SIZE - 1e-12).all()


# --- roi


def test_roi_identity_on_aligned_grid():
    fmap = np.random.default_rng(1).normal(size=(4, 4, 3))
    out = roi_extract(Tensor(fmap), np.array([0.5, 0.5, 1.0, 1.0]), (4, 4)).data
    np.testing.assert_allclose(out, fmap, atol=1e-14)


def test_roi_constant_map():
    fmap = np.full((6, 6, 2), 1.5)
    for box in ([0.3, 0.4, 0.2, 0.5], [0.9, 0.1, 0.3, 0.3]):
        np.testing.assert_allclose(roi_extract(Tensor(fmap), np.array(box), (3, 5)).data, 1.5, atol=1e-14)


def test_roi_ramp_hand_values():
    ramp = np.arange(16.0).reshape(4, 4, 1)  # value = 4 r + c
    out = roi_extract(Tensor(ramp), np.array([0.5, 0.5, 1.0, 1.0]), (2, 2)).data[..., 0]
    # samples at pixel coordinates r, c in {0.5, 2.5}
    np.testing.assert_allclose(out, [[2.5, 4.5], [10.5, 12.5]], atol=1e-14)


def test_roi_degenerate_box():
    with pytest.raises(ValueError, match="degenerate"):
        roi_extract(Tensor(np.ones((4, 4, 1))), np.array([0.5, 0.5, 0.0, 0.5]))


def test_roi_non_finite_box():
    with pytest.raises(FloatingPointError, match="non-finite"):
        roi_extract(Tensor(np.ones((4, 4, 1))), np.array([0.5, np.nan, 0.5, 0.5]))


def test_roi_batched_matches_single():
    rng = np.random.default_rng(2)
    ctx = rng.normal(size=(2, 5, 5, 3))
    boxes = rng.uniform(0.3, 0.6, (2, 3, 4))
    out = roi_extract(Tensor(ctx), boxes, (3, 3)).data
    for b in range(2):
        for n in range(3):
            np.testing.assert_allclose(out[b, n], roi_extract(Tensor(ctx[b]), boxes[b, n], (3, 3)).data, atol=1e-14)


def test_roi_gradient_reaches_features():
    box = np.array([0.4, 0.6, 0.5, 0.3])
    w = np.random.default_rng(3).normal(size=(3, 3, 2))
    rep = ag.grad_check(lambda x: ag.total_sum(roi_extract(x, box, (3, 3)) * w),
                        np.random.default_rng(4).normal(size=(5, 5, 2)))
    assert rep.passed


# --- hungarian


def brute_force(cost):
    n_pred, n_gt = cost.shape
    perms = np.array(list(itertools.permutations(range(n_pred), n_gt)))
    totals = cost[perms, np.arange(n_gt)].sum(axis=1)
    return totals.min()


def test_hungarian_examples():
    assert hungarian_match(np.array([[1.0, 2.0], [2.0, 1.0]])).tolist() == [0, 1]
    assert assignment_cost([[1.0, 2.0], [2.0, 1.0]], [0, 1]) == 2.0
    col = np.array([[3.0], [0.5], [0.5], [2.0]])
    assert hungarian_match(col).tolist() == [1]
    assert hungarian_match(np.zeros((3, 0))).tolist() == []


def test_hungarian_ties_prefer_lowest_index():
    assert hungarian_match(np.zeros((5, 3))).tolist() == [0, 1, 2]
    cost = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]])
    # optimal total 0: (gt0->1, gt1->0), (gt0->1, gt1->2), (gt0->2, gt1->0)
    assert hungarian_match(cost).tolist() == [1, 0]


def test_hungarian_errors():
    with pytest.raises(ValueError, match="more ground truths"):
        hungarian_match(np.zeros((2, 3)))
    with pytest.raises(ValueError, match="finite"):
        hungarian_match(np.array([[np.nan]]))


def test_hungarian_matches_brute_force():
    rng = np.random.default_rng(5)
    for trial in range(300):
        n_gt = int(rng.integers(1, 7))
        n_pred = int(rng.integers(n_gt, 8))
        cost = rng.normal(size=(n_pred, n_gt)) if trial % 3 else rng.integers(0, 3, (n_pred, n_gt)).astype(float)
        assign = hungarian_match(cost)
        assert len(set(assign.tolist())) == n_gt
        assert assignment_cost(cost, assign) == pytest.approx(brute_force(cost), abs=1e-12)


# --- losses


def test_pairwise_rank_loss_examples():
    assert pairwise_rank_loss(Tensor([0.1, 0.9]), [1, 2]).item() == pytest.approx(1.3, abs=1e-15)
    assert pairwise_rank_loss(Tensor([2.0, 1.0, 0.0]), [1, 2, 3]).item() == 0.0
    assert pairwise_rank_loss(Tensor([0.3]), [1]).item() == 0.0


def test_dice_examples():
    assert dice_loss(Tensor(np.zeros((2, 2))), np.ones((2, 2))).item() == pytest.approx(2 / 7, abs=1e-15)
    g = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert dice_loss(Tensor((2 * g - 1) * 40.0), g).item() < 1e-3
    assert dice_loss(Tensor(np.full((3, 3), -40.0)), np.zeros((3, 3))).item() < 1e-3
    with pytest.raises(ag.ShapeError):
        dice_loss(Tensor(np.zeros((2, 2))), np.zeros((3, 3)))


def _gt(rank, box):
    return GroundTruth(rank, np.array(box, dtype=float), np.zeros((4, 4), bool))


def test_set_loss_perfect_prediction_is_zero():
    gts = [_gt(1, [0.1, 0.1, 0.4, 0.5]), _gt(2, [0.5, 0.5, 0.9, 0.8])]
    boxes = np.stack([bx.xyxy_to_cxcywh(g.box) for g in gts] + [[0.5, 0.5, 0.2, 0.2]])
    logits = np.full((3, 6), -60.0)
    logits[0, 0] = logits[1, 1] = logits[2, 5] = 60.0
    loss, assign = stage_set_loss(Tensor(logits), Tensor(boxes), gts)
    assert assign.tolist() == [0, 1]
    assert loss.item() < 1e-12


def test_set_loss_two_query_hand_sum():
    gt = _gt(1, [0.2, 0.2, 0.6, 0.6])
    logits = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 2.0]])  # R_max = 2, class 2 = background
    boxes = np.array([[0.4, 0.4, 0.4, 0.4], [0.5, 0.5, 0.2, 0.2]])  # query 0 equals the gt box
    loss, assign = stage_set_loss(Tensor(logits), Tensor(boxes), [gt])
    assert assign.tolist() == [0]

    def logp(row, k):
        z = logits[row]
        return z[k] - np.log(np.exp(z).sum())

    expected = 2.0 * (-logp(0, 0) - logp(1, 2))  # l1 = 0 and giou = 1 on the matched query
    assert loss.item() == pytest.approx(expected, abs=1e-12)
    # the unmatched (background) query's term scales with bg_weight
    scaled, _ = stage_set_loss(Tensor(logits), Tensor(boxes), [gt], bg_weight=0.25)
    assert scaled.item() == pytest.approx(2.0 * (-logp(0, 0) - 0.25 * logp(1, 2)), abs=1e-12)


def test_set_loss_sums_stages_and_checks_ranks():
    gts = [_gt(1, [0.2, 0.2, 0.6, 0.6])]
    rng = np.random.default_rng(6)
    outs = [StageOutput(Tensor(rng.normal(size=(3, 4))), Tensor(np.zeros(3)), Tensor(rng.uniform(0.3, 0.6, (3, 4))))
            for _ in range(2)]
    total, assigns = set_prediction_loss(outs, gts)
    parts = [stage_set_loss(o.rank_logits, o.boxes, gts)[0].item() for o in outs]
    assert total.item() == pytest.approx(sum(parts), abs=1e-12)
    assert len(assigns) == 2
    with pytest.raises(ValueError, match="rank"):
        stage_set_loss(outs[0].rank_logits, outs[0].boxes, [_gt(4, [0.1, 0.1, 0.2, 0.2])])


# --- stage_forward and the pipeline


def test_zeroed_box_regressor_keeps_boxes():
    params = PipelineParams.init(SMALL, seed=0)
    head = params.stages[0].head
    head = dataclasses.replace(head, box_w=Tensor(np.zeros(head.box_w.shape)), box_b=Tensor(np.zeros(4)))
    stage = dataclasses.replace(params.stages[0], head=head)
    images = np.stack([s.image for s in small_batch()])
    ctx = context_features(images, params, SMALL)
    state = initial_state(params, 2, SMALL)
    new_state, out = stage_forward(state, ctx, stage, SMALL)
    np.testing.assert_array_equal(new_state.box_queries.data, state.box_queries.data)


def test_single_query_is_well_formed():
    cfg = dataclasses.replace(SMALL, num_queries=1)
    outs = forward(np.stack([s.image for s in small_batch(1)]), PipelineParams.init(cfg, seed=1), cfg)
    assert outs[-1].rank_logits.shape == (1, 1, 6)
    assert np.isfinite(outs[-1].rank_logits.data).all()


def test_toy_config_shapes_and_bit_identical_rerun():
    cfg = PipelineConfig(num_queries=4, channels=16, stages=2)
    images = np.stack([s.image for s in generate_scenes(SceneConfig(seed=3), 1)])

    def run():
        return forward(images, PipelineParams.init(cfg, seed=7), cfg)

    a, b = run(), run()
    assert a[-1].rank_logits.shape == (1, 4, cfg.r_max + 1)
    assert a[-1].saliency_scores.shape == (1, 4)
    assert a[-1].boxes.shape == (1, 4, 4)
    assert a[-1].mask_logits.shape == (1, 4, 14, 14)
    for x, y in zip(a, b):
        assert x.rank_logits.data.tobytes() == y.rank_logits.data.tobytes()
        assert x.boxes.data.tobytes() == y.boxes.data.tobytes()


@pytest.mark.parametrize("seed", range(5))
def test_boxes_inside_unit_square_and_softmax_rows(seed):
    cfg = dataclasses.replace(SMALL, stages=2, box_step=3.0)  # large steps push boxes at the border
    for out in forward(np.stack([s.image for s in small_batch(2, seed)]), PipelineParams.init(cfg, seed), cfg):
        xyxy = bx.cxcywh_to_xyxy(out.boxes.data)
        assert (xyxy >= -1e-12).all() and (xyxy <= 1 + 1e-12).all()
        p = ag.softmax_axis(out.rank_logits, -1).data
        assert np.abs(p.sum(-1) - 1).max() < 1e-12


def test_all_background_gives_no_instances():
    params = PipelineParams.init(SMALL, seed=0)
    head = params.stages[-1].head
    bias = np.zeros(SMALL.num_classes)
    bias[SMALL.background] = 1e3
    stage = dataclasses.replace(params.stages[-1], head=dataclasses.replace(head, cls_b=Tensor(bias)))
    params = dataclasses.replace(params, stages=params.stages[:-1] + (stage,))
    assert run_pipeline(small_batch(1)[0].image, params, SMALL) == [[]]


@pytest.mark.parametrize("seed", range(4))
def test_pipeline_ranks_unique_and_deterministic(seed):
    cfg = dataclasses.replace(SMALL, num_queries=8)
    params = PipelineParams.init(cfg, seed=seed)
    # random logits favouring a few classes force rank collisions
    head = params.stages[-1].head
    head = dataclasses.replace(head, cls_w=Tensor(head.cls_w.data * 20))
    params = dataclasses.replace(params, stages=(dataclasses.replace(params.stages[0], head=head),))
    images = np.stack([s.image for s in small_batch(3, seed)])
    first = run_pipeline(images, params, cfg)
    second = run_pipeline(images, params, cfg)
    for insts, again in zip(first, second):
        ranks = [i.rank for i in insts]
        assert len(ranks) == len(set(ranks)) and set(ranks) <= set(range(1, cfg.r_max + 1))
        assert [(i.rank, i.score, i.mask.tobytes()) for i in insts] == \
               [(i.rank, i.score, i.mask.tobytes()) for i in again]
        for i in insts:
            assert i.mask.shape == (16, 16)


# --- training


def test_lr_zero_leaves_params_bit_identical():
    params = PipelineParams.init(SMALL, seed=0)
    tcfg = TrainConfig(lr=0.0)
    new, _, _ = train_step(small_batch(), params, OptimizerState(), SMALL, tcfg)
    for (name, a), (_, b) in zip(named_tensors(params).items(), named_tensors(new).items()):
        assert a.data.tobytes() == b.data.tobytes(), name


@pytest.mark.parametrize("optimizer", ["sgd", "adamw"])
def test_small_step_reduces_batch_loss(optimizer):
    passed = 0
    for seed in range(10):
        params = PipelineParams.init(SMALL, seed=seed)
        batch = small_batch(2, seed)
        tcfg = TrainConfig(lr=1e-4, optimizer=optimizer, seed=seed)
        before, grads = loss_and_grads(batch, params, SMALL, tcfg)
        new, _ = apply_update(params, grads, OptimizerState(), tcfg)
        after, _ = loss_and_grads(batch, new, SMALL, tcfg)
        passed += after < before
    assert passed >= 8


def test_non_finite_loss_raises():
    params = PipelineParams.init(SMALL, seed=0)
    params = dataclasses.replace(params, stem_w=Tensor(np.full(params.stem_w.shape, np.nan), requires_grad=True))
    with pytest.raises(NumericError):
        loss_and_grads(small_batch(), params, SMALL, TrainConfig())


def test_overflowing_params_raise_numeric_error():
    params = PipelineParams.init(SMALL, seed=0)
    params = map_tensors(params, lambda name, t: Tensor(t.data * 1e200, requires_grad=True))
    with pytest.raises(NumericError):
        loss_and_grads(small_batch(), params, SMALL, TrainConfig())


def test_training_is_deterministic():
    def run():
        params, state, losses = PipelineParams.init(SMALL, seed=2), OptimizerState(), []
        for batch in (small_batch(2, 0), small_batch(2, 1), small_batch(2, 2)):
            params, state, value = train_step(batch, params, state, SMALL, TrainConfig())
            losses.append(value)
        return losses, params.stem_w.data.tobytes()

    assert run() == run()


def test_loss_reduction_definition():
    assert loss_reduction([2.0] * 10 + [1.0] * 10) == pytest.approx(0.5)
    assert loss_reduction([1.0] * 5) is None


def test_end_to_end_gradient_check():
    row = check_case("end_to_end_loss", end_to_end_case, seed=11, n_seeds=3, tol=2e-3)
    assert row.passed, row


# --- scenes and persistence


def test_scene_ranks_follow_planted_rule():
    for idx in range(20):
        scene = generate_scene(SceneConfig(seed=4), idx)
        keys = [(-o.area, -o.contrast) for o in scene.objects]
        assert keys == sorted(keys)
        assert [o.rank for o in scene.objects] == list(range(1, len(scene.objects) + 1))
        masks = np.stack([o.mask for o in scene.objects])
        assert masks.sum(0).max() <= 1  # no overlaps


def test_scene_config_text_round_trip():
    cfg = SceneConfig(seed=9, image_size=24, max_objects=3, noise=0.1)
    assert SceneConfig.from_text(cfg.to_text()) == cfg
    with pytest.raises(ValueError, match="unknown key"):
        SceneConfig.from_text("colour=red\n")
    with pytest.raises(ValueError, match="cannot parse"):
        SceneConfig.from_text("seed=abc\n")


def test_scene_generation_is_deterministic():
    a, b = generate_scene(SceneConfig(seed=5), 3), generate_scene(SceneConfig(seed=5), 3)
    assert a.image.tobytes() == b.image.tobytes()


def test_params_save_load_round_trip(tmp_path):
    params = PipelineParams.init(SMALL, seed=3)
    save_params(params, tmp_path / "a.npz")
    save_params(params, tmp_path / "b.npz")
    assert (tmp_path / "a.npz").read_bytes() == (tmp_path / "b.npz").read_bytes()
    loaded = load_params(PipelineParams.init(SMALL, seed=4), tmp_path / "a.npz")
    for name, t in named_tensors(params).items():
        np.testing.assert_array_equal(named_tensors(loaded)[name].data, t.data)


def test_pgm_header_and_rounding(tmp_path):
    write_pgm(tmp_path / "x.pgm", np.array([[0.0, 0.5], [1.0, 0.2]]))
    data = (tmp_path / "x.pgm").read_bytes()
    assert data == b"P5\n2 2\n255\n" + bytes([0, 128, 255, 51])
