import dataclasses

import numpy as np
import numpy.testing as npt
import pytest

from facemark.decoder import TINY, DecoderState
from facemark.errors import ConfigError, NumericError
from facemark.training import (
    Adam,
    AugmentConfig,
    Sample,
    SyntheticFaceSpec,
    TrainConfig,
    _box_blur,
    _shift_image,
    augment,
    batch_loss,
    batch_loss_and_grads,
    canonical_layout,
    check_against_fd,
    gen_synthetic,
    grad_check,
    landmark_loss,
    render_face,
    self_train,
    tight_bbox,
    train,
)

from conftest import TINY_SPEC, jitter_params


# ---------------------------------------------------------------------------
# objective
# ---------------------------------------------------------------------------

def test_loss_single_stage_hand_value():
    pred = np.array([[0.5, 0.5]])
    gt = np.array([[0.25, 0.75]])
    loss, dys = landmark_loss([pred], gt)
    assert loss == 0.5
    npt.assert_array_equal(dys[0], [[1.0, -1.0]])


def test_loss_sums_over_stages():
    rng = np.random.default_rng(0)
    gt = rng.uniform(size=(5, 2))
    y0 = rng.uniform(size=(5, 2))
    y1 = rng.uniform(size=(5, 2))
    both, _ = landmark_loss([y0, y1], gt)
    a, _ = landmark_loss([y0], gt)
    b, _ = landmark_loss([y1], gt)
    npt.assert_allclose(both, a + b, atol=1e-12)


def test_loss_gradient_is_residual_sign():
    rng = np.random.default_rng(1)
    gt = rng.uniform(size=(4, 2))
    y = rng.uniform(size=(4, 2))
    _, dys = landmark_loss([y], gt)
    npt.assert_array_equal(dys[0], np.sign(y - gt))


def test_loss_rejects_shape_mismatch():
    with pytest.raises(ValueError):
        landmark_loss([np.zeros((3, 2))], np.zeros((4, 2)))


def test_batch_loss_matches_grad_version(tiny_state, tiny_batch):
    state = jitter_params(tiny_state)
    images = [s.image for s in tiny_batch]
    targets = [s.landmarks for s in tiny_batch]
    with_grads, grads = batch_loss_and_grads(state.params, TINY, images, targets)
    plain = batch_loss(state.params, TINY, images, targets)
    npt.assert_allclose(with_grads, plain, atol=1e-12)
    assert set(grads) == set(state.params)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def test_adam_first_step_moves_by_lr_times_sign():
    params = {"w": np.array([1.0, -2.0, 3.0])}
    grads = {"w": np.array([0.5, -0.25, 4.0])}
    opt = Adam(params)
    opt.step(params, grads, lr=0.01, lr_factor=lambda k: 1.0)
    # bias-corrected m/v cancel on step one, leaving lr * g / (|g| + eps)
    npt.assert_allclose(params["w"], [0.99, -1.99, 2.99], rtol=1e-6)


def test_adam_zero_gradient_stays_put():
    params = {"w": np.array([1.0, 2.0])}
    opt = Adam(params)
    opt.step(params, {"w": np.zeros(2)}, lr=0.1, lr_factor=lambda k: 1.0)
    npt.assert_array_equal(params["w"], [1.0, 2.0])


def test_adam_zero_lr_stays_put():
    params = {"w": np.array([1.0, 2.0])}
    opt = Adam(params)
    opt.step(params, {"w": np.ones(2)}, lr=0.0, lr_factor=lambda k: 1.0)
    npt.assert_array_equal(params["w"], [1.0, 2.0])


def test_adam_lr_factor_routes_per_path():
    params = {"backbone.w": np.zeros(1), "head.w": np.zeros(1)}
    grads = {"backbone.w": np.ones(1), "head.w": np.ones(1)}
    opt = Adam(params)
    factor = lambda k: 0.1 if k.startswith("backbone.") else 1.0
    opt.step(params, grads, lr=0.01, lr_factor=factor)
    npt.assert_allclose(params["backbone.w"], -0.001, rtol=1e-6)
    npt.assert_allclose(params["head.w"], -0.01, rtol=1e-6)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(lr=-1.0)
    with pytest.raises(ConfigError):
        TrainConfig(steps=10, lr_drop_step=20)
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)


def test_train_rejects_empty_dataset(tiny_state):
    with pytest.raises(ConfigError):
        train(tiny_state, [], TrainConfig(steps=1, lr_drop_step=0))


def test_train_loss_decreases(tiny_state, tiny_batch):
    cfg = TrainConfig(lr=1e-3, steps=25, lr_drop_step=0, batch_size=8, seed=0)
    _, losses = train(tiny_state, tiny_batch, cfg)
    assert len(losses) == 25
    assert losses[-1] < losses[0]


def test_train_deterministic(tiny_state, tiny_batch):
    cfg = TrainConfig(lr=1e-3, steps=6, lr_drop_step=0, batch_size=1, seed=3)
    s1, l1 = train(tiny_state, tiny_batch, cfg)
    s2, l2 = train(tiny_state, tiny_batch, cfg)
    npt.assert_array_equal(l1, l2)
    for k in s1.params:
        npt.assert_array_equal(s1.params[k], s2.params[k])


def test_train_zero_lr_keeps_weights(tiny_state, tiny_batch):
    cfg = TrainConfig(lr=0.0, steps=4, lr_drop_step=0, batch_size=8, seed=0)
    out, losses = train(tiny_state, tiny_batch, cfg)
    for k in tiny_state.params:
        npt.assert_array_equal(out.params[k], tiny_state.params[k])
    # full batch every step and frozen weights: the loss cannot move
    npt.assert_array_equal(losses, [losses[0]] * 4)


def test_train_does_not_mutate_input_state(tiny_state, tiny_batch):
    before = {k: v.copy() for k, v in tiny_state.params.items()}
    cfg = TrainConfig(lr=1e-3, steps=3, lr_drop_step=0, batch_size=8, seed=0)
    train(tiny_state, tiny_batch, cfg)
    for k in before:
        npt.assert_array_equal(tiny_state.params[k], before[k])


@pytest.mark.filterwarnings("ignore:invalid value encountered in cast")
def test_train_flags_divergence(tiny_state, tiny_batch):
    bad = DecoderState(
        tiny_state.config,
        {k: v.copy() for k, v in tiny_state.params.items()},
    )
    bad.params["landmark_init.w"][:] = np.nan
    with pytest.raises(NumericError):
        train(bad, tiny_batch, TrainConfig(steps=1, lr_drop_step=0))


def test_train_logs_progress(tiny_state, tiny_batch):
    lines = []
    cfg = TrainConfig(lr=1e-3, steps=2, lr_drop_step=0, batch_size=8, seed=0)
    train(tiny_state, tiny_batch, cfg, log=lines.append)
    assert lines and lines[0].startswith("step ")


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

def _one_blob(side=64, at=(0.4, 0.6)):
    spec = SyntheticFaceSpec(
        num_landmarks=1, image_side=side, blob_sigma=0.04, noise_level=0.0
    )
    lm = np.array([at])
    img = render_face(lm, side, np.random.default_rng(0), spec)
    return img, lm


def _peak(img):
    flat = np.argmax(img[0])
    return np.array([flat % img.shape[2], flat // img.shape[2]])


def test_augment_nothing_enabled_is_identity():
    img, lm = _one_blob()
    out, lm2 = augment(img, lm, np.random.default_rng(0), AugmentConfig())
    npt.assert_array_equal(out, img)
    npt.assert_array_equal(lm2, lm)


def test_shift_image_moves_impulse_and_zero_fills():
    img = np.zeros((3, 8, 8))
    img[:, 4, 3] = 1.0
    out = _shift_image(img, 2, -1)
    assert out[0, 3, 5] == 1.0
    assert out.sum() == 3.0
    npt.assert_array_equal(out[:, 7, :], 0.0)  # rows vacated by the shift


def test_translate_keeps_blob_under_label():
    img, lm = _one_blob()
    cfg = AugmentConfig(translate=True, max_shift=3)
    for seed in range(5):
        out, lm2 = augment(img, lm, np.random.default_rng(seed), cfg)
        side = img.shape[1]
        shift_px = (lm2 - lm)[0] * side
        npt.assert_allclose(shift_px, np.round(shift_px), atol=1e-12)
        want = _peak(img) + shift_px
        npt.assert_allclose(_peak(out), want, atol=0.5)


def test_flip_mirrors_labels_exactly():
    img, _ = _one_blob()
    lm = np.array([[0.3, 0.4], [0.7, 0.4], [0.5, 0.6]])
    cfg = AugmentConfig(flip=True, flip_table=(1, 0, 2))
    out, lm2 = augment(img, lm, np.random.default_rng(0), cfg)
    npt.assert_allclose(lm2, [[0.3, 0.4], [0.7, 0.4], [0.5, 0.6]], atol=1e-12)
    npt.assert_array_equal(out, img[:, :, ::-1])


def test_flip_twice_with_involutive_table_restores():
    img, _ = _one_blob()
    lm = np.array([[0.2, 0.3], [0.8, 0.3], [0.5, 0.7]])
    cfg = AugmentConfig(flip=True, flip_table=(1, 0, 2))
    rng = np.random.default_rng(0)
    once = augment(img, lm, rng, cfg)
    twice = augment(once[0], once[1], rng, cfg)
    npt.assert_array_equal(twice[0], img)
    npt.assert_allclose(twice[1], lm, atol=1e-12)


def test_flip_without_table_rejected():
    img, lm = _one_blob()
    with pytest.raises(ConfigError):
        augment(img, lm, np.random.default_rng(0), AugmentConfig(flip=True))


def test_flip_with_bad_table_rejected():
    img, _ = _one_blob()
    lm = np.zeros((3, 2))
    cfg = AugmentConfig(flip=True, flip_table=(0, 0, 2))
    with pytest.raises(ConfigError):
        augment(img, lm, np.random.default_rng(0), cfg)


def test_rotate_keeps_blob_under_label():
    img, lm = _one_blob(at=(0.35, 0.55))
    cfg = AugmentConfig(rotate=True, max_degrees=15.0)
    for seed in range(3):
        out, lm2 = augment(img, lm, np.random.default_rng(seed), cfg)
        side = img.shape[1]
        want = lm2[0] * side - 0.5
        npt.assert_allclose(_peak(out), want, atol=1.0)


def test_occlude_paints_rectangle_and_keeps_labels():
    img, lm = _one_blob()
    cfg = AugmentConfig(occlude=True, max_occlusion=0.3)
    out, lm2 = augment(img, lm, np.random.default_rng(2), cfg)
    npt.assert_array_equal(lm2, lm)
    changed = (out != img).any(axis=0)
    ys, xs = np.nonzero(changed)
    assert len(ys) > 0
    # changed pixels fill one solid axis-aligned rectangle
    assert changed[ys.min():ys.max() + 1, xs.min():xs.max() + 1].all()
    assert changed.sum() == (ys.max() - ys.min() + 1) * (xs.max() - xs.min() + 1)


def test_blur_smooths_but_keeps_labels():
    img, lm = _one_blob()
    out, lm2 = augment(img, lm, np.random.default_rng(0), AugmentConfig(blur=True))
    npt.assert_array_equal(lm2, lm)
    assert out.var() < img.var()


def test_box_blur_preserves_constant_image():
    img = np.full((3, 6, 6), 0.37)
    npt.assert_allclose(_box_blur(img), img, atol=1e-12)


# ---------------------------------------------------------------------------
# synthetic faces
# ---------------------------------------------------------------------------

def test_canonical_layout_five_points_are_eyes_nose_mouth():
    lm = canonical_layout(5)
    assert lm.shape == (5, 2)
    npt.assert_allclose(lm[0], [0.38, 0.42])
    # left/right symmetry of the base template
    npt.assert_allclose(lm[0, 0] + lm[1, 0], 1.0)
    npt.assert_allclose(lm[3, 0] + lm[4, 0], 1.0)


def test_canonical_layout_ring_for_larger_counts():
    lm = canonical_layout(12)
    assert lm.shape == (12, 2)
    ring = lm[5:]
    rel = ring - 0.5
    npt.assert_allclose(
        (rel[:, 0] / 0.32) ** 2 + (rel[:, 1] / 0.36) ** 2, 1.0, atol=1e-12
    )


def test_gen_synthetic_deterministic():
    a = gen_synthetic(TINY_SPEC, 3, 11)
    b = gen_synthetic(TINY_SPEC, 3, 11)
    for sa, sb in zip(a, b):
        npt.assert_array_equal(sa.image, sb.image)
        npt.assert_array_equal(sa.landmarks, sb.landmarks)
        npt.assert_array_equal(sa.bbox, sb.bbox)


def test_gen_synthetic_streams_are_per_sample():
    # sample i only depends on (seed, i), not on how many neighbors exist
    small = gen_synthetic(TINY_SPEC, 2, 11)
    large = gen_synthetic(TINY_SPEC, 4, 11)
    npt.assert_array_equal(small[1].image, large[1].image)


def test_gen_synthetic_zero_jitter_hits_canonical_layout():
    spec = dataclasses.replace(
        TINY_SPEC, scale_jitter=0.0, rotation_jitter=0.0, translation_jitter=0.0
    )
    sample = gen_synthetic(spec, 1, 0)[0]
    npt.assert_allclose(sample.landmarks, canonical_layout(5), atol=1e-12)


def test_gen_synthetic_rejects_zero_count():
    with pytest.raises(ConfigError):
        gen_synthetic(TINY_SPEC, 0, 0)


def test_blobs_sit_on_labels():
    spec = SyntheticFaceSpec(
        num_landmarks=1, image_side=64, blob_sigma=0.03, noise_level=0.0,
        scale_jitter=0.0, rotation_jitter=0.0, translation_jitter=0.1,
    )
    for s in gen_synthetic(spec, 4, 5):
        peak = _peak(s.image)
        want = s.landmarks[0] * 64 - 0.5
        npt.assert_allclose(peak, want, atol=1.0)


def test_tight_bbox_hand_case():
    lm = np.array([[0.25, 0.25], [0.75, 0.75]])
    npt.assert_allclose(tight_bbox(lm, 100), [25, 25, 75, 75])
    npt.assert_allclose(tight_bbox(lm, 100, enlarge=0.2), [20, 20, 80, 80])


def test_tight_bbox_clamped_to_image():
    lm = np.array([[0.02, 0.5], [0.98, 0.5]])
    box = tight_bbox(lm, 100, enlarge=0.5)
    assert box[0] == 0.0 and box[2] == 100.0


def test_dataset_bboxes_inside_image():
    for s in gen_synthetic(TINY_SPEC, 6, 3):
        x0, y0, x1, y1 = s.bbox
        assert 0 <= x0 < x1 <= TINY_SPEC.image_side
        assert 0 <= y0 < y1 <= TINY_SPEC.image_side


# ---------------------------------------------------------------------------
# gradient checking harness
# ---------------------------------------------------------------------------

def _toy_problem():
    params = {"w": np.array([0.5, -1.5, 2.0]), "b": np.array([0.25])}
    x = np.array([1.0, 2.0, 3.0])

    def loss_fn(p):
        return float((p["w"] * x).sum() ** 2 + 3.0 * p["b"][0])

    s = (params["w"] * x).sum()
    analytic = {"w": 2.0 * s * x, "b": np.array([3.0])}
    return params, loss_fn, analytic


def test_fd_check_accepts_correct_gradients():
    params, loss_fn, analytic = _toy_problem()
    report = check_against_fd(params, loss_fn, analytic)
    assert report.ok
    assert report.worst.max_rel < 1e-7


def test_fd_check_catches_scaled_gradient():
    params, loss_fn, analytic = _toy_problem()
    report = check_against_fd(params, loss_fn, analytic, fault_path="w")
    assert not report.ok
    bad = {e.path for e in report.entries if not e.ok}
    assert bad == {"w"}


def test_fd_report_text_lists_paths():
    params, loss_fn, analytic = _toy_problem()
    text = check_against_fd(params, loss_fn, analytic).to_text()
    assert "w" in text and "b" in text
    assert "overall: PASS" in text


def test_model_grad_check_smoke(tiny_state, tiny_batch):
    state = jitter_params(tiny_state)
    report = grad_check(state, tiny_batch[:1], min_coords=1)
    assert report.ok
    assert len(report.entries) == len(state.params)


# ---------------------------------------------------------------------------
# self-training
# ---------------------------------------------------------------------------

def test_self_train_validates_arguments(tiny_state, tiny_batch):
    pool = [s.image for s in tiny_batch]
    cfg = TrainConfig(steps=1, lr_drop_step=0)
    with pytest.raises(ConfigError):
        self_train(tiny_state, tiny_batch, pool, 0, cfg)
    with pytest.raises(ConfigError):
        self_train(tiny_state, tiny_batch, [], 1, cfg)


def test_self_train_zero_lr_round_is_a_no_op(tiny_state, tiny_batch):
    pool = [s.image for s in tiny_batch]
    cfg = TrainConfig(lr=0.0, steps=2, lr_drop_step=0, batch_size=8)
    out, history = self_train(tiny_state, tiny_batch, pool, 1, cfg)
    for k in tiny_state.params:
        npt.assert_array_equal(out.params[k], tiny_state.params[k])
    assert [h["round"] for h in history] == [1]


def test_self_train_records_eval_per_round(tiny_state, tiny_batch):
    pool = [s.image for s in tiny_batch]
    cfg = TrainConfig(lr=1e-4, steps=2, lr_drop_step=0, batch_size=8)
    calls = []

    def eval_fn(st):
        calls.append(1)
        return float(len(calls))

    out, history = self_train(tiny_state, tiny_batch, pool, 2, cfg, eval_fn=eval_fn)
    assert [h["round"] for h in history] == [0, 1, 2]
    assert [h["eval"] for h in history] == [1.0, 2.0, 3.0]
    assert np.isnan(history[0]["loss"])
