import math

import numpy as np
import pytest

from explicit_transfer.correspondence import aligned_partners, pair_by_label, pair_sequences
from explicit_transfer.data import (ImageDataset, ToyConfig, generate_toy_lane_changes, load_image_pool,
                                    make_rotated_domain, stack_sequences)
from explicit_transfer.metrics import evaluate_classification
from explicit_transfer.models import build_converter, build_model
from explicit_transfer.pipeline import (CoralTransform, TrainPlan, coral_align, coral_matrix, correspondence_error,
                                        fine_tune, pretrain_converter, pretrain_error, run_plan, train_correspondence,
                                        train_full)
from explicit_transfer.transforms import follow_target, identity, make_euclidean

SHORT = ToyConfig(length_s=8.0)


def seq_data(domain="noisy", count=24, seed=0, cfg=SHORT):
    ds = generate_toy_lane_changes(cfg, domain, count, seed)
    x, y, w, valid = stack_sequences(ds)
    return ds, {"x": x, "y": y, "w": w, "valid": valid}


def with_partners(target_ds, data, source_ds, n=3):
    corr = pair_sequences(target_ds, source_ds, n, seed=0)
    frames, mask = aligned_partners(target_ds, source_ds, corr, data["x"].shape[1])
    return dict(data, partners=frames, partner_mask=mask * data["valid"][:, None, :])


def tagger(seed=0):
    return build_model({"kind": "lstm-tagger", "features": 1, "hidden": 6, "classes": 2}, seed)


def seq_converter(seed=0, **kw):
    return build_converter({"kind": "lstm-converter", "features": 1, "hidden": 4, **kw}, seed)


def seq_targets(which):
    eye, follow = identity(1).entries, follow_target([0.5]).entries

    def fn(data, idx):
        labels = data["y"][idx]
        mats = np.broadcast_to(eye, labels.shape + (2, 2)) if which == "T1" else \
            np.where((labels == 0)[..., None, None], follow, eye)
        return mats, data["valid"][idx]
    return fn


def params_of(net):
    return {k: p.data.copy() for k, p in net.params.items()}


def assert_same_params(a, b):
    assert a.keys() == b.keys()
    for k in a:
        assert np.array_equal(a[k], b[k]), k


# -- plan validation -------------------------------------------------------------------------

@pytest.mark.parametrize("kwargs", [
    {"mode": 3}, {"steps": ("pretrain", "warmup")}, {"mode": "imp"},
    {"mode": 2, "steps": ("pretrain", "correspondence", "finetune")},
    {"mode": "finetune-only"}, {"mode": "coral", "steps": ("pretrain", "finetune")},
    {"lambda_corr": -1.0}, {"pretrain_target": "T3"},
])
def test_plan_validation_rejects(kwargs):
    with pytest.raises(ValueError):
        TrainPlan(**kwargs).validate()


def test_plan_validation_accepts_method_plans():
    TrainPlan().validate()
    TrainPlan(mode="imp", steps=("correspondence", "finetune")).validate()
    TrainPlan(mode="finetune-only", steps=("finetune",)).validate()
    TrainPlan(mode=2, steps=("pretrain", "finetune")).validate()


def test_mode_component_mismatch():
    _, data = seq_data(count=6)
    with pytest.raises(ValueError):
        fine_tune(tagger(), seq_converter(), data, TrainPlan(mode="finetune-only", steps=("finetune",)))
    with pytest.raises(ValueError):
        fine_tune(tagger(), None, data, TrainPlan(mode=0))
    with pytest.raises(ValueError, match="correspondences"):
        fine_tune(tagger(), seq_converter(), data, TrainPlan(mode=1))
    with pytest.raises(ValueError, match="direct"):
        fine_tune(tagger(), seq_converter(), data, TrainPlan(mode="imp", lambda_corr=0.0))
    with pytest.raises(ValueError):
        run_plan(tagger(), seq_converter(), data, TrainPlan(steps=("pretrain",)), target_fn=None)


# -- step 1 ------------------------------------------------------------------------------

def test_pretrain_identity_converges_on_heldout():
    _, train = seq_data(count=40, seed=1)
    _, held = seq_data(count=20, seed=2)
    c = seq_converter(head_scale=1.0)
    fn = seq_targets("T1")
    before = pretrain_error(c, held, fn)
    plan = TrainPlan(pretrain_epochs=30, lr=1e-2, batch_size=8)
    pretrain_converter(c, train, fn, plan)
    after = pretrain_error(c, held, fn)
    assert before > 0.05 and after < 0.05
    assert len(plan.history["pretrain"]) == 30
    assert not any(p.requires_grad for p in c.params.values())


def test_pretrain_follow_target_projects_follow_frames():
    ds, train = seq_data(count=40, seed=1)
    c = seq_converter()
    pretrain_converter(c, train, seq_targets("T2"), TrainPlan(pretrain_epochs=40, lr=1e-2, batch_size=8))
    out = c.convert(train["x"]).data[..., 0]
    follow = (train["y"] == 0) & (train["valid"] > 0)
    share = np.mean(np.abs(out[follow] - 0.5) <= 0.1)
    assert share >= 0.9


def test_pretrain_half_turn_on_images():
    pool = load_image_pool(source="digits")
    imgs = pool.images[np.random.default_rng(0).permutation(len(pool))[:400]]
    c = build_converter({"kind": "cnn-converter", "height": 8, "width": 8, "channels": [4]}, seed=0)
    target = make_euclidean(math.pi).entries

    def fn(data, idx):
        return np.broadcast_to(target, (len(idx), 3, 3)), None
    pretrain_converter(c, {"x": imgs[:256]}, fn, TrainPlan(pretrain_epochs=60, lr=1e-2, batch_size=32))
    assert pretrain_error(c, {"x": imgs[300:]}, fn) < 0.1
    np.testing.assert_allclose(c.convert(imgs[300:305]).data, imgs[300:305, ::-1, ::-1], atol=0.25)


def test_pretrain_errors():
    _, data = seq_data(count=4)
    with pytest.raises(ValueError, match="matrix-mode"):
        pretrain_converter(build_converter({"kind": "direct-converter", "hidden": 3}), data, seq_targets("T1"),
                           TrainPlan())

    def wrong(data, idx):
        return np.zeros((len(idx), 3, 3)), None
    with pytest.raises(ValueError, match="do not match"):
        pretrain_converter(seq_converter(), data, wrong, TrainPlan(pretrain_epochs=1))
    c = seq_converter()
    before = params_of(c)
    pretrain_converter(c, data, wrong, TrainPlan(pretrain_epochs=0))
    assert_same_params(before, params_of(c))


# -- step 2 -----------------------------------------------------------------------------

def test_correspondence_training_descends():
    clean, _ = seq_data("clean", count=60, seed=3)
    noisy, data = seq_data("noisy", count=30, seed=4)
    data = with_partners(noisy, data, clean)
    c = seq_converter(head_scale=0.5)
    start = correspondence_error(c, data)
    plan = TrainPlan(corr_epochs=8, lr=1e-2, batch_size=8, patience=8)
    train_correspondence(c, data, plan)
    curve = plan.history["correspondence"]
    assert curve and {"train", "heldout"} <= curve[0].keys()
    assert correspondence_error(c, data) < start
    assert curve[-1]["train"] < curve[0]["train"]


def test_correspondence_training_keeps_identity_at_zero_loss():
    _, data = seq_data(count=12, seed=5)
    data = dict(data, partners=data["x"][:, None], partner_mask=data["valid"][:, None])
    c = seq_converter(zero_head=True)
    before = params_of(c)
    train_correspondence(c, data, TrainPlan(corr_epochs=3, lr=1e-2, batch_size=4))
    for k, v in params_of(c).items():
        assert np.abs(v - before[k]).max() <= 1e-6
    assert correspondence_error(c, data) <= 1e-6


def test_correspondence_training_restores_best_state():
    clean, _ = seq_data("clean", count=30, seed=3)
    noisy, data = seq_data("noisy", count=20, seed=4)
    data = with_partners(noisy, data, clean)
    c = seq_converter(head_scale=0.5)
    plan = TrainPlan(corr_epochs=6, lr=0.5, batch_size=4, patience=2)   # lr large enough to overshoot
    train_correspondence(c, data, plan)
    heldout = [e["heldout"] for e in plan.history["correspondence"]]
    rng = np.random.default_rng([plan.seed, 21])
    perm = rng.permutation(20)
    val = np.sort(perm[:4])
    final = correspondence_error(c, data, val, plan)
    assert final <= min(heldout) + 1e-12


def test_correspondence_training_needs_partners():
    _, data = seq_data(count=4)
    with pytest.raises(ValueError):
        train_correspondence(seq_converter(), data, TrainPlan())


# -- step 3 -------------------------------------------------------------------------------

def test_mode0_leaves_converter_and_body_untouched():
    _, data = seq_data(count=16, seed=6)
    m, c = tagger(), seq_converter()
    m_before, c_before = params_of(m), params_of(c)
    fine_tune(m, c, data, TrainPlan(mode=0, finetune_epochs=2, lr=1e-2, batch_size=8))
    assert_same_params(c_before, params_of(c))
    after = params_of(m)
    for k in m_before:
        assert np.array_equal(after[k], m_before[k]) == (k not in m.head), k


def test_mode1_without_correspondence_weight_equals_mode2():
    clean, _ = seq_data("clean", count=20, seed=7)
    noisy, data = seq_data("noisy", count=16, seed=8)
    data = with_partners(noisy, data, clean)
    results = []
    for mode, lam in ((1, 0.0), (2, 0.0)):
        m, c = tagger(1), seq_converter(1)
        plan = TrainPlan(mode=mode, lambda_corr=lam, finetune_epochs=3, lr=1e-2, batch_size=8)
        fine_tune(m, c, data, plan)
        results.append((params_of(m), params_of(c), plan.history["finetune"]))
    assert_same_params(results[0][0], results[1][0])
    assert_same_params(results[0][1], results[1][1])
    assert results[0][2] == results[1][2]


def test_mode1_correspondence_term_changes_training():
    clean, _ = seq_data("clean", count=20, seed=7)
    noisy, data = seq_data("noisy", count=16, seed=8)
    data = with_partners(noisy, data, clean)
    out = []
    for lam in (0.0, 1.0):
        m, c = tagger(1), seq_converter(1)
        fine_tune(m, c, data, TrainPlan(mode=1, lambda_corr=lam, finetune_epochs=1, lr=1e-2, batch_size=8))
        out.append(params_of(c))
    assert any(not np.array_equal(out[0][k], out[1][k]) for k in out[0])


def test_identity_converter_matches_finetune_only():
    _, data = seq_data(count=16, seed=9)
    base = tagger(2)
    train_full(base, data, TrainPlan(lr=1e-2, batch_size=8), epochs=1)
    preds = []
    for use_converter in (True, False):
        m = base.clone()
        if use_converter:
            c = seq_converter(zero_head=True)
            plan = TrainPlan(mode=0, lambda_corr=0.0, steps=("finetune",), finetune_epochs=3, lr=1e-2, batch_size=8)
            run_plan(m, c, data, plan)
            x = c.convert(data["x"]).data
        else:
            plan = TrainPlan(mode="finetune-only", steps=("finetune",), finetune_epochs=3, lr=1e-2, batch_size=8)
            run_plan(m, None, data, plan)
            x = data["x"]
        preds.append((m.predict(x), params_of(m)))
    assert np.array_equal(preds[0][0], preds[1][0])
    assert_same_params(preds[0][1], preds[1][1])


def test_identity_image_converter_matches_finetune_only():
    rng = np.random.default_rng(1)
    data = {"x": rng.random((24, 8, 8)), "y": rng.integers(0, 10, 24)}
    base = build_model({"kind": "cnn-classifier", "height": 8, "width": 8, "channels": [2, 3]}, 0)
    outs = []
    for c in (build_converter({"kind": "cnn-converter", "height": 8, "width": 8, "channels": [2],
                               "zero_head": True}), None):
        m = base.clone()
        mode = 0 if c is not None else "finetune-only"
        run_plan(m, c, data, TrainPlan(mode=mode, steps=("finetune",), finetune_epochs=2, batch_size=8))
        outs.append(params_of(m))
    assert_same_params(*outs)


def test_imp_trains_direct_converter():
    clean, _ = seq_data("clean", count=20, seed=7)
    noisy, data = seq_data("noisy", count=16, seed=8)
    data = with_partners(noisy, data, clean)
    m = tagger()
    c = build_converter({"kind": "direct-converter", "features": 1, "hidden": 4})
    before = params_of(c)
    run_plan(m, c, data, TrainPlan(mode="imp", steps=("correspondence", "finetune"), corr_epochs=2,
                                   finetune_epochs=1, lr=1e-2, batch_size=8))
    assert any(not np.array_equal(before[k], v) for k, v in params_of(c).items())


def test_finetune_beats_untransferred_model():
    pool = load_image_pool(source="digits")
    perm = np.random.default_rng(0).permutation(len(pool))
    a = pool.subset(perm[:900])
    b = make_rotated_domain(pool.subset(perm[900:]))
    b_train, b_test = b.subset(np.arange(100)), b.subset(np.arange(100, len(b)))
    spec = {"kind": "cnn-classifier", "height": 8, "width": 8, "channels": [8, 16]}
    m = build_model(spec, 0)
    train_full(m, {"x": a.images, "y": a.labels}, TrainPlan(lr=3e-3, batch_size=32), epochs=6)
    a_on_b = evaluate_classification(m.predict(b_test.images), b_test.labels)
    fine_tune(m, None, {"x": b_train.images, "y": b_train.labels},
              TrainPlan(mode="finetune-only", steps=("finetune",), finetune_epochs=30, lr=1e-2, batch_size=16))
    tuned = evaluate_classification(m.predict(b_test.images), b_test.labels)
    assert tuned > a_on_b


# -- CORAL ----------------------------------------------------------------------------------

def gaussians(seed=0, n=10000):
    rng = np.random.default_rng(seed)
    xs = rng.multivariate_normal([0, 0], [[1, 0.8], [0.8, 1]], n)
    xt = rng.multivariate_normal([1, -1], [[4, 0], [0, 0.25]], n)
    return xt, xs


@pytest.mark.parametrize("ridge", [0.0, 1e-3])
def test_coral_reduces_covariance_distance(ridge):
    xt, xs = gaussians()
    d0 = np.linalg.norm(np.cov(xt.T) - np.cov(xs.T))
    for out in (coral_align(xt, xs, ridge), CoralTransform.fit(xt, xs, ridge)(xt)):
        assert np.linalg.norm(np.cov(out.T) - np.cov(xs.T)) <= 0.1 * d0


def test_coral_ridge_zero_matches_covariance():
    xt, xs = gaussians(1, 2000)
    np.testing.assert_allclose(np.cov(coral_align(xt, xs, 0.0).T), np.cov(xs.T), atol=1e-10)


def test_coral_identical_domains_is_noop():
    _, xs = gaussians(2)
    assert np.abs(coral_align(xs, xs, 1.0) - xs).max() <= 1e-8
    assert np.abs(CoralTransform.fit(xs, xs, 1.0)(xs) - xs).max() <= 1e-8


def test_coral_one_dimensional_scaling():
    x = np.random.default_rng(3).standard_normal(5000)
    out = coral_align(2 * x, x, 0.0)
    np.testing.assert_allclose(out, x, atol=1e-12)


def test_coral_on_datasets():
    rng = np.random.default_rng(4)
    imgs = ImageDataset(rng.random((30, 2, 2)), np.zeros(30))
    out = coral_align(imgs, imgs, 1.0)
    assert isinstance(out, ImageDataset)
    np.testing.assert_allclose(out.images, imgs.images, atol=1e-12)
    seqs = generate_toy_lane_changes(SHORT, "noisy", 5, 0)
    out = coral_align(seqs, seqs, 1.0)
    np.testing.assert_allclose(out[0].frames, seqs[0].frames, atol=1e-12)


def test_coral_errors():
    x = np.random.default_rng(5).standard_normal((100, 2))
    singular = np.column_stack([x[:, 0], x[:, 0]])
    with pytest.raises(np.linalg.LinAlgError):
        coral_align(singular, x, 0.0)
    coral_align(singular, x, 1.0)
    with pytest.raises(ValueError):
        coral_matrix(x, x, -1.0)
    with pytest.raises(ValueError):
        coral_matrix(x, x[:, :1], 0.0)


def test_label_pairs_for_images_share_labels():
    y_b = np.random.default_rng(6).integers(0, 10, 50)
    y_a = np.random.default_rng(7).integers(0, 10, 200)
    corr = pair_by_label(y_b, y_a, 5, 0)
    assert np.all(y_a[corr.partners] == y_b[:, None])
