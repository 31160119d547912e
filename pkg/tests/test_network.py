import numpy as np
import pytest

from pseg import losses, network, persistence, shapes
from pseg import tensor as T

SMALL = network.ModelConfig(d=8, widths=(8, 16), input_size=(32, 32), seed=0)


def small_scenes(n=3, seed=0):
    return shapes.dataset(shapes.SceneConfig(size=(32, 32), n_shapes=(2, 3), seed=seed, min_extent=0.25, max_extent=0.5), n)


def as_float64(model):
    for p in model.params.values():
        p.data = p.data.astype(np.float64)
    return model


def test_forward_shapes_and_ranges():
    model = network.init(network.ModelConfig())
    img = np.random.default_rng(0).uniform(size=(3, 64, 64)).astype(np.float32)
    out = network.forward(model, img)
    assert out.raw.shape == (16, 64, 64)
    assert np.all(np.abs(out.raw.data) < 1)
    norms = np.linalg.norm(out.features.data, axis=0)
    np.testing.assert_allclose(norms, 1, atol=1e-5)


def test_forward_rejects_incompatible_size():
    model = network.init(SMALL)
    with pytest.raises(T.ShapeError):
        network.forward(model, np.zeros((3, 30, 32), dtype=np.float32))


def test_degenerate_pixels_fall_back_to_e1():
    raw = np.random.default_rng(0).standard_normal((4, 3, 3))
    raw[:, 1, 2] = 0.0
    feats, deg = network.normalize_features(T.Tensor(raw))
    assert deg.sum() == 1 and deg[1, 2]
    np.testing.assert_array_equal(feats.data[:, 1, 2], [1, 0, 0, 0])


def test_init_deterministic_and_seeded():
    a = network.init(SMALL)
    b = network.init(SMALL)
    c = network.init(network.ModelConfig(d=8, widths=(8, 16), input_size=(32, 32), seed=1))
    for name in a.params:
        np.testing.assert_array_equal(a[name].data, b[name].data)
    assert any(not np.array_equal(a[n].data, c[n].data) for n in a.params if n.endswith(".w"))


def test_init_he_variance():
    model = network.init(network.ModelConfig())
    checked = 0
    for name, p in model.params.items():
        if not name.endswith(".w"):
            continue
        fan_in = int(np.prod(p.shape[1:]))
        if fan_in >= 64:
            assert abs(p.data.var() / (2 / fan_in) - 1) < 0.2, name
            checked += 1
        else:
            assert np.all(model.params[name[:-1] + "b"].data == 0)
    assert checked > 5


def test_config_validation():
    with pytest.raises(ValueError):
        network.ModelConfig(d=1)
    with pytest.raises(ValueError):
        network.ModelConfig(widths=())
    with pytest.raises(ValueError):
        network.ModelConfig(input_size=(60, 64))


def test_probe_gradient_matches_finite_differences():
    model = as_float64(network.init(SMALL))
    img = np.random.default_rng(1).uniform(size=(3, 32, 32))
    name, idx = "enc1.c1.w", (3, 2, 1, 1)

    def probe():
        return T.reduce_sum(T.abs(network.forward(model, T.Tensor(img)).features))

    model.zero_grad()
    T.backward(probe())
    analytic = model.params[name].grad[idx]
    eps = 1e-3
    w = model.params[name].data
    orig = w[idx]
    vals = []
    for s in (1, -1):
        w[idx] = orig + s * eps
        with T.no_grad():
            vals.append(float(probe().data))
    w[idx] = orig
    numeric = (vals[0] - vals[1]) / (2 * eps)
    assert abs(analytic - numeric) / max(abs(numeric), 1e-8) < 1e-3


def test_translation_covariance():
    n = 128
    model = network.init(network.ModelConfig(input_size=(n, n)))
    rng = np.random.default_rng(2)
    img = rng.uniform(size=(3, n, n)).astype(np.float32)
    s = model.config.stride
    shifted = np.zeros_like(img)
    shifted[:, s:, s:] = img[:, :-s, :-s]
    with T.no_grad():
        a = network.forward_raw(model, img).data
        b = network.forward_raw(model, shifted).data
    # receptive-field interior, away from zero padding in both inputs
    m = 32
    np.testing.assert_allclose(b[:, s + m : n - m, s + m : n - m], a[:, m : n - s - m, m : n - s - m], atol=1e-4)


def test_one_step_reduces_loss_mostly():
    scene = small_scenes(1)[0]
    labels = losses.erode_labels(scene.raw_labels)
    better = 0
    for seed in range(10):
        state = network.new_state(network.ModelConfig(d=8, widths=(8, 16), input_size=(32, 32), seed=seed), lr=1e-3)
        cfg = losses.LossConfig(sigma_min=0.1)

        def value():
            with T.no_grad():
                out = network.forward(state.model, scene.image)
            return losses.total_loss(out.raw, out.features, labels, cfg, rng=np.random.default_rng(0)).total_value

        before = value()
        network.train(state, [scene], 1, cfg)
        better += value() < before
    assert better >= 9


def test_attraction_only_training_is_monotone():
    cfg = shapes.SceneConfig(size=(32, 32), n_shapes=(1, 1), unlabeled_prob=0.0, seed=3, min_extent=0.4, max_extent=0.6)
    scene = shapes.generate(cfg, 0)
    labels = losses.erode_labels(scene.raw_labels)
    assert labels.K == 1
    state = network.new_state(SMALL, lr=1e-4)
    only_la = losses.LossConfig(lambda_rc=0, lambda_g=0, lambda_u=0, disabled=frozenset({"lr", "lrc", "lu", "ls", "lg"}))
    sims = []
    for _ in range(50):
        network.train_step(state, scene.image, labels, only_la)
        f = network.features_numpy(state.model, scene.image).reshape(8, -1).T
        sel = labels.entity_mask(1).ravel()
        mu = losses.compute_means(f.T.reshape(8, 32, 32), labels)[0][0].mu
        sims.append(np.abs(f[sel] @ mu).mean())
    diffs = np.diff(sims)
    assert np.all(diffs >= -1e-6)
    assert sims[-1] > sims[0]


def test_training_history_and_determinism():
    data = small_scenes(3)
    runs = []
    for _ in range(2):
        state = network.new_state(SMALL, lr=1e-3)
        network.train(state, data, 2, losses.LossConfig(sigma_min=0.1))
        runs.append(state)
    assert len(runs[0].history) == 2 and runs[0].step == 6
    for row in runs[0].history:
        assert all(np.isfinite(row[c]) for c in losses.COMPONENTS)
    for name in runs[0].model.params:
        np.testing.assert_array_equal(runs[0].model[name].data, runs[1].model[name].data)


def test_resume_is_bit_exact(tmp_path):
    data = small_scenes(3)
    cfg = losses.LossConfig(sigma_min=0.1)
    full = network.new_state(SMALL, lr=1e-3)
    network.train(full, data, 2, cfg)
    half = network.new_state(SMALL, lr=1e-3)
    network.train(half, data, 1, cfg)
    persistence.save_checkpoint(half, tmp_path / "half.ckpt")
    resumed = persistence.load_checkpoint(tmp_path / "half.ckpt")
    network.train(resumed, data, 1, cfg)
    assert resumed.step == full.step and resumed.epoch == full.epoch
    for name in full.model.params:
        np.testing.assert_array_equal(resumed.model[name].data, full.model[name].data)
        np.testing.assert_array_equal(resumed.opt.m[name], full.opt.m[name])
        np.testing.assert_array_equal(resumed.opt.v[name], full.opt.v[name])
    assert resumed.history[-1]["total"] == full.history[-1]["total"]


def test_nonfinite_loss_aborts_with_component_name():
    scene = small_scenes(1)[0]
    state = network.new_state(SMALL)
    state.model.params["head.c2.b"].data[:] = np.nan
    with pytest.raises(network.TrainingDiverged, match="la|lr|lrc|lu|ls|lg"):
        network.train_step(state, scene.image, losses.erode_labels(scene.raw_labels))


def test_train_rejects_empty_dataset():
    with pytest.raises(ValueError):
        network.train(network.new_state(SMALL), [], 1)


def test_epoch_order_is_a_seeded_permutation():
    a = network.epoch_order(0, 3, 10)
    assert sorted(a.tolist()) == list(range(10))
    np.testing.assert_array_equal(a, network.epoch_order(0, 3, 10))
    assert not np.array_equal(a, network.epoch_order(0, 4, 10))
