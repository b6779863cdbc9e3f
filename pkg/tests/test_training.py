from __future__ import annotations

import math

import numpy as np
import pytest
from conftest import tiny_field_config
from hypothesis import given
from hypothesis import strategies as st

from sectionsdf.datasets import sphere_sections
from sectionsdf.field import LEARNED, MLP_WEIGHTS, GradientMode, field_forward, geometric_init, init_params
from sectionsdf.geometry import normalize_scene
from sectionsdf.sampling import SamplingSchedule, Tag, build_sample_bank
from sectionsdf.training import (
    CONFIG_KEYS,
    LOG_COLUMNS,
    AdamState,
    ConfigError,
    LossWeights,
    NonFiniteLossError,
    TrainConfig,
    adam_step,
    classify_symmetric_difference,
    config_to_text,
    desk_config,
    eikonal_from_gradients,
    load_config,
    loss_eikonal,
    loss_min_surface,
    loss_off,
    loss_on,
    parse_config,
    read_log_csv,
    total_loss_and_grads,
    train,
)

MODES = [GradientMode("numerical"), GradientMode("analytic")]


def tiny_train_config(**kw) -> TrainConfig:
    base = dict(field=tiny_field_config(hidden_sdf=32, beta_act=100.0), batch=2**12, epochs=5, init_radius=0.5)
    base.update(kw)
    return TrainConfig(**base)


# --- symmetric difference and loss terms -----------------------------------------


def test_classify_examples():
    tag = np.array([Tag.ON_CONTOUR, Tag.FIXED_RADIUS, Tag.UNIFORM, Tag.UNIFORM])
    f2d = np.array([0.0, -0.1, -0.1, 0.2])
    f = np.array([5.0, 0.05, -0.2, 0.3])
    on, off, agree = classify_symmetric_difference(tag, f2d, f)
    assert on.tolist() == [True, False, False, False]
    assert off.tolist() == [False, True, False, False]
    assert agree.tolist() == [False, False, True, True]


@given(st.lists(st.tuples(st.integers(0, 3), st.floats(-1, 1), st.floats(-1, 1)), min_size=1, max_size=50))
def test_classify_partition(rows):
    tag, f2d, f = (np.array(c) for c in zip(*rows))
    on, off, agree = classify_symmetric_difference(tag.astype(np.uint8), f2d, f)
    assert np.all(on.astype(int) + off + agree == 1)


def test_loss_on_examples():
    assert loss_on([0.1, -0.3]) == pytest.approx(0.2)
    assert loss_on([0.0, 0.0]) == 0.0
    assert loss_on([]) == 0.0


def test_loss_off_examples(rng):
    assert loss_off([0.05], [-0.1]) == pytest.approx(0.0225)
    assert loss_off([], []) == 0.0
    f, g = rng.normal(size=100), rng.normal(size=100)
    assert loss_off(f, g) == pytest.approx(sum((a - b) ** 2 for a, b in zip(f, g)) / 100, rel=1e-12)


def test_loss_min_surface_examples():
    assert loss_min_surface([0.0, 0.0]) == 1.0
    assert loss_min_surface([10.0], 100.0) == pytest.approx(0.0, abs=1e-300)
    assert loss_min_surface([0.0, 10.0]) == pytest.approx(0.5)


def test_eikonal_from_gradients_examples():
    assert eikonal_from_gradients(np.tile([1.0, 0, 0], (5, 1))) == 0.0
    assert eikonal_from_gradients(np.tile([2.0, 0, 0], (5, 1))) == 1.0
    assert eikonal_from_gradients(np.zeros((5, 3))) == 1.0


@pytest.mark.parametrize("w,expected", [((1.0, 0, 0), 0.0), ((2.0, 0, 0), 1.0), ((0.0, 0.6, 0.8), 0.0)])
def test_loss_eikonal_linear_fields(w, expected, rng):
    p = _linear(w)
    reg = rng.uniform(-0.9, 0.9, (100, 3))
    assert abs(loss_eikonal(reg, p, GradientMode("analytic")) - expected) < 1e-15
    assert abs(loss_eikonal(reg, p, GradientMode("numerical")) - expected) < 1e-8


def _linear(w):
    from test_field import linear_field

    return linear_field(w)


@pytest.mark.parametrize("w,expected", [((1.0, 0, 0), 0.0), ((2.0, 0, 0), 1.0)])
def test_eikonal_through_total_loss(w, expected, rng):
    p = _linear(w)
    x = rng.uniform(-0.5, 0.5, (8, 3))
    reg = rng.uniform(-0.9, 0.9, (64, 3))
    for mode, tol in ((GradientMode("analytic"), 0.0), (GradientMode("numerical"), 1e-8)):
        _, _, terms = total_loss_and_grads(x, np.zeros(8), np.full(8, Tag.UNIFORM), reg, p, LossWeights(1.0, 0.0), mode)
        assert abs(terms["eik"] - expected) <= tol


def test_constant_field_eikonal_one(rng):
    p = init_params(tiny_field_config(), seed=1, dtype=np.float64)
    p.tensors["sdf_W2"][:] = 0
    p.tensors["sdf_b2"][:] = 0.3
    for mode in MODES:
        _, _, t = total_loss_and_grads(rng.uniform(-1, 1, (4, 3)), np.ones(4), np.full(4, Tag.UNIFORM), rng.uniform(-1, 1, (16, 3)), p, mode=mode)
        assert t["eik"] == 1.0


@pytest.mark.parametrize("mode", MODES, ids=lambda m: m.kind)
def test_total_is_weighted_sum(mode, rng):
    p = geometric_init(init_params(tiny_field_config(), seed=2, dtype=np.float64), 0.5, 2, verify=False)
    x = rng.uniform(-0.9, 0.9, (64, 3))
    f2d = rng.normal(0, 0.3, 64)
    tag = rng.integers(0, 4, 64).astype(np.uint8)
    w = LossWeights(0.37, 0.11, 7.0)
    total, _, t = total_loss_and_grads(x, f2d, tag, rng.uniform(-1, 1, (32, 3)), p, w, mode)
    assert abs(total - (t["on"] + t["off"] + w.lambda_eik * t["eik"] + w.lambda_min * t["min"])) < 1e-12
    f = field_forward(x, p).astype(np.float64)
    on, off, _ = classify_symmetric_difference(tag, f2d, f)
    assert t["on"] == pytest.approx(loss_on(f[on], f2d[on]), abs=1e-12)
    assert t["off"] == pytest.approx(loss_off(f[off], f2d[off]), abs=1e-12)


def test_perfect_fit_zero_data_gradient(rng):
    p = geometric_init(init_params(tiny_field_config(), seed=3, dtype=np.float64), 0.5, 3, verify=False)
    x = rng.uniform(-0.9, 0.9, (40, 3))
    f = field_forward(x, p)
    tag = np.full(40, Tag.UNIFORM)
    total, grads, t = total_loss_and_grads(x, f, tag, rng.uniform(-1, 1, (8, 3)), p, LossWeights(0.0, 0.0))
    assert total == 0.0 and t["n_off"] == 0
    assert all(np.all(g == 0) for g in grads.values())


def test_off_fraction_zero_with_oracle_labels(rng):
    p = geometric_init(init_params(tiny_field_config(), seed=3, dtype=np.float64), 0.5, 3, verify=False)
    x = rng.uniform(-0.9, 0.9, (500, 3))
    _, _, t = total_loss_and_grads(x, field_forward(x, p), np.full(500, Tag.UNIFORM), x[:8], p)
    assert t["n_off"] == 0 and t["n_candidates"] == 500


def test_nonfinite_loss_reports_terms(rng):
    p = init_params(tiny_field_config(), dtype=np.float64)
    with pytest.raises(NonFiniteLossError) as err:
        total_loss_and_grads(rng.uniform(-1, 1, (4, 3)), np.full(4, np.nan), np.full(4, Tag.ON_CONTOUR), rng.uniform(-1, 1, (4, 3)), p)
    assert "on" in err.value.terms


def _finite_difference_check(mode, seed=0):
    """Max relative error per parameter block against central differences."""
    rng = np.random.default_rng(seed)
    p = init_params(tiny_field_config(), seed=3, dtype=np.float64)
    p.tensors["hash_tables"] = rng.normal(0, 0.5, p["hash_tables"].shape)
    x = rng.uniform(-0.9, 0.9, (32, 3))
    f2d = rng.normal(0, 0.3, 32)
    tag = rng.integers(0, 4, 32).astype(np.uint8)
    f2d[tag == Tag.ON_CONTOUR] = 0
    reg = rng.uniform(-1, 1, (32, 3))
    w = LossWeights(0.5, 0.3, 5.0)

    def loss():
        return total_loss_and_grads(x, f2d, tag, reg, p, w, mode)[0]

    _, grads, _ = total_loss_and_grads(x, f2d, tag, reg, p, w, mode)
    errs = {}
    for k in LEARNED:
        th = p.tensors[k]
        fd = np.zeros_like(th)
        for i in np.ndindex(th.shape):
            v = th[i]
            h = 1e-4 * max(abs(v), 1e-2)
            th[i] = v + h
            lp = loss()
            th[i] = v - h
            lm = loss()
            th[i] = v
            fd[i] = (lp - lm) / (2 * h)
        errs[k] = np.linalg.norm(grads[k] - fd) / max(np.linalg.norm(fd), 1e-30)
    return errs


@pytest.mark.parametrize("mode", MODES, ids=lambda m: m.kind)
def test_gradient_oracle(mode):
    errs = _finite_difference_check(mode)
    assert max(errs.values()) < 1e-4, errs


# --- optimizer ----------------------------------------------------------------------


def test_adam_zero_gradient_is_noop():
    p = init_params(tiny_field_config(), seed=1)
    before = {k: v.copy() for k, v in p.tensors.items()}
    adam_step(p, {k: np.zeros_like(p[k]) for k in LEARNED}, AdamState.zeros_like(p), 1e-3)
    assert all(np.array_equal(before[k], p[k]) for k in p.tensors)


def test_adam_first_step_identity():
    p = init_params(tiny_field_config(), seed=1, dtype=np.float64)
    for k in LEARNED:
        p.tensors[k][:] = 0
    adam_step(p, {k: np.ones_like(p[k]) for k in LEARNED}, AdamState.zeros_like(p), 1e-3)
    for k in LEARNED:
        np.testing.assert_allclose(p[k], -1e-3, rtol=1e-6)


def test_weight_decay_scope():
    p = init_params(tiny_field_config(), seed=1, dtype=np.float64)
    before = {k: v.copy() for k, v in p.tensors.items()}
    adam_step(p, {k: np.zeros_like(p[k]) for k in LEARNED}, AdamState.zeros_like(p), 1e-2, weight_decay=0.5)
    for k in p.tensors:
        if k in MLP_WEIGHTS:
            np.testing.assert_allclose(p[k], before[k] * (1 - 1e-2 * 0.5))
        else:
            assert np.array_equal(p[k], before[k]), k


def test_adam_nonfinite_update():
    p = init_params(tiny_field_config(), seed=1)
    g = {k: np.zeros_like(p[k]) for k in LEARNED}
    g["sdf_b2"][:] = np.nan
    before = p.copy()
    with pytest.raises(NonFiniteLossError):
        adam_step(p, g, AdamState.zeros_like(p), 1e-3)
    assert all(np.array_equal(before[k], p[k]) for k in LEARNED)


def test_learning_rate_schedule():
    cfg = TrainConfig()
    assert cfg.lr_at(0) == 5e-4
    assert cfg.lr_at(9) == 5e-4
    assert cfg.lr_at(20) == pytest.approx(5e-4 * 0.81, rel=1e-15)
    assert cfg.lr_at(499) == 5e-4 * 0.9**49


# --- config file ----------------------------------------------------------------------


def test_config_roundtrip():
    cfg = desk_config(reg_batch=2**10, seed=7, grad_mode=GradientMode("numerical", 0.001))
    again = parse_config(config_to_text(cfg))
    assert again == cfg


def test_default_config_matches_table():
    cfg = TrainConfig()
    assert (cfg.epochs, cfg.batch, cfg.lr0, cfg.weight_decay) == (500, 2**17, 5e-4, 2e-3)
    assert (cfg.weights.lambda_eik, cfg.weights.lambda_min, cfg.weights.beta_min) == (1e-3, 5e-2, 100.0)
    h = cfg.field.hash
    assert (h.levels, h.n_min, h.n_max, h.features, h.table_size) == (16, 32, 1024, 4, 2**22)
    assert cfg.schedule == SamplingSchedule()


def test_config_documented_keys_present():
    for key in (
        "epochs", "batch_log2", "lr0", "lr_decay", "lr_decay_every", "lambda_eik", "lambda_min",
        "beta_min", "beta_act", "alpha", "hash_levels", "hash_nmin_log2", "hash_nmax_log2",
        "hash_feat", "hash_table_log2", "rff_dim", "rff_var", "seed", "grad_mode", "deterministic",
    ):  # fmt: skip
        assert key in CONFIG_KEYS


@pytest.mark.parametrize(
    "text,match",
    [
        ("epochz = 3", "epochz"),
        ("epochs = many", "epochs"),
        ("just words", "line 1"),
        ("grad_mode = sideways", "grad_mode"),
        ("deterministic = maybe", "deterministic"),
        ("lambda_eik = -1", "non-negative"),
    ],
)
def test_config_errors(text, match):
    with pytest.raises(ConfigError, match=match):
        parse_config(text)


def test_config_comments_and_file(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("# header\nepochs = 3  # short\n\nbatch_log2=10\n")
    cfg = load_config(path)
    assert cfg.epochs == 3 and cfg.batch == 1024


# --- loop -------------------------------------------------------------------------


@pytest.fixture(scope="module")
def toy_scene():
    return normalize_scene(sphere_sections(15, segments=32))


@pytest.fixture(scope="module")
def toy_run(toy_scene, tmp_path_factory):
    d = tmp_path_factory.mktemp("toy")
    cfg = tiny_train_config(epochs=50, batch=2**14, reg_batch=2**9)
    params, log = train(toy_scene, cfg, checkpoint_path=d / "t.ckpt", log_path=d / "t.csv")
    return cfg, params, log, d


def test_toy_loss_drops_tenfold(toy_run):
    _, _, log, _ = toy_run
    total = log.column("loss_total")
    assert len(total) == 50
    assert total[-1] < 0.1 * total[0]


def test_toy_moving_average_trend(toy_run):
    _, _, log, _ = toy_run
    total = log.column("loss_total")
    ma = np.convolve(total, np.ones(20) / 20, mode="valid")
    # windows starting after epoch 10; small slack for minibatch noise
    tail = ma[10:]
    assert np.all(np.diff(tail) <= 0.02 * tail[:-1])


def test_toy_log_file(toy_run):
    cfg, _, log, d = toy_run
    text = (d / "t.csv").read_text()
    assert text.startswith(f"# seed={cfg.seed}\n")
    lines = text.splitlines()
    assert lines[1] == "# rebuild epoch=0 epsilon=0.03125 size=%d" % log.rebuilds[0]["size"]
    assert lines[2] == ",".join(LOG_COLUMNS)
    rows = read_log_csv(d / "t.csv")
    assert rows == log.rows
    for r in rows:
        assert r["loss_total"] == pytest.approx(
            r["loss_on"] + r["loss_off"] + 1e-3 * r["loss_eik"] + 5e-2 * r["loss_min"], abs=1e-12
        )


def test_toy_rebuilds_logged(toy_run, toy_scene):
    cfg, _, log, _ = toy_run
    assert [r["epoch"] for r in log.rebuilds] == [0]
    assert log.rebuilds[0]["epsilon"] == 2.0**-5
    bank = build_sample_bank(toy_scene, cfg.schedule, 0, cfg.seed)
    assert log.rebuilds[0]["size"] == len(bank)
    assert log.rows[0]["iter"] == math.ceil(len(bank) / cfg.batch)


def test_train_deterministic(toy_scene, tmp_path):
    cfg = tiny_train_config(epochs=2, batch=2**14, reg_batch=2**8)
    train(toy_scene, cfg, checkpoint_path=tmp_path / "a.ckpt")
    train(toy_scene, cfg, checkpoint_path=tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_train_rejects_unnormalized():
    with pytest.raises(ValueError, match="normalized"):
        train(sphere_sections(3, radius=2.0), tiny_train_config(epochs=1))


def test_nan_abort_keeps_last_good(toy_scene, tmp_path, monkeypatch):
    import sectionsdf.training as tr

    real = tr.total_loss_and_grads
    calls = {"n": 0}

    def flaky(*a, **k):
        calls["n"] += 1
        if calls["n"] == 3:
            raise NonFiniteLossError("non-finite loss", {"total": float("nan")})
        return real(*a, **k)

    monkeypatch.setattr(tr, "total_loss_and_grads", flaky)
    with pytest.raises(NonFiniteLossError) as err:
        train(toy_scene, tiny_train_config(epochs=3, batch=2**14, reg_batch=2**8), checkpoint_path=tmp_path / "x.ckpt")
    assert err.value.checkpoint == str(tmp_path / "x.ckpt")
    assert (tmp_path / "x.ckpt").exists()
    err.value.last_good.check_finite()
