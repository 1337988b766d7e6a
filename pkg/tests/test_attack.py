import numpy as np
import pytest

from segfool import tensor as T
from segfool.attack import (AttackConfig, DarkSamObjective, FakeMasks, Objective, SemanticBlueprint, apply_uap,
                            blueprint_from_prompts, build_shadow_target, craft_uap, frequency_loss, load_uap,
                            random_prompts, run_uap_loop, save_uap, spatial_loss, spatial_loss_from_logits,
                            total_loss)
from segfool.errors import AttackDiverged, ContractError, FormatError
from segfool.minisam import MiniSam, binarize
from segfool.prompts import Box, Point
from segfool.tensor import Tensor

from oracles import haar_matrices

FAST = dict(k=3, epochs=2)


def zeros_delta(shape=(3, 64, 64), dtype=np.float32):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True, dtype=dtype)


# -- shadow targets ---------------------------------------------------------


def test_single_prompt_blueprint_is_that_mask(tiny_model, tiny_data):
    x = tiny_data[0].image
    p = Point(30, 30)
    bp = blueprint_from_prompts(tiny_model, x, [p])
    assert np.array_equal(bp.m_fg, binarize(tiny_model.logits(x, [p])[0]))


def test_blueprint_grows_with_k(tiny_model, tiny_data):
    x = tiny_data[1].image
    prompts = random_prompts(np.random.default_rng(0), 10, "mixed", 64)
    prev = np.zeros((64, 64), dtype=bool)
    for k in range(1, 11):
        cur = blueprint_from_prompts(tiny_model, x, prompts[:k]).m_fg
        assert np.all(cur >= prev)
        prev = cur


def test_blueprint_partitions_pixels(tiny_data):
    bp, prompts = build_shadow_target(MiniSam(seed=9), tiny_data[0].image, 10, "point", np.random.default_rng(0))
    assert len(prompts) == 10
    assert np.all(bp.m_fg | bp.m_bg) and not np.any(bp.m_fg & bp.m_bg)
    with pytest.raises(ContractError):
        build_shadow_target(MiniSam(seed=9), tiny_data[0].image, 0, "point", np.random.default_rng(0))


def test_random_boxes_respect_min_side():
    for p in random_prompts(np.random.default_rng(1), 200, "box", 64):
        assert isinstance(p, Box)
        p.check(64)
        assert p.r1 - p.r0 + 1 >= 8 and p.c1 - p.c0 + 1 >= 8


def test_fake_masks():
    m = np.zeros((8, 8), dtype=bool)
    m[2:5, 3:7] = True
    f = FakeMasks.from_blueprint(SemanticBlueprint(m), tau=1.5)
    assert np.all(f.xi_neg <= 0) and np.all(f.xi_pos >= 0)
    assert np.all(f.xi_neg[m] == -1.5) and np.all(f.xi_pos[~m] == 1.5)
    assert np.all(f.xi_neg[~m] == 0) and np.all(f.xi_pos[m] == 0)


# -- losses -----------------------------------------------------------------


def test_spatial_loss_vanishes_at_target():
    m = np.zeros((8, 8), dtype=bool)
    m[1:4, 1:6] = True
    fakes = FakeMasks.from_blueprint(SemanticBlueprint(m), 1.0)
    z = Tensor(np.where(m, -1.0, 1.0).astype(np.float32))
    assert spatial_loss_from_logits([z, z], fakes).item() == 0.0


def test_spatial_loss_with_both_flags_off_is_zero(tiny_model, tiny_data):
    x = tiny_data[0].image
    bp = SemanticBlueprint(np.ones((64, 64), dtype=bool))
    d = zeros_delta()
    loss = spatial_loss(tiny_model, x, d, bp, FakeMasks.from_blueprint(bp, 1.0), [Point(1, 1)], False, False)
    assert loss.item() == 0.0
    T.backward(loss)
    assert d.grad is None or not d.grad.any()


def test_foreground_term_positive_on_clean_image(tiny_model, tiny_data):
    x = tiny_data[0].image
    bp, prompts = build_shadow_target(tiny_model, x, 10, "point", np.random.default_rng(3))
    loss = spatial_loss(tiny_model, x, zeros_delta(), bp, FakeMasks.from_blueprint(bp, 1.0), prompts, True, False)
    assert loss.item() > 0


def test_frequency_loss_examples():
    rng = np.random.default_rng(0)
    x = (0.3 + 0.4 * rng.random((3, 8, 8))).astype(np.float64)
    zero = Tensor(np.zeros_like(x), dtype=np.float64)
    assert frequency_loss(x, zero, 0.01).item() == 0.0
    c = np.array([0.05, -0.02, 0.08])
    const = Tensor(np.broadcast_to(c[:, None, None], x.shape).copy(), dtype=np.float64)
    assert np.isclose(frequency_loss(x, const, 0.01).item(), np.mean(c ** 2), rtol=1e-9)
    sign = np.where((np.add.outer(np.arange(8), np.arange(8)) % 2) == 0, 1.0, -1.0)
    checker = Tensor(np.broadcast_to(0.05 * sign, x.shape).copy(), dtype=np.float64)
    val = frequency_loss(x, checker, 0.01).item()
    assert np.isclose(val, -0.01 * 0.05 ** 2, rtol=1e-9)
    assert val < 0
    assert frequency_loss(x, checker, 0.01, use_lfc=False, use_hfc=False).item() == 0.0


def test_total_loss_combination():
    a, b = Tensor(np.float32(0.7)), Tensor(np.float32(-2.0))
    assert total_loss(a, b, 0.0).item() == pytest.approx(0.7)
    assert total_loss(Tensor(np.float32(0.0)), b, 0.1).item() == pytest.approx(-0.2)


def test_total_loss_matches_scripted_sum(tiny_model, tiny_data):
    """Recompute the default loss with plain numpy and explicit Haar matrices."""
    cfg = AttackConfig()
    x = tiny_data[0].image.astype(np.float64)
    rng = np.random.default_rng(5)
    delta = rng.uniform(-cfg.eps, cfg.eps, x.shape)
    model = tiny_model.cast(np.float64)
    bp, prompts = build_shadow_target(model, x, cfg.k, "point", np.random.default_rng(1))
    fakes = FakeMasks.from_blueprint(bp, cfg.tau)
    d = Tensor(delta, requires_grad=True, dtype=np.float64)
    got = DarkSamObjective().loss(model, x, d, type("C", (), dict(prompts=prompts, blueprint=bp, fakes=fakes)),
                                  cfg, 0).item()

    x_adv = np.clip(x + delta, 0, 1)
    fg = bp.m_fg.astype(float)
    j_sa = np.mean([np.mean((z * fg - fakes.xi_neg) ** 2) + np.mean((z * (1 - fg) - fakes.xi_pos) ** 2)
                    for z in model.logits(x_adv, prompts)])
    low, high = haar_matrices(64)
    phi = lambda im: np.stack([low.T @ (low @ ch @ low.T) @ low for ch in im])  # noqa: E731
    psi = lambda im: np.stack([high.T @ (high @ ch @ high.T) @ high for ch in im])  # noqa: E731
    j_fa = np.mean((phi(x) - phi(x_adv)) ** 2) - cfg.mu * np.mean((psi(x) - psi(x_adv)) ** 2)
    assert got == pytest.approx(j_sa + cfg.lam * j_fa, rel=1e-9)


# -- crafting loop ----------------------------------------------------------


class Recorder(Objective):
    """Wraps an objective and keeps every delta it is shown plus the gradients."""

    def __init__(self, inner):
        self.inner = inner
        self.name = inner.name
        self.seen = []

    def prepare(self, *args):
        return self.inner.prepare(*args)

    def loss(self, model, x, delta, ctx, config, epoch):
        self.seen.append(delta)
        return self.inner.loss(model, x, delta, ctx, config, epoch)


def test_zero_epochs_returns_zero(tiny_model, tiny_data):
    uap = craft_uap(tiny_model, tiny_data[:2], AttackConfig(epochs=0))
    assert uap.delta.shape == (3, 64, 64) and not uap.delta.any()


def test_budget_holds_after_every_step(tiny_model, tiny_data):
    cfg = AttackConfig(k=3, epochs=4)  # 12 steps, enough to reach the 10-level budget
    rec = Recorder(DarkSamObjective())
    uap = run_uap_loop(tiny_model, tiny_data[:3], cfg, rec)
    eps = np.float32(cfg.eps)
    for d in rec.seen[1:] + [Tensor(uap.delta)]:
        assert np.abs(d.data).max() <= eps
    assert np.abs(uap.delta).max() == eps  # the budget is actually used


def test_sign_step_contract(tiny_model, tiny_data):
    cfg = AttackConfig(k=2, epochs=1, eps=1.0, step=1 / 255)
    rec = Recorder(DarkSamObjective())
    uap = run_uap_loop(tiny_model, tiny_data[:2], cfg, rec)
    steps = [d.data for d in rec.seen] + [uap.delta]
    for before, shown, after in zip(steps[:-1], rec.seen, steps[1:]):
        moved = np.abs(after - before)
        live = shown.grad != 0
        assert np.all(np.isclose(moved[live], np.float32(1 / 255), rtol=0, atol=1e-7))
        assert np.all(moved[~live] == 0)


def test_crafting_is_deterministic(tiny_model, tiny_data, tmp_path):
    cfg = AttackConfig(seed=4, **FAST)
    a = craft_uap(tiny_model, tiny_data[:3], cfg)
    b = craft_uap(tiny_model, tiny_data[:3], cfg)
    save_uap(a, str(tmp_path / "a"))
    save_uap(b, str(tmp_path / "b"))
    assert open(tmp_path / "a", "rb").read() == open(tmp_path / "b", "rb").read()


def _grad(model, x, cfg, ctx, **flags):
    c = AttackConfig(**{**cfg.to_dict(), **flags})
    d = Tensor(np.full(x.shape, 0.01, dtype=np.float64), requires_grad=True, dtype=np.float64)
    T.backward(DarkSamObjective().loss(model, x, d, ctx, c, 0))
    return d.grad


def test_disabling_a_term_removes_exactly_its_gradient(tiny_model, tiny_data):
    model = tiny_model.cast(np.float64)
    x = tiny_data[0].image.astype(np.float64)
    cfg = AttackConfig(k=3)
    ctx = DarkSamObjective().prepare(model, tiny_data[0], np.random.default_rng(0), cfg)
    assert np.array_equal(_grad(model, x, cfg, ctx, use_hfc=False), _grad(model, x, cfg, ctx, mu=0.0))
    # spatial-only and frequency-only gradients add up to the full gradient
    full = _grad(model, x, cfg, ctx)
    spatial = _grad(model, x, cfg, ctx, use_hfc=False, use_lfc=False)
    freq = _grad(model, x, cfg, ctx, use_fe=False, use_bm=False)
    assert np.allclose(full, spatial + freq, rtol=0, atol=1e-12)
    fe = _grad(model, x, cfg, ctx, use_bm=False, use_hfc=False, use_lfc=False)
    bm = _grad(model, x, cfg, ctx, use_fe=False, use_hfc=False, use_lfc=False)
    assert np.allclose(spatial, fe + bm, rtol=0, atol=1e-12)
    assert np.allclose(_grad(model, x, cfg, ctx, use_lfc=False), spatial + _grad(
        model, x, cfg, ctx, use_fe=False, use_bm=False, use_lfc=False), rtol=0, atol=1e-12)


def test_nan_loss_aborts_with_image_index(tiny_model, tiny_data):
    bad = MiniSam(seed=0)
    bad.load_state_dict(tiny_model.state_dict())
    bad.params["dec2.b"].data[:] = np.nan
    with pytest.raises(AttackDiverged, match="image index 0"):
        craft_uap(bad, tiny_data[:2], AttackConfig(k=1, epochs=1))


def test_all_terms_disabled_is_refused(tiny_model, tiny_data):
    cfg = AttackConfig(use_fe=False, use_bm=False, use_hfc=False, use_lfc=False)
    with pytest.raises(ContractError):
        craft_uap(tiny_model, tiny_data[:1], cfg)


def test_config_validation():
    with pytest.raises(ContractError):
        AttackConfig(eps=0)
    with pytest.raises(ContractError):
        AttackConfig(k=0)
    with pytest.raises(ContractError):
        AttackConfig(prompt_type="scribble")
    with pytest.raises(ContractError):
        AttackConfig.from_dict({"gamma": 1})
    assert AttackConfig.from_dict(AttackConfig(k=4).to_dict()) == AttackConfig(k=4)


def test_apply_uap_examples():
    rng = np.random.default_rng(0)
    x = rng.random((3, 8, 8)).astype(np.float32)
    assert np.array_equal(apply_uap(x, np.zeros_like(x)), x)
    ones = np.ones((3, 8, 8), dtype=np.float32)
    assert np.array_equal(apply_uap(ones, np.full_like(ones, 10 / 255)), ones)
    d = rng.uniform(-10 / 255, 10 / 255, x.shape).astype(np.float32)
    assert np.abs(apply_uap(x, d) - x).max() <= np.float32(10 / 255)
    with pytest.raises(ContractError):
        apply_uap(x, np.zeros((3, 4, 4), dtype=np.float32))


def test_uap_file_round_trip_and_errors(tiny_model, tiny_data, tmp_path):
    uap = craft_uap(tiny_model, tiny_data[:2], AttackConfig(k=1, epochs=1))
    path = str(tmp_path / "u.duap")
    save_uap(uap, path)
    back = load_uap(path)
    assert back.delta.tobytes() == uap.delta.tobytes()
    assert back.config == uap.config and back.method == "darksam" and back.history == uap.history
    assert back.eps == float(np.float32(10 / 255))
    raw = open(path, "rb").read()
    assert raw[:4] == b"DUAP"
    for bad in (raw[:10], raw[:-1], b"NOPE" + raw[4:], raw + b"x"):
        with open(path, "wb") as fh:
            fh.write(bad)
        with pytest.raises(FormatError):
            load_uap(path)
