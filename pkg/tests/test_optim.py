"""ParameterStore, AdamW, LR schedules, checkpoint round-trips."""

import numpy as np
import pytest

from octgen import autodiff as ad
from octgen.errors import MissingGradient, OctgenError
from octgen.optim import AdamW, ParameterStore, adamw_step, load_checkpoint, lr_const, lr_linear, save_checkpoint


def test_store_unique_names():
    s = ParameterStore()
    s.param("a", np.zeros(3))
    with pytest.raises(OctgenError):
        s.param("a", np.zeros(3))


def test_freeze_clears_requires_grad():
    s = ParameterStore()
    t = s.param("net.w", np.ones(2))
    s.freeze("net.")
    assert not t.requires_grad and s.is_frozen("net.w")
    assert s.trainable() == []


def test_adamw_zero_grad_zero_decay_is_noop():
    s = ParameterStore()
    p = s.param("w", np.array([1.0, -2.0]))
    opt = AdamW(s, lr=0.1, weight_decay=0.0)
    p.grad = np.zeros_like(p.data)
    opt.step()
    assert np.allclose(p.data, [1.0, -2.0])


def test_adamw_first_step_closed_form():
    # single scalar, g=1, lr=0.1: moves by -0.1/(1+eps) plus the decay term
    s = ParameterStore(dtype=np.float64)
    p = s.param("w", np.array(0.5))
    opt = AdamW(s, lr=0.1, weight_decay=0.01)
    p.grad = np.array(1.0)
    opt.step()
    expected = 0.5 - 0.1 * (1.0 / (1.0 + 1e-8)) - 0.1 * 0.01 * 0.5
    assert abs(float(p.data) - expected) < 1e-12


def test_adamw_missing_grad_raises():
    s = ParameterStore()
    s.param("w", np.zeros(2))
    opt = AdamW(s)
    with pytest.raises(MissingGradient):
        opt.step()


def test_adamw_quadratic_bowl_converges():
    s = ParameterStore(dtype=np.float64)
    p = s.param("x", np.array([3.0, -2.5]))
    opt = AdamW(s, lr=0.05, weight_decay=0.0)
    for _ in range(500):
        p.grad = 2.0 * p.data
        opt.step()
    assert np.all(np.abs(p.data) < 1e-3)


def test_adamw_skips_frozen():
    s = ParameterStore()
    p = s.param("a.w", np.ones(2))
    q = s.param("b.w", np.ones(2))
    s.freeze("a.")
    opt = AdamW(s, lr=0.1)
    q.grad = np.ones(2)
    opt.step()
    assert np.array_equal(p.data, np.ones(2))
    assert not np.array_equal(q.data, np.ones(2))
    assert "a.w" not in opt._m


def test_adamw_step_functional_surface():
    s = ParameterStore(dtype=np.float64)
    s.param("w", np.array([1.0]))
    state = adamw_step(s, {"w": np.array([1.0])}, lr=0.1, weight_decay=0.0)
    first = float(s["w"].data[0])
    assert abs(first - (1.0 - 0.1 / (1.0 + 1e-8))) < 1e-12
    adamw_step(s, {"w": np.array([1.0])}, lr=0.1, weight_decay=0.0, state=state)
    assert float(s["w"].data[0]) < first


def test_lr_linear_endpoints_midpoint_monotone():
    assert lr_linear(0, 100) == 1e-3
    assert lr_linear(100, 100) == 1e-5
    assert np.isclose(lr_linear(50, 100), (1e-3 + 1e-5) / 2)
    vals = [lr_linear(k, 100) for k in range(101)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))
    assert lr_const() == 1e-4


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    s = ParameterStore()
    s.param("enc.w", rng.standard_normal((3, 4)))
    s.param("dec.w", rng.standard_normal((5,)))
    s.freeze("enc.")
    path = tmp_path / "model.ockp"
    save_checkpoint(path, s, step=42, meta={"widths": [8, 16]})
    fresh, step, meta = load_checkpoint(path)
    assert step == 42 and meta == {"widths": [8, 16]}
    assert fresh.names() == ["enc.w", "dec.w"]
    assert np.allclose(fresh["enc.w"].data, s["enc.w"].data)
    assert fresh.is_frozen("enc.w") and not fresh.is_frozen("dec.w")

    # load into an existing store with matching names
    s2 = ParameterStore()
    s2.param("enc.w", np.zeros((3, 4)))
    s2.param("dec.w", np.zeros(5))
    load_checkpoint(path, s2)
    assert np.allclose(s2["dec.w"].data, s["dec.w"].data)


def test_checkpoint_header(tmp_path):
    s = ParameterStore()
    s.param("w", np.zeros(2))
    path = tmp_path / "m.ockp"
    save_checkpoint(path, s)
    raw = path.read_bytes()
    assert raw[:4] == b"OCKP"
    assert int.from_bytes(raw[4:8], "little") == 1
