import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from amfstgcn import engine as E
from amfstgcn.decoders import ContractError, fc_decode, forecast, fuse, mse_loss, step_head, ts_decode
from amfstgcn.model import encode, spectral_stack

from conftest import tiny_config


def with_values(p, **arrays):
    vals = {k: t.data for k, t in p.items()}
    vals.update(arrays)
    return p.replace(vals)


def test_fc_zero_weights_give_zero_forecast(tiny, rng):
    cfg, p, adj = tiny
    p = p.replace({k: np.zeros(t.shape) for k, t in p.items()})
    out = fc_decode(rng.normal(size=(2, 6, 6, 4)), p, 3, 1)
    assert out.shape == (2, 3, 6, 1) and not out.data.any()


def test_fc_constant_bias(tiny, rng):
    cfg, p, adj = tiny
    p = with_values(p, fc_w2=np.zeros((5, 3)), fc_b2=np.array([0.25, -1.0, 2.0]))
    out = fc_decode(rng.normal(size=(2, 6, 6, 4)), p, 3, 1).data
    for m, b in enumerate([0.25, -1.0, 2.0]):
        assert np.all(out[:, m] == b)


def test_fc_loop_oracle(tiny, rng):
    cfg, p, adj = tiny
    p = with_values(p, fc_b1=rng.normal(size=5), fc_b2=rng.normal(size=3))
    h = rng.normal(size=(2, 6, 6, 4))
    out = fc_decode(h, p, 3, 1).data
    w1, b1, w2, b2 = (p[k].data for k in ("fc_w1", "fc_b1", "fc_w2", "fc_b2"))
    for b in range(2):
        for v in range(6):
            flat = h[b, v].reshape(-1)
            hid = np.maximum(flat @ w1 + b1, 0)
            y = hid @ w2 + b2
            assert np.allclose(out[b, :, v, 0], y, rtol=0, atol=1e-12)


def test_ts_single_step(tiny, rng):
    cfg, p, adj = tiny
    x = rng.normal(size=(2, 6, 6, 1))
    st = spectral_stack(p, adj, cfg)
    out = ts_decode(x, st, p, cfg, 1).data
    ref = step_head(encode(x, st, p, cfg), x, p).data
    assert np.array_equal(out[:, 0], ref)


def test_ts_constant_head_is_a_fixed_point(tiny, rng):
    cfg, p, adj = tiny
    p = with_values(p, ts_w=np.zeros_like(p["ts_w"].data), ts_b=np.array([0.7]))
    out = ts_decode(rng.normal(size=(1, 6, 6, 1)), spectral_stack(p, adj, cfg), p, cfg, 4).data
    assert np.all(out == 0.7)


def test_ts_three_steps_match_unrolled_oracle(tiny, rng):
    cfg, p, adj = tiny
    x = rng.normal(size=(2, 6, 6, 1))
    st = spectral_stack(p, adj, cfg)
    out = ts_decode(x, st, p, cfg, 3).data
    buf = x.copy()
    frames = []
    for _ in range(3):
        h = encode(buf, st, p, cfg).data
        feats = np.concatenate([h.reshape(2, 6, -1), buf.transpose(0, 2, 1, 3).reshape(2, 6, -1)], -1)
        nxt = feats @ p["ts_w"].data + p["ts_b"].data
        frames.append(nxt)
        buf = np.concatenate([buf[:, 1:], nxt[:, None]], axis=1)
    assert np.allclose(out, np.stack(frames, 1), rtol=0, atol=1e-12)


def test_ts_prefix_consistency(tiny, rng):
    cfg, p, adj = tiny
    x = rng.normal(size=(1, 6, 6, 1))
    st = spectral_stack(p, adj, cfg)
    full = ts_decode(x, st, p, cfg, 5).data
    first = ts_decode(x, st, p, cfg, 2).data
    buf = np.concatenate([x[:, 2:], first], axis=1)
    rest = ts_decode(buf, st, p, cfg, 3).data
    assert np.array_equal(np.concatenate([first, rest], 1), full)


def test_ts_light_reuses_features(tiny, rng):
    cfg, p, adj = tiny
    light = tiny_config(ts_light=True)
    x = rng.normal(size=(1, 6, 6, 1))
    st = spectral_stack(p, adj, cfg)
    a = ts_decode(x, st, p, cfg, 3).data
    b = ts_decode(x, st, p, light, 3).data
    assert np.array_equal(a[:, 0], b[:, 0]) and not np.array_equal(a, b)


def test_fuse_examples(rng):
    a, b = rng.normal(size=(2, 3, 4, 1)), rng.normal(size=(2, 3, 4, 1))
    assert np.allclose(fuse(a, b, np.full((4, 3), 50.0)).data, a, rtol=0, atol=1e-15)
    assert np.array_equal(fuse(a, b, np.zeros((4, 3))).data, (a + b) / 2)
    assert np.allclose(fuse(a, a, rng.normal(size=(4, 3))).data, a, rtol=4e-16, atol=0)
    with pytest.raises(ContractError):
        fuse(a, b[:, :2], np.zeros((4, 3)))
    with pytest.raises(ContractError):
        fuse(a, b, np.zeros((3, 4)))


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, (3, 2, 4, 2), elements=st.floats(-1e3, 1e3)),
       arrays(np.float64, (3, 2, 4, 2), elements=st.floats(-1e3, 1e3)),
       arrays(np.float64, (4, 2), elements=st.floats(-40, 40)))
def test_fusion_betweenness(a, b, g):
    y = fuse(a, b, g).data
    tol = 1e-12 * (np.abs(a) + np.abs(b) + 1)
    assert np.all(y >= np.minimum(a, b) - tol) and np.all(y <= np.maximum(a, b) + tol)


def test_mse_examples(rng):
    y = rng.normal(size=(3, 4, 2))
    assert mse_loss(y, y).item() == 0
    assert mse_loss(y + 2, y).item() == pytest.approx(4.0, abs=1e-12)
    yh = rng.normal(size=(2, 3, 4, 2))
    yt = rng.normal(size=(2, 3, 4, 2))
    per_step = []
    for m in range(3):
        s = 0.0
        for b in range(2):
            for n in range(4):
                for c in range(2):
                    s += (yh[b, m, n, c] - yt[b, m, n, c]) ** 2
        per_step.append(s / (2 * 4 * 2))
    assert mse_loss(yh, yt).item() == pytest.approx(sum(per_step) / 3, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.permutations(range(5)))
def test_mse_node_permutation_invariance(seed, perm):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(2, 3, 5, 1)), rng.normal(size=(2, 3, 5, 1))
    perm = list(perm)
    assert mse_loss(a[:, :, perm], b[:, :, perm]).item() == pytest.approx(mse_loss(a, b).item(), rel=1e-14)


def test_forecast_shapes_and_decoder_gradients(tiny, rng):
    cfg, p, adj = tiny
    x, y = rng.normal(size=(2, 6, 6, 1)), rng.normal(size=(2, 3, 6, 1))
    out = forecast(x, adj, p, cfg)
    assert out.y_fc.shape == out.y_ts.shape == out.y_fused.shape == (2, 3, 6, 1)
    names = ["fc_w1", "fc_b2", "ts_w", "ts_b", "gate_raw"]
    err = E.finite_diff_check(lambda: mse_loss(forecast(x, adj, p, cfg).y_fused, y), [p[k] for k in names])
    assert err <= 1e-4
