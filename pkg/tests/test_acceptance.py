"""Acceptance gate: one PASS/FAIL line per criterion, printed even under capture.

The benchmark criteria (7 and 10) train eleven models in total and take a
while on one core; run ``pytest tests/test_acceptance.py -v`` to see the lines.
"""
import json
import time

import numpy as np
import pytest

from amfstgcn import benchmark as B
from amfstgcn import engine as E
from amfstgcn.checkpoint import Checkpoint, decode_checkpoint, encode_checkpoint, load_checkpoint
from amfstgcn.cli import main, read_csv
from amfstgcn.data import normalize, read_values_csv, spatial_lag_ring, write_values_csv
from amfstgcn.decoders import forecast, fuse, mse_loss
from amfstgcn.graph import (SpectralStack, TrafficGraph, apply_mask, read_adjacency_csv, ring_graph,
                            write_edge_list)
from amfstgcn.model import DEFAULT_KERNELS, amf_attention, init_params, stconv_forward, uniform_scores

from conftest import tiny_config

_RUNS = {}
SPEC = B.BenchSpec()


@pytest.fixture
def verdict(capsys):
    def emit(num, title, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {num} {title}: {detail}")
        assert ok, f"criterion {num} failed: {detail}"
    return emit


def random_symmetric(rng, n, p=0.5):
    a = np.triu((rng.uniform(size=(n, n)) < p).astype(float), 1)
    return a + a.T


# ---------------------------------------------------------------- 1

def test_c1_gradient_integrity(verdict):
    cfg = tiny_config()
    assert cfg.use_mask and cfg.use_se and cfg.kernels == ((2, 2), (1, 2))
    rng = np.random.default_rng(0)
    p = init_params(cfg, 3)
    # shift zero-initialised biases and the gate so no path is trivially flat
    p = p.replace({k: t.data + rng.normal(0, 0.1, t.shape)
                   if k == "gate_raw" or k.endswith(("bias", "_b1", "_b2", "ln_beta")) else t.data
                   for k, t in p.items()})
    adj = ring_graph(6).adjacency
    x, y = rng.uniform(size=(2, 6, 6, 1)), rng.uniform(size=(2, 3, 6, 1))
    t0 = time.perf_counter()
    report = E.finite_diff_report(lambda: mse_loss(forecast(x, adj, p, cfg).y_fused, y), p.values(), eps=1e-6)
    secs = time.perf_counter() - t0
    worst = max(report, key=lambda r: r.rel_error)
    ok = len(report) == len(p.names()) and worst.rel_error <= 1e-4 and secs < 120
    verdict(1, "gradient integrity", ok,
            f"{len(report)} tensors ({p.count()} scalars), worst rel error {worst.rel_error:.2e} "
            f"({worst.name}), {secs:.1f}s")


# ---------------------------------------------------------------- 2

def test_c2_spectral_oracle(verdict):
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(20):
        g = TrafficGraph(random_symmetric(rng, 5))
        st = SpectralStack.from_graph(g, 6)
        w, v = np.linalg.eigh(st.scaled.data)
        w = np.clip(w, -1.0, 1.0)
        ref = np.stack([(v * np.cos(k * np.arccos(w))) @ v.T for k in range(6)])
        worst = max(worst, float(np.max(np.abs(st.stack.data - ref))))
    verdict(2, "spectral oracle", worst <= 1e-10, f"20 graphs, K=6, max abs deviation {worst:.2e}")


# ---------------------------------------------------------------- 3

def test_c3_shape_contracts(verdict):
    rng = np.random.default_rng(3)
    n, co = 4, 5
    lifted = rng.normal(size=(1, n, 12, 6, 2))
    bad = []
    for kt, ks in DEFAULT_KERNELS:
        theta, bias = rng.normal(size=(kt, ks, 2, co)), np.zeros(co)
        padded = stconv_forward(lifted, theta, bias, padding=True).shape[1:]
        valid = stconv_forward(lifted, theta, bias, padding=False).shape[1:]
        if padded != (n, 12, 6, co) or valid != (n, 12 - kt + 1, 6 - ks + 1, co):
            bad.append((kt, ks, padded, valid))
    verdict(3, "shape contracts", not bad, "all five kernels exact" if not bad else f"mismatches {bad}")


# ---------------------------------------------------------------- 4

def test_c4_attention(verdict):
    rng = np.random.default_rng(4)
    emb, wq = rng.normal(size=(7, 3)), rng.normal(size=(3, 4))
    keys = [rng.normal(size=(2, 7, 4)) * 3 for _ in range(5)]
    s = amf_attention(emb, wq, keys).data
    rows = float(np.max(np.abs(s.sum(-1) - 1)))
    same = amf_attention(emb, wq, [keys[0]] * 5).data
    uniform = bool(np.all(same == same[..., :1])) and np.allclose(same, 0.2, rtol=0, atol=1e-15)
    perm = [3, 0, 4, 1, 2]
    equiv = np.array_equal(amf_attention(emb, wq, [keys[i] for i in perm]).data, s[..., perm])
    cfg = tiny_config()
    off = tiny_config(use_attention=False)
    p_on, p_off = init_params(cfg, 5), init_params(off, 5)
    p_on = p_on.replace({k: p_off[k].data if k in p_off else t.data for k, t in p_on.items()})
    x = rng.uniform(size=(3, 6, 6, 1))
    adj = ring_graph(6).adjacency
    a = forecast(x, adj, p_off, off).y_fused.data
    b = forecast(x, adj, p_on, cfg, scores_override=[uniform_scores(3, 6, 2)]).y_fused.data
    bitexact = np.array_equal(a, b)
    ok = rows <= 1e-9 and uniform and equiv and bitexact
    verdict(4, "attention properties", ok,
            f"row-sum dev {rows:.1e}, uniform keys {uniform}, permutation exact {equiv}, "
            f"disabled == uniform 1/B bit-exact {bitexact}")


# ---------------------------------------------------------------- 5

def test_c5_mask(verdict):
    rng = np.random.default_rng(5)
    support = True
    for _ in range(50):
        a = random_symmetric(rng, 6)
        am = apply_mask(rng.normal(size=(6, 6)), a).data
        support &= bool(np.all((am != 0) <= (a != 0)))
    cfg, off = tiny_config(), tiny_config(use_mask=False)
    p_on = init_params(cfg, 6)
    p_off = init_params(off, 6)
    p_off = p_off.replace({k: p_on[k].data for k in p_off.names()})
    x = rng.uniform(size=(3, 6, 6, 1))
    adj = ring_graph(6).adjacency
    bitexact = np.array_equal(forecast(x, adj, p_on, cfg).y_fused.data, forecast(x, adj, p_off, off).y_fused.data)
    verdict(5, "mask properties", support and bitexact,
            f"support preserved on 50 random masks {support}, unit mask == mask-free bit-exact {bitexact}")


# ---------------------------------------------------------------- 6

def test_c6_fusion(verdict):
    rng = np.random.default_rng(6)
    a = rng.normal(size=(1000, 2, 3, 1)) * rng.lognormal(0, 3, size=(1000, 1, 1, 1))
    b = rng.normal(size=(1000, 2, 3, 1)) * rng.lognormal(0, 3, size=(1000, 1, 1, 1))
    g = rng.normal(0, 5, size=(3, 2))
    y = fuse(a, b, g).data
    between = bool(np.all((np.minimum(a, b) <= y) & (y <= np.maximum(a, b))))
    mean = np.array_equal(fuse(a, b, np.zeros((3, 2))).data, (a + b) / 2)
    verdict(6, "fusion", between and mean, f"betweenness on 1000 triples {between}, sigma(0) exact mean {mean}")


# ---------------------------------------------------------------- 7

def bench(seed, **flags):
    key = ({(): "full", (("use_mask", False),): "w/o mask",
            (("use_attention", False),): "w/o attention"}[tuple(sorted(flags.items()))], seed)
    if key not in _RUNS:
        _RUNS[key] = B.run(SPEC, seed, **flags)
    return _RUNS[key]


@pytest.mark.slow
def test_c7_overfit_and_baseline(verdict):
    r = bench(7)
    ha, opt = B.ha(SPEC), B.oracle(SPEC)
    gain = B.improvement(r.test.mae_mean, ha.mae_mean)
    finite = all(np.isfinite(h[1]) for h in r.history)
    ok = finite and r.train_ratio <= 0.05 and gain >= 0.20 and r.seconds < 600
    verdict(7, "overfit + HA benchmark", ok,
            f"train MSE ratio {r.train_ratio:.4f} (<= 0.05), test MAE {r.test.mae_mean:.4f} vs HA "
            f"{ha.mae_mean:.4f}: gain {gain:+.1%} (needs >= +20%; process-aware oracle reaches "
            f"{B.improvement(opt.mae_mean, ha.mae_mean):+.1%}), {r.seconds:.0f}s")


# ---------------------------------------------------------------- 8

def _cli_harness(root):
    ids = [f"n{i}" for i in range(5)]
    write_values_csv(root / "v.csv", ids, spatial_lag_ring(5, 200, lag=1, seed=3))
    (root / "m.json").write_text(json.dumps({"channels": ["v.csv"], "timeslot": "1h", "node_ids": ids,
                                             "input_length": 6, "output_length": 2, "period": 24}))
    write_edge_list(TrafficGraph(ring_graph(5).adjacency, ids), root / "g.csv")
    (root / "c.json").write_text(json.dumps({"epochs": 3, "model": {
        "c_out": 4, "k_hops": 2, "n_blocks": 1, "fc_hidden": 8, "embed_dim": 3, "kernels": [[2, 2], [1, 2]]}}))
    return ["--manifest", str(root / "m.json"), "--graph", str(root / "g.csv")]


def test_c8_determinism(verdict, tmp_path):
    base = _cli_harness(tmp_path)
    blobs = []
    for tag in "ab":
        rc = main(["train", *base, "--config", str(tmp_path / "c.json"), "--seed", "7",
                   "--checkpoint", str(tmp_path / f"{tag}.ck"), "--loss-csv", str(tmp_path / f"{tag}.csv")])
        assert rc == 0
        blobs.append(((tmp_path / f"{tag}.ck").read_bytes(), (tmp_path / f"{tag}.csv").read_bytes()))
    same_ck, same_csv = blobs[0][0] == blobs[1][0], blobs[0][1] == blobs[1][1]
    verdict(8, "determinism", same_ck and same_csv,
            f"checkpoints identical {same_ck}, loss CSVs identical {same_csv}")


# ---------------------------------------------------------------- 9

def test_c9_round_trips(verdict, tmp_path):
    rng = np.random.default_rng(9)
    cfg = tiny_config()
    p = init_params(cfg, 9)
    ck = Checkpoint(p, cfg, normalize(rng.normal(size=50))[1], ring_graph(6).fingerprint(), {"seed": 9})
    back = decode_checkpoint(encode_checkpoint(ck))
    ck_exact = all(np.array_equal(back.params[k].data, t.data.astype(np.float32).astype(np.float64))
                   for k, t in p.items()) and encode_checkpoint(back) == encode_checkpoint(ck)

    x = rng.normal(size=(200, 4)) * 10
    xn, bounds = normalize(x)
    norm_dev = float(np.max(np.abs(bounds.denormalize(xn) - x)))

    base = _cli_harness(tmp_path)
    ckp = str(tmp_path / "m.ck")
    assert main(["train", *base, "--config", str(tmp_path / "c.json"), "--checkpoint", ckp,
                 "--loss-csv", str(tmp_path / "loss.csv")]) == 0
    assert main(["eval", *base, "--checkpoint", ckp, "--out", str(tmp_path / "e.csv")]) == 0
    assert main(["predict", *base, "--checkpoint", ckp, "--out", str(tmp_path / "p.csv")]) == 0
    assert main(["report", *base, "--checkpoint", ckp, "--out-dir", str(tmp_path / "r")]) == 0
    csv_ok = True
    for name in ("loss.csv", "e.csv", "p.csv", "r/horizon_curves.csv", "r/branch_attention.csv"):
        head, rows = read_csv(tmp_path / name)
        for r in rows:
            for cell in r:
                try:
                    v = float(cell)
                except ValueError:
                    continue
                csv_ok &= repr(v) == cell or str(int(v)) == cell
    g = read_adjacency_csv(tmp_path / "g.csv", [f"n{i}" for i in range(5)])
    csv_ok &= np.array_equal(g.adjacency, ring_graph(5).adjacency)
    ids, vals = read_values_csv(tmp_path / "v.csv")
    csv_ok &= np.array_equal(vals, spatial_lag_ring(5, 200, lag=1, seed=3))
    csv_ok &= load_checkpoint(ckp).config["source"] == json.loads((tmp_path / "c.json").read_text())
    ok = ck_exact and norm_dev <= 1e-12 and csv_ok
    verdict(9, "round trips", ok,
            f"checkpoint float32 bit-exact {ck_exact}, denormalize(normalize) max dev {norm_dev:.1e}, "
            f"CSVs re-parse losslessly {csv_ok}")


# ---------------------------------------------------------------- 10

@pytest.mark.slow
def test_c10_ablation(verdict):
    seeds = (7, 8, 9)
    runs = {name: [bench(s, **flags) for s in seeds] for name, flags in
            (("full", {}), ("w/o mask", {"use_mask": False}), ("w/o attention", {"use_attention": False}))}
    mae = {k: float(np.mean([r.test.mae_mean for r in v])) for k, v in runs.items()}
    full, nomask, noatt = mae["full"], mae["w/o mask"], mae["w/o attention"]
    required = full <= 1.02 * nomask and full <= 1.02 * noatt and nomask <= 1.05 * noatt
    verdict(10, "ablation ordering", required,
            f"seed-mean test MAE full {full:.4f}, w/o mask {nomask:.4f}, w/o attention {noatt:.4f}; "
            f"full <= w/o mask: {full <= nomask}; w/o mask <= w/o attention +5%: {nomask <= 1.05 * noatt}; "
            f"full within 2% of both: {full <= 1.02 * min(nomask, noatt)}")
