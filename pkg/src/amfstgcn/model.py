"""AMF-STConv blocks: joint spatial-temporal graph convolution, branch attention, block output."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import engine as E
from .engine import Tensor
from .graph import masked_stack

DEFAULT_KERNELS = ((3, 1), (1, 3), (5, 2), (3, 2), (2, 3))


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    n_nodes: int
    in_channels: int = 1
    t_in: int = 12
    horizon: int = 6
    kernels: tuple[tuple[int, int], ...] = DEFAULT_KERNELS
    k_hops: int = 6
    c_out: int = 16
    embed_dim: int = 10
    n_blocks: int = 2
    se_ratio: int = 4
    fc_hidden: int = 64
    use_mask: bool = True
    use_attention: bool = True
    use_se: bool = True
    key_transform: bool = False
    ts_light: bool = False

    def __post_init__(self):
        self.kernels = tuple(tuple(int(v) for v in k) for k in self.kernels)
        if self.n_blocks < 1:
            raise ConfigError("need at least one block")
        if not self.kernels:
            raise ConfigError("need at least one branch kernel")
        for kt, ks in self.kernels:
            if not 1 <= ks <= self.k_hops:
                raise ConfigError(f"kernel spatial extent {ks} exceeds Chebyshev order {self.k_hops}")
            if not 1 <= kt <= self.t_in:
                raise ConfigError(f"kernel temporal extent {kt} exceeds input length {self.t_in}")
        if self.horizon < 1 or self.n_nodes < 1:
            raise ConfigError("horizon and node count must be positive")

    @property
    def n_branches(self) -> int:
        return len(self.kernels)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kernels"] = [list(k) for k in self.kernels]
        return d


# ---------------------------------------------------------------- parameters

@dataclass
class Params:
    """Named learnable tensors, in a fixed insertion order."""

    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def names(self) -> list[str]:
        return list(self.tensors)

    def values(self) -> list[Tensor]:
        return list(self.tensors.values())

    def items(self):
        return self.tensors.items()

    def count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def replace(self, arrays: dict[str, np.ndarray]) -> "Params":
        return Params({k: Tensor(arrays[k], requires_grad=True, name=k) for k in self.tensors})


class _Init:
    def __init__(self, seed: int):
        self.rng = np.random.default_rng(seed)
        self.out: dict[str, Tensor] = {}

    def uniform(self, name, shape, fan_in):
        b = math.sqrt(1.0 / fan_in)
        self.out[name] = Tensor(self.rng.uniform(-b, b, shape), requires_grad=True, name=name)

    def const(self, name, shape, value):
        self.out[name] = Tensor(np.full(shape, float(value)), requires_grad=True, name=name)

    def normal(self, name, shape, std):
        self.out[name] = Tensor(self.rng.normal(0.0, std, shape), requires_grad=True, name=name)


def init_params(cfg: ModelConfig, seed: int = 0) -> Params:
    """Fan-in uniform weights, zero biases, unit mask, N(0, 0.1) node embedding."""
    p = _Init(seed)
    n, c, co, nb = cfg.n_nodes, cfg.in_channels, cfg.c_out, cfg.n_branches
    cb = co * nb
    if cfg.use_mask:
        p.const("w_mask", (n, n), 1.0)
    for l in range(cfg.n_blocks):
        ci = c if l == 0 else co
        pre = f"block{l}."
        for b, (kt, ks) in enumerate(cfg.kernels):
            p.uniform(pre + f"theta{b}", (kt, ks, ci, co), kt * ks * ci)
            p.const(pre + f"theta{b}_bias", (co,), 0.0)
        if cfg.use_attention:
            p.normal(pre + "node_embed", (n, cfg.embed_dim), 0.1)
            p.uniform(pre + "w_q", (cfg.embed_dim, co), cfg.embed_dim)
            if cfg.key_transform:
                p.uniform(pre + "w_k", (co, co), co)
        p.uniform(pre + "w_s", (cfg.k_hops, cb, cb), cfg.k_hops * cb)
        if cfg.use_se:
            hid = max(1, cb // cfg.se_ratio)
            p.uniform(pre + "se_w1", (cb, hid), cb)
            p.const(pre + "se_b1", (hid,), 0.0)
            p.uniform(pre + "se_w2", (hid, cb), hid)
            p.const(pre + "se_b2", (cb,), 0.0)
        p.uniform(pre + "w_o", (cb, co), cb)
        if ci != co:
            p.uniform(pre + "w_res", (ci, co), ci)
        p.const(pre + "ln_gamma", (co,), 1.0)
        p.const(pre + "ln_beta", (co,), 0.0)
    flat = cfg.t_in * co
    p.uniform("fc_w1", (flat, cfg.fc_hidden), flat)
    p.const("fc_b1", (cfg.fc_hidden,), 0.0)
    p.uniform("fc_w2", (cfg.fc_hidden, cfg.horizon * c), cfg.fc_hidden)
    p.const("fc_b2", (cfg.horizon * c,), 0.0)
    head_in = flat + cfg.t_in * c
    p.uniform("ts_w", (head_in, c), head_in)
    p.const("ts_b", (c,), 0.0)
    p.const("gate_raw", (n, cfg.horizon), 0.0)
    return Params(p.out)


# ---------------------------------------------------------------- building blocks
# Signals carry a leading batch axis: x is (batch, N, T, C).

def lift_signal(x, stack) -> Tensor:
    """Apply every Chebyshev term to the node axis: (b,N,T,C) -> (b,N,T,K,C)."""
    return E.einsum("kmn,bntc->bmtkc", stack, x)


def _pad_widths(extent: int) -> tuple[int, int]:
    total = extent - 1
    return total // 2, total - total // 2


def stconv_forward(lifted, theta, bias, padding: bool = True) -> Tensor:
    """Joint convolution over (time, hop) of a lifted (b,N,T,K,C_i) signal.

    ``theta`` is (K_t, K_s, C_i, C_o).  Padded output keeps T and K; for even
    extents the extra zero goes on the trailing side.
    """
    lifted, theta, bias = E.as_tensor(lifted), E.as_tensor(theta), E.as_tensor(bias)
    kt, ks, ci, co = theta.shape
    _, _, t, k, c = lifted.shape
    if c != ci:
        raise ConfigError(f"kernel expects {ci} input channels, signal has {c}")
    if padding:
        lifted = E.pad(lifted, ((0, 0), (0, 0), _pad_widths(kt), _pad_widths(ks), (0, 0)))
    elif kt > t or ks > k:
        raise ConfigError(f"kernel {kt}x{ks} larger than signal extent {t}x{k}")
    win = E.unfold2d(lifted, (2, 3), (kt, ks))          # (b,N,T',K',C_i,kt,ks)
    out = E.einsum("bntkcij,ijco->bntko", win, theta)
    return E.add(out, E.broadcast_to(bias, out.shape))


def global_pool(f) -> Tensor:
    """Sum over time and hop axes: (b,N,T,K,C) -> (b,N,C)."""
    return E.esum(f, axis=(2, 3))


def attention_scores(query, keys, c_out: int) -> Tensor:
    """Raw per-node branch scores: (N,C) query and (b,N,B,C) keys -> (b,N,B).

    Computed as a product and a last-axis sum, so every branch row is reduced
    by identical floating-point steps (exact permutation equivariance).
    """
    keys = E.as_tensor(keys)
    q = E.broadcast_to(E.reshape(query, (1, query.shape[0], 1, query.shape[1])), keys.shape)
    return E.scale(E.esum(E.mul(q, keys), axis=-1), 1.0 / math.sqrt(c_out))


def amf_attention(node_embed, w_q, keys: list, w_k=None) -> Tensor:
    """Softmax branch scores per node, shape (b,N,B)."""
    query = E.matmul(E.as_tensor(node_embed), E.as_tensor(w_q))
    kstack = E.stack(keys, axis=2)
    if w_k is not None:
        kstack = E.einsum("bnrc,cd->bnrd", kstack, w_k)
    return E.softmax(attention_scores(query, kstack, query.shape[1]), axis=-1)


def amf_gam(branches: list, scores) -> Tensor:
    """Scale every branch output by its node score and stack them branch-major.

    Returns (b, N, B, T, K, C_o); flattening (B, C_o) gives the concatenated
    channel axis of width C_o*B.
    """
    shapes = {E.as_tensor(f).shape for f in branches}
    if len(shapes) != 1:
        raise ConfigError(f"branch outputs differ in shape: {sorted(shapes)}")
    fs = E.stack(branches, axis=2)
    return E.einsum("bnrtkc,bnr->bnrtkc", fs, scores)


def block_output(ao, x_in, p: Params, pre: str, use_se: bool = True) -> Tensor:
    """(b,N,B,T,K,C_o) attention output and (b,N,T,C_i) block input -> (b,N,T,C_o)."""
    ao = E.as_tensor(ao)
    b, n, nb, t, k, co = ao.shape
    w_s = E.reshape(p[pre + "w_s"], (k, nb, co, nb * co))
    z = E.einsum("bnrtkc,krcj->bntj", ao, w_s)
    if use_se:
        squeeze = E.mean(z, axis=(1, 2))                                  # (b, C_o*B)
        h = E.relu(_affine(squeeze, p[pre + "se_w1"], p[pre + "se_b1"]))
        gate = E.sigmoid(_affine(h, p[pre + "se_w2"], p[pre + "se_b2"]))
        z = E.einsum("bntj,bj->bntj", z, gate)
    y = E.einsum("bntj,jo->bnto", z, p[pre + "w_o"])
    if pre + "w_res" in p:
        res = E.einsum("bntc,co->bnto", x_in, p[pre + "w_res"])
    else:
        res = E.as_tensor(x_in)
    return E.layer_norm(E.add(y, res), p[pre + "ln_gamma"], p[pre + "ln_beta"])


def _affine(x, w, bias) -> Tensor:
    y = E.matmul(x, w)
    return E.add(y, E.broadcast_to(bias, y.shape))


def stconv_block(x, stack, p: Params, cfg: ModelConfig, l: int,
                 scores_override=None, trace: dict | None = None) -> Tensor:
    pre = f"block{l}."
    lifted = lift_signal(x, stack)
    branches = [stconv_forward(lifted, p[pre + f"theta{b}"], p[pre + f"theta{b}_bias"])
                for b in range(cfg.n_branches)]
    if scores_override is not None:
        scores = E.as_tensor(scores_override)
    elif cfg.use_attention:
        keys = [global_pool(f) for f in branches]
        w_k = p[pre + "w_k"] if cfg.key_transform else None
        scores = amf_attention(p[pre + "node_embed"], p[pre + "w_q"], keys, w_k)
    else:
        scores = uniform_scores(x.shape[0], cfg.n_nodes, cfg.n_branches)
    if trace is not None:
        trace.setdefault("scores", []).append(scores.data)
    ao = amf_gam(branches, scores)
    return block_output(ao, x, p, pre, cfg.use_se)


def uniform_scores(batch: int, n: int, nb: int) -> Tensor:
    return Tensor(np.full((batch, n, nb), 1.0 / nb))


def spectral_stack(p: Params, adjacency: np.ndarray, cfg: ModelConfig) -> Tensor:
    w_mask = p["w_mask"] if cfg.use_mask else np.ones_like(adjacency)
    return masked_stack(w_mask, adjacency, cfg.k_hops)


def encode(x, stack, p: Params, cfg: ModelConfig, scores_override=None,
           trace: dict | None = None) -> Tensor:
    """(b,T,N,C) window -> (b,N,T,C_o) features."""
    h = E.transpose(E.as_tensor(x), (0, 2, 1, 3))
    for l in range(cfg.n_blocks):
        ov = None if scores_override is None else scores_override[l]
        h = stconv_block(h, stack, p, cfg, l, ov, trace)
    return h
