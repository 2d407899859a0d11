"""Per-tensor finite-difference report for a small configuration."""
import argparse

import numpy as np

from amfstgcn import engine as E
from amfstgcn.decoders import forecast, mse_loss
from amfstgcn.graph import ring_graph
from amfstgcn.model import ModelConfig, init_params


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--eps", type=float, default=1e-6)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    cfg = ModelConfig(n_nodes=6, t_in=6, horizon=3, kernels=((2, 2), (1, 2)), k_hops=3, c_out=4,
                      embed_dim=3, n_blocks=1, fc_hidden=5)
    rng = np.random.default_rng(args.seed)
    p = init_params(cfg, args.seed)
    adj = ring_graph(6).adjacency
    x, y = rng.uniform(size=(2, 6, 6, 1)), rng.uniform(size=(2, 3, 6, 1))
    for r in E.finite_diff_report(lambda: mse_loss(forecast(x, adj, p, cfg).y_fused, y), p.values(), args.eps):
        print(f"{r.name:22s} rel {r.rel_error:.2e}  worst coordinate {r.worst_coordinate:.2e}")


if __name__ == "__main__":
    main()
