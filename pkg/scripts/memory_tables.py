"""Print the analytic memory breakdown (KiB) and the per-length footprint grid (decimal MB)
for the four reference configurations, plus the toy 4x8 model at each head budget."""

import argparse

from hybrid_distill.evalkit import REFERENCE_SPECS, memory_footprint, memory_spec_for
from hybrid_distill.model import HybridLayout, ModelConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--lengths", type=int, nargs="+", default=[128, 2048, 4096])
    ap.add_argument("--toy-ks", type=int, nargs="*", default=[0, 2, 4, 8, 32])
    args = ap.parse_args()

    print(f"{'model':<18}{'state KiB':>12}{'KV KiB/token':>14}")
    for s in REFERENCE_SPECS:
        print(f"{s.name:<18}{s.state_bytes / 1024:>12g}{s.kv_bytes_per_token / 1024:>14g}")
    print()
    print(f"{'model':<18}" + "".join(f"{'L=' + str(L):>12}" for L in args.lengths))
    for s in REFERENCE_SPECS:
        print(f"{s.name:<18}" + "".join(f"{memory_footprint(s, L).mb_str():>12}" for L in args.lengths))

    if args.toy_ks:
        cfg = ModelConfig(n_layers=4, n_heads=8, d_model=64, vocab_size=53, max_T=64)
        print(f"\ntoy 4x8 (float64 state, d_state = d_head = {cfg.d_head}), bytes")
        for k in args.toy_ks:
            layout = HybridLayout.from_heads(cfg, [(i // cfg.n_heads, i % cfg.n_heads) for i in range(k)])
            spec = memory_spec_for(cfg, layout, bytes_per_elem=8)
            print(f"k={k:<3}" + "".join(f"{memory_footprint(spec, L).bytes:>12}" for L in args.lengths))


if __name__ == "__main__":
    main()
