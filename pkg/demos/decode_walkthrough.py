"""Decode with a resident window plus retrieved tokens.

Each step attends exactly over the first 128 and last 512 tokens and over
the 100 tokens the index retrieves from the rest; the two partial results
are merged into one softmax.  The script runs the same heads with an
exact linear scan and with the query-guided graph and compares the output
error against full attention and the share of the pool each one scores.

    python demos/decode_walkthrough.py --n-ctx 32768 --heads 4 --steps 32
"""

import argparse

from attnindex.engine import EngineConfig, IndexConfig, decode_run, engine_init
from attnindex.vecstore import WorkloadSpec, generate_workload


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n-ctx", type=int, default=32768)
    ap.add_argument("--heads", type=int, default=4)
    ap.add_argument("--groups", type=int, default=2)
    ap.add_argument("--steps", type=int, default=32)
    ap.add_argument("--threads", type=int, default=4)
    args = ap.parse_args()

    ws = generate_workload(WorkloadSpec(n_ctx=args.n_ctx, n_heads=args.heads,
                                        n_kv_groups=args.groups, n_decode=args.steps))
    print(f"{'index':>9} {'tokens/step':>12} {'pool scanned':>13} {'mean mse':>10} {'max mse':>10}")
    for kind in ("flat", "oodgraph"):
        state = engine_init(ws, EngineConfig(index=IndexConfig(kind=kind), n_threads=args.threads))
        s = decode_run(state, args.steps).summary
        print(f"{kind:>9} {s['mean_tokens_per_step']:12.0f} {100 * s['mean_scan_fraction']:12.2f}% "
              f"{s['mean_mse']:10.2e} {s['max_mse']:10.2e}")
        if kind == "oodgraph":
            mem = state.memory()
            print(f"\nkeys/values stored once per group: {mem['kv_bytes'] / 2**20:.1f} MiB "
                  f"for {mem['n_heads']} heads in {mem['n_kv_groups']} groups; "
                  f"graphs add {mem['index_bytes'] / 2**20:.1f} MiB")


if __name__ == "__main__":
    main()
