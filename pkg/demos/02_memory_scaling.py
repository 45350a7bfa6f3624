"""Retained memory of deep stacks versus the closed-form model."""

from leanpn import bench
from leanpn.memledger import analytic_memory

N, D, K = 1024, 64, 32

# closed form, in elements
for L in (1, 9, 18):
    base, lean = analytic_memory(L, N, D, K, bytes_per=1)
    print(f"L={L:2d}  baseline {base:>11,}  lean {lean:>10,}  ratio {base / lean:5.2f}")

# measured: run L stacked blocks forward and backward, read the ledger
rows = bench.mem_sweep(N, D, K, Ls=(2, 4, 8), extra_L=())
print()
print(" L  mode        measured MB   model MB   deviation")
for r in rows:
    print(f"{r.L:2d}  {r.mode:10s} {r.measured_peak / 2**20:10.1f} {r.model_peak / 2**20:10.1f} "
          f"{r.deviation:+10.1%}")

# bytes per extra layer
lean_slope, ref_slope = bench.slope(rows, "lean"), bench.slope(rows, "reference")
print(f"\nslope lean {lean_slope / 2**20:.2f} MB/layer, reference {ref_slope / 2**20:.2f} MB/layer "
      f"(ratio {ref_slope / lean_slope:.1f}, K = {K})")
