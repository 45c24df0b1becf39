"""What the grid search finds when the library cannot express the truth.

Van der Pol needs the cubic x^2*y term; with a degree-2 library each
(lambda, R) cell settles on some other structure.  The table lists the
distinct structures and the best validation rank at which each appears.
"""
from hybrid_discovery.harness import DiscoveryConfig, NoiseSpec, run_single, van_der_pol
from hybrid_discovery.library import rescale_coefficients, format_equations

system = van_der_pol().with_sampling(0.04, 201)
rec, disc = run_single(system, NoiseSpec(0.1, 0), DiscoveryConfig(), max_degree=2)
seen = {}
for rank, cell in enumerate(disc.cells, 1):
    if cell.result is None:
        continue
    key = cell.result.coeffs.mask.tobytes()
    seen.setdefault(key, []).append((rank, cell))

for cells in sorted(seen.values(), key=lambda c: c[0][0]):
    rank, cell = cells[0]
    coeffs = rescale_coefficients(cell.result.coeffs, disc.lib)
    lams = sorted({c.lam for _, c in cells})
    print(f"best rank {rank}, {len(cells)} cells, lambda in {lams}")
    for line in format_equations(coeffs, disc.lib, ["x", "y"], 3):
        print("   ", line)
