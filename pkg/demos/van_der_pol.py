"""Van der Pol oscillator from noisy samples.

Generates one noise realisation, runs the full (lambda, R) grid with
adaptive pruning in every cell and prints the winning model next to the
ground truth.  Pass a noise fraction and seed on the command line, e.g.
``python demos/van_der_pol.py 0.1 3``.  The default grid takes a few
minutes on one core.
"""
import sys

from hybrid_discovery.harness import DiscoveryConfig, NoiseSpec, run_single, van_der_pol
from hybrid_discovery.library import format_equations

noise = float(sys.argv[1]) if len(sys.argv) > 1 else 0.1
seed = int(sys.argv[2]) if len(sys.argv) > 2 else 0

system = van_der_pol()
rec, disc = run_single(system, NoiseSpec(noise, seed), DiscoveryConfig())
if disc is None:
    sys.exit(f"discovery failed: {rec.error}")

lib = disc.lib
print("truth:")
for line in format_equations(system.true_coefficients(lib), lib, ["x", "y"]):
    print("   ", line)
print(f"discovered (lambda={rec.lam:g}, R={rec.R:g}):")
for line in rec.equations:
    print("   ", line)
print(f"RE(theta)={rec.re_theta:.3g}  RE(u)={rec.re_u:.3g}  TPR={rec.tpr:.3g}  ({rec.wall_time:.0f}s)")

# the five best cells by validation error
print("\nrank  lambda      R  val.err  terms")
for i, cell in enumerate(disc.cells[:5], 1):
    n = cell.result.coeffs.n_active if cell.result else "-"
    print(f"{i:4d}  {cell.lam:6g}  {cell.R:6g}  {cell.validation_error:7.3g}  {n}")
