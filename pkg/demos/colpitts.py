"""Colpitts oscillator with an unknown rate inside exp(a*x).

The states are standardised before fitting and the coefficients (and
the rate ``a``) are mapped back to the original units.  The inner rate
is exempt from the sparsity penalty.  Slow: the full grid on three
states with 33 candidate coefficients takes a while on one core.
"""
import sys

from hybrid_discovery.harness import DiscoveryConfig, NoiseSpec, colpitts, run_single

noise = float(sys.argv[1]) if len(sys.argv) > 1 else 0.5
seed = int(sys.argv[2]) if len(sys.argv) > 2 else 0
rec, disc = run_single(colpitts(), NoiseSpec(noise, seed), DiscoveryConfig())
if disc is None:
    sys.exit(f"discovery failed: {rec.error}")
print("\n".join(rec.equations))
print(f"a = {disc.coeffs.inner[0]:.4f}   TPR={rec.tpr:.3g}  RE(theta)={rec.re_theta:.3g}")
