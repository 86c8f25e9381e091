"""
Tuning the mixing exponents with Nelder-Mead
============================================

The exponents are searched inside the box [-5, 5] to maximize the mean
tumour-delineation AUC over a cohort. A coarse grid over the same box is
used here as a sanity check.
"""

import numpy as np

from cdisopt import CdisConfig, PhantomSpec, SimplexOptions, cohort_mean_auc, generate_phantom
from cdisopt.metrics import PreparedCohort
from cdisopt.simplex import optimize_cdis_coefficients

cohort = generate_phantom(PhantomSpec(dims=(32, 32, 10), n_patients=4, noise_sigma=0.08,
                                      tumor_s0=0.7, radius_range=(3.0, 4.5), seed=11))
base = CdisConfig(native_b=(0.0, 800.0))
print("unit-exponent mean AUC: %.4f" % cohort_mean_auc(cohort.patients, base))

best, result = optimize_cdis_coefficients(cohort, base, SimplexOptions(max_evals=500))
print("optimized exponents:", np.round(best.exponents, 3))
print("optimized mean AUC:     %.4f after %d evaluations (%s)"
      % (-result.best_f, result.evals, result.termination.value))

###############################################################################
# Best-so-far trace (minimization of -AUC)
for i, f in result.trace[:10]:
    print(f"  eval {i:4d}  mean AUC {-f:.5f}")

###############################################################################
# Coarse grid check (step 0.5 keeps this quick)
prepared = PreparedCohort(cohort.patients, base)
grid = np.arange(-5, 5.01, 0.5)
best_grid = max((prepared.mean_auc((a, b)), a, b) for a in grid for b in grid)
print("grid optimum: AUC %.4f at (%g, %g)" % best_grid)

###############################################################################
# The tuned config is plain JSON
print(best.to_json())
