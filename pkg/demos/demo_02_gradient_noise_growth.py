"""How partition count trades sensing diversity against gradient noise.

With the total sample budget fixed, more partitions mean fewer samples per
block, and the gradient of the partitioned objective accumulates a larger
structured error relative to the single-partition reference.  This script
measures that growth and the near-Gaussian shape of the error entries.
"""

import numpy as np

from covdiff import (
    CovarianceSpec,
    ObjectiveConfig,
    SensingConfig,
    clean_gradient,
    draw_projections,
    gradient,
    gradient_error,
    make_partitions,
    measure_dataset,
    sample_gaussian_data,
    synth_covariance,
)
from covdiff.sensing import single_projection

l, m, n, sigma_n = 16, 6, 2048, 0.01
sigma_true = synth_covariance(CovarianceSpec(kind="toeplitz", l=l, rho=0.9))
cfg = ObjectiveConfig()

print(f"fixed budget n={n}; gradient error vs partition count (20 seeds):")
for p in (4, 16, 64, 256):
    norms = []
    for seed in range(20):
        x = sample_gaussian_data(sigma_true, n, seed=seed)
        plan = make_partitions(n, p, seed=seed)
        ens = draw_projections(SensingConfig(l=l, m=m, p=p, sigma_n=sigma_n), seed)
        meas = measure_dataset(x, plan, ens, sigma_n, seed)
        g_noisy = gradient(sigma_true, meas, ens, cfg)
        sp = single_projection(l, m, seed)
        g_clean = clean_gradient(sigma_true, x, sp, cfg, sigma_n, seed)
        norms.append(np.linalg.norm(gradient_error(g_noisy, g_clean)))
    print(f"  p={p:4d} (b={n // p:5d}): mean ||error||_F = {np.mean(norms):9.2f}")

# Entrywise shape of the standardized error at the top partition count
p = 256
errors = []
for seed in range(150):
    x = sample_gaussian_data(sigma_true, n, seed=1000 + seed)
    plan = make_partitions(n, p, seed=seed)
    ens = draw_projections(SensingConfig(l=l, m=m, p=p, sigma_n=sigma_n), seed)
    meas = measure_dataset(x, plan, ens, sigma_n, seed)
    g_noisy = gradient(sigma_true, meas, ens, cfg)
    sp = single_projection(l, m, seed)
    g_clean = clean_gradient(sigma_true, x, sp, cfg, sigma_n, seed)
    errors.append(gradient_error(g_noisy, g_clean))
stack = np.stack(errors)
z = (stack - stack.mean(axis=0)) / stack.std(axis=0)
flat = z.ravel()
skew = np.mean(flat**3)
kurt = np.mean(flat**4) - 3.0
print(f"standardized error entries at p={p}: skew={skew:+.3f}, "
      f"excess kurtosis={kurt:+.3f} (near zero = near Gaussian)")
