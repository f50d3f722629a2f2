"""
A tour of the regression benchmark
==================================

Every task is a small regression problem.  Its covariates come from one of P
Gaussian modes, and its response comes from a hypothesis family.  In the
dependent case the mode decides the family; in the independent case the
family is drawn separately.  This script builds both kinds of
meta-distribution and shows the difference.
"""
import numpy as np

from covmeta import taskgen as T

# The modes (mu, sigma) and Dirichlet weights are fixed by a seed.
md = T.build_meta_distribution("sine-quad-linear", "dependent", seed=0)
for p, (mode, w) in enumerate(zip(md.modes, md.weights)):
    print(f"mode {p}: x ~ N({mode.mu:6.2f}, {mode.sigma:5.2f}^2)  weight {w:.3f}  family {md.family_for_mode(p)}")

# Tasks are a pure function of (seed, index), so any single task can be
# regenerated without building the whole dataset.
task = T.task_at(md, seed=42, index=3)
print("\ntask 3:", task.hypothesis)
print("support x", np.round(task.support_x, 2))
print("support y", np.round(task.support_y, 2))
assert T.task_at(md, 42, 3) == task


def family_table(md, n=20_000):
    counts = np.zeros((md.P, len(T.FAMILIES)), int)
    for i in range(n):
        t = T.task_at(md, 1, i)
        counts[t.mode, T.FAMILY_CODE[t.hypothesis.family]] += 1
    return counts


# In the dependent case each row has a single non-zero column...
print("\nmode x family counts, dependent")
print(family_table(md)[:, :3])

# ...and in the independent case the rows look alike.
ind = T.build_meta_distribution("sine-quad-linear", "independent", seed=0)
print("\nmode x family counts, independent")
print(family_table(ind)[:, :3])

# The sine variant keeps one family but splits its parameter ranges, so the
# mode still tells you roughly which amplitude, frequency and phase to expect.
for p in range(1, 4):
    (a_lo, a_hi), (w_lo, w_hi), _ = T.sine_partition(p, 3)
    print(f"sine mode {p - 1}: amplitude [{a_lo:.2f}, {a_hi:.2f}]  frequency [{w_lo:.2f}, {w_hi:.2f}]")
