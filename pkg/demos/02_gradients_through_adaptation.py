"""
Differentiating through the inner loop
======================================

The meta-learner updates its parameters with the gradient of the query loss
*after* K steps of SGD on the support set.  That gradient passes through every
SGD step, so it involves second derivatives.  Here the tape is checked against
central differences, first on a scalar toy problem and then on the full model.
"""
import numpy as np

from covmeta import autodiff as ad
from covmeta import experiment as ex
from covmeta.autodiff import Tape

# Toy problem: one parameter, loss 1/2 (w x - y)^2 on the support point, two
# SGD steps, then the same loss on a query point.
xs, ys, xq, yq, lr = 1.5, 2.0, -0.5, 1.0, 0.1


def adapted_query_loss(w0, first_order=False):
    w = w0
    for _ in range(2):
        (g,) = ad.grad(ad.mul(ad.square(ad.sub(ad.mul(w, xs), ys)), 0.5), [w], create_graph=not first_order)
        w = ad.sub(w, ad.mul(g, lr))
    return ad.mul(ad.square(ad.sub(ad.mul(w, xq), yq)), 0.5)


for first_order in (False, True):
    with Tape(higher_order=True) as t:
        w0 = t.variable(0.3)
        (d,) = t.backward(adapted_query_loss(w0, first_order), [w0])
    print(f"{'first-order' if first_order else 'exact':>11}: d loss / d w0 = {float(ad.value_of(d)):.10f}")


def query_loss_value(w):
    # the inner SGD steps need a tape of their own to see w as a variable
    with Tape(higher_order=True) as t:
        return float(ad.value_of(adapted_query_loss(t.variable(w[0]))))


fd = ad.finite_difference_grad(query_loss_value, np.array([0.3]))
print(f"{'central FD':>11}: d loss / d w0 = {fd[0]:.10f}")

# The first-order variant ignores how the inner gradient itself depends on w0,
# which here scales the true gradient by (1 - lr xs^2)^2.
print("\nfactor dropped by first-order:", (1 - lr * xs ** 2) ** 2)

# The same check on the real objective, one parameter group at a time, for a
# miniature network so the finite differences stay cheap.
print()
print(ex.format_gradcheck(ex.gradcheck_battery(inner_steps=3, first_order=True)))
