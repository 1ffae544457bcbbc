"""Central-difference gradient checking.

The closure under test is evaluated in float64 so the 1e-4 tolerances used by
the suite are meaningful against truncation error.
"""

import numpy as np

from .rng import Rng


def grad_check(fn, inputs, eps=1e-3, max_checks_per_input=None, seed=0):
    """Max relative error between analytic and central-difference gradients.

    fn(*inputs) must return (loss, grads) with one gradient array per input.
    Error per coordinate is |analytic - cd| / max(|analytic|, |cd|, 1e-8);
    with max_checks_per_input set, a seeded random subset of coordinates is
    probed per input (for large closures).
    """
    inputs = [np.array(x, dtype=np.float64) for x in inputs]
    _, grads = fn(*inputs)
    if len(grads) != len(inputs):
        raise ValueError(f"grad_check: fn returned {len(grads)} grads for {len(inputs)} inputs")
    rng = Rng(seed)
    worst = 0.0
    for x, g in zip(inputs, grads):
        flat = x.reshape(-1)
        gflat = np.asarray(g, dtype=np.float64).reshape(-1)
        if gflat.shape != flat.shape:
            raise ValueError("grad_check: gradient shape mismatch")
        if max_checks_per_input is not None and flat.size > max_checks_per_input:
            coords = rng.choose_without_replacement(np.arange(flat.size), max_checks_per_input)
        else:
            coords = np.arange(flat.size)
        for i in coords:
            keep = flat[i]
            flat[i] = keep + eps
            lp, _ = fn(*inputs)
            flat[i] = keep - eps
            lm, _ = fn(*inputs)
            flat[i] = keep
            cd = (lp - lm) / (2.0 * eps)
            a = gflat[i]
            rel = abs(a - cd) / max(abs(a), abs(cd), 1e-8)
            if rel > worst:
                worst = rel
    return worst
