"""Pure-numpy evaluation core (fallback when the compiled extension is absent).

Semantics must match gellab._core exactly; tests compare the two backends
bit-for-bit on random piecewise-cubic data.
"""
from __future__ import annotations

import numpy as np


def ppoly_eval(t, c0, c1, c2, c3, q, nd=0):
    """Evaluate a piecewise cubic (breakpoints t, per-interval coefficients
    c0..c3 in the local variable s = q - t[j]) at query points q.

    Returns y, or (y, dy), or (y, dy, d2y) for nd = 0, 1, 2 — derivatives
    taken with respect to the q coordinate.  Queries outside [t[0], t[-1]]
    are clamped to the edge intervals (callers mask them beforehand).
    """
    t = np.asarray(t)
    q = np.asarray(q)
    j = np.clip(np.searchsorted(t, q, side="right") - 1, 0, t.size - 2)
    s = q - t[j]
    a0 = c0[j]
    a1 = c1[j]
    a2 = c2[j]
    a3 = c3[j]
    y = a0 + s * (a1 + s * (a2 + s * a3))
    if nd == 0:
        return y
    dy = a1 + s * (2.0 * a2 + 3.0 * s * a3)
    if nd == 1:
        return y, dy
    d2y = 2.0 * a2 + 6.0 * s * a3
    return y, dy, d2y
