"""Independent reference implementations the tests compare the package against.

Nothing here imports from the package's numeric code paths. The smoother
weights come from exact rational least squares, the filter from a closed-form
information accumulation, and alignment from a linear scan. If an
implementation and its oracle agree, a shared bug is far less likely since
they take entirely different routes to the answer.
"""

from __future__ import annotations

from fractions import Fraction


def _solve_exact(a: list[list[Fraction]], b: list[Fraction]) -> list[Fraction]:
    """Gaussian elimination over Fractions; a must be square and nonsingular."""
    n = len(a)
    m = [row[:] + [b[i]] for i, row in enumerate(a)]
    for col in range(n):
        pivot = next(r for r in range(col, n) if m[r][col] != 0)
        m[col], m[pivot] = m[pivot], m[col]
        inv = Fraction(1, 1) / m[col][col]
        m[col] = [x * inv for x in m[col]]
        for r in range(n):
            if r != col and m[r][col] != 0:
                factor = m[r][col]
                m[r] = [x - factor * y for x, y in zip(m[r], m[col])]
    return [m[r][n] for r in range(n)]


def smoothing_weights_exact(window: int, order: int) -> list[Fraction]:
    """Center-point least-squares polynomial smoother weights, exactly.

    For each unit-impulse input e_j over abscissae -h..h, fit the degree-order
    polynomial by solving the normal equations in rational arithmetic and
    evaluate the fit at 0. The resulting w_j are the smoother weights.
    """
    h = (window - 1) // 2
    xs = [Fraction(i) for i in range(-h, h + 1)]
    design = [[x**k for k in range(order + 1)] for x in xs]
    normal = [
        [sum(design[i][a] * design[i][b] for i in range(window)) for b in range(order + 1)]
        for a in range(order + 1)
    ]
    weights = []
    for j in range(window):
        rhs = [design[j][a] for a in range(order + 1)]  # A^T e_j
        coeffs = _solve_exact(normal, rhs)
        weights.append(coeffs[0])  # polynomial value at x = 0
    return weights


def constant_state_estimate(
    x0: float, p0: float, r: float, measurements: list[float]
) -> float:
    """Estimate after n noisy measurements of a constant, no process noise.

    Information form: precisions add, precision-weighted means add. Equals the
    recursive filter with q = 0 but shares none of its code or algebra.
    """
    info = 1.0 / p0
    weighted = x0 / p0
    for z in measurements:
        info += 1.0 / r
        weighted += z / r
    return weighted / info


def align_scan(ref_t: int, candidates: list[int], tolerance: int, strategy: str):
    """Pick the index pairing a reference instant by brute-force linear scan.

    nearest: minimal |t - ref_t| within tolerance, earlier sample on ties.
    last_before: greatest t <= ref_t within tolerance.
    Returns None when nothing qualifies.
    """
    best = None
    for i, t in enumerate(candidates):
        if strategy == "nearest":
            d = abs(t - ref_t)
            if d > tolerance:
                continue
            if best is None or d < abs(candidates[best] - ref_t):
                best = i
        else:  # last_before
            if t > ref_t or ref_t - t > tolerance:
                continue
            if best is None or t > candidates[best]:
                best = i
    return best
