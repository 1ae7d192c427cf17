"""Reference implementations written independently of the package code.

Nothing here imports from ``pmco``; the tests compare package output
against these.
"""

from __future__ import annotations

import hashlib
import math
from fractions import Fraction

import numpy as np

MASK64 = (1 << 64) - 1


def benefit_terms(p: dict) -> dict:
    """Each energy term of the offloading benefit, evaluated in exact rationals.

    ``p`` uses the short symbol names: e_c, e_i, e_t, e_r, s_m, s_c,
    beta_u, beta_d, i, alpha, gamma.
    """
    q = {k: Fraction(v) for k, v in p.items()}
    return {
        "local": q["e_c"] * q["i"] / q["s_m"],
        "idle": q["e_i"] * q["i"] / q["s_c"],
        "tx": q["e_t"] * q["alpha"] / q["beta_u"],
        "rx": q["e_r"] * q["gamma"] / q["beta_d"],
    }


def benefit(p: dict) -> float:
    """Exact value of the benefit, correctly rounded once.

    Same rationals as :func:`benefit_terms` but put over one integer
    denominator without gcd reductions, which keeps 1e4 evaluations cheap.
    """
    r = {k: float(v).as_integer_ratio() for k, v in p.items()}

    def term(a, b, c):  # a * b / c as (numerator, denominator)
        (an, ad), (bn, bd), (cn, cd) = r[a], r[b], r[c]
        return an * bn * cd, ad * bd * cn

    terms = [term("e_c", "i", "s_m"), term("e_i", "i", "s_c"),
             term("e_t", "alpha", "beta_u"), term("e_r", "gamma", "beta_d")]
    den = 1
    for _, d in terms:
        den *= d
    num = 0
    for k, (n, d) in enumerate(terms):
        num += (n if k == 0 else -n) * (den // d)
    return num / den  # int / int true division rounds correctly


def process_benefit(local, ckpt, restart, tx, rx) -> float:
    return math.fsum([local, -ckpt, -restart, -tx, -rx])


def lcg_stream(seed: int, count: int) -> list[float]:
    s = seed & MASK64
    out = []
    for _ in range(count):
        s = (s * 6364136223846793005 + 1442695040888963407) & MASK64
        out.append((s >> 11) / float(1 << 53))
    return out


def matrices(n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    vals = np.array(lcg_stream(seed, 2 * n * n), dtype=np.float64)
    return vals[: n * n].reshape(n, n), vals[n * n:].reshape(n, n)


def naive_product(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Product accumulated in ascending k with one rounding per multiply and add."""
    c = np.zeros((a.shape[0], b.shape[1]))
    for k in range(a.shape[1]):
        c = c + np.outer(a[:, k], b[k, :])
    return c


def product_digest(n: int, seed: int) -> bytes:
    a, b = matrices(n, seed)
    c = naive_product(a, b)
    return hashlib.sha256(c.astype("<f8").tobytes()).digest()


def logistic(x: float, steps: int) -> float:
    for _ in range(steps):
        x = 3.99 * x * (1.0 - x)
    return x
