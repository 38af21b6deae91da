"""Independent reference model for the probability rules, used by tests only.

Deliberately written differently from the library: the per-leaf load is
recounted from scratch after every access, and the ratio search compares
probabilities directly instead of factor counts.
"""

from collections import Counter
from fractions import Fraction
from itertools import product


def prob(real, observed, N, p, capacity):
    p1 = 1 - p
    p2 = p / (N - 1)
    last = {}
    total = Fraction(1)
    for element, leaf in zip(real, observed):
        if element not in last:
            total *= Fraction(1, N)
        elif last[element] == leaf:
            total *= p1
        else:
            total *= p2
        last[element] = leaf
        if max(Counter(last.values()).values()) > capacity:
            return Fraction(0)
    return total


def max_ratio(N, p, M, elements, capacity):
    """Return (best ratio, list of maximising (r1, r2, o))."""
    reals = list(product(range(elements), repeat=M))
    outs = list(product(range(N), repeat=M))
    table = {(r, o): prob(r, o, N, p, capacity) for r in reals for o in outs}
    best, arg = Fraction(0), []
    for r1 in reals:
        for i in range(M):
            for e in range(elements):
                if e == r1[i]:
                    continue
                r2 = r1[:i] + (e,) + r1[i + 1:]
                for o in outs:
                    a, b = table[r1, o], table[r2, o]
                    if a and b:
                        ratio = a / b
                        if ratio > best:
                            best, arg = ratio, [(r1, r2, o)]
                        elif ratio == best:
                            arg.append((r1, r2, o))
    return best, arg


def preimage_sizes(N, p, M, elements, capacity):
    """|{inputs r : Pr[r -> o] > 0}| for every output o that some input can produce."""
    reals = list(product(range(elements), repeat=M))
    sizes = {}
    for o in product(range(N), repeat=M):
        n = sum(1 for r in reals if prob(r, o, N, p, capacity) > 0)
        if n:
            sizes[o] = n
    return sizes
