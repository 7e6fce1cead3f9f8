"""Worked-example tables transcribed by hand; the tests compare computed output against these."""

from __future__ import annotations

from fractions import Fraction as F

THIRD, TWO_THIRDS = F(1, 3), F(2, 3)

# eligibility regions per type and school, as printed (all one-dimensional)
ELIGIBILITY_TEXT = {
    "A": ["[0, 1/3)", "[1/3, 2/3)", "[2/3, 1]", "[0, 2/3)"],
    "B": ["[0, 1/3)", "[1/3, 2/3)", "[2/3, 1]", "[0, 1/3)"],
    "C": ["[0, 1/3)", "[1/3, 2/3)", "[2/3, 1]", "[0, 1]"],
}
ELIGIBILITY = {
    "A": [(0, THIRD), (THIRD, TWO_THIRDS), (TWO_THIRDS, 1), (0, TWO_THIRDS)],
    "B": [(0, THIRD), (THIRD, TWO_THIRDS), (TWO_THIRDS, 1), (0, THIRD)],
    "C": [(0, THIRD), (THIRD, TWO_THIRDS), (TWO_THIRDS, 1), (0, 1)],
}

# pairwise closure intersections; None is the empty set, a scalar is a single point
PAIRS = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]
CONTRASTS = {
    "A": [THIRD, None, (0, THIRD), TWO_THIRDS, (THIRD, TWO_THIRDS), TWO_THIRDS],
    "B": [THIRD, None, (0, THIRD), TWO_THIRDS, THIRD, None],
    "C": [THIRD, None, (0, THIRD), TWO_THIRDS, (THIRD, TWO_THIRDS), (TWO_THIRDS, 1)],
}

# local propensities, rows A, B, C and cells I..V
PSI = [
    [0.5, 0.5, 0.5, 0.75, 1.0],
    [0.5, 0.25, 0.0, 0.5, 1.0],
    [0.5, 0.5, 0.5, 0.75, 1.0],
]
