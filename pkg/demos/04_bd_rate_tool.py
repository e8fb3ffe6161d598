"""The Bjontegaard delta-rate tool on closed-form fixtures.

BD-rate answers "how much more rate does codec B spend than codec A at equal
quality", integrating the gap between piecewise-cubic fits of log-rate vs
quality over the overlapping quality range. Three fixtures with known
answers: identical curves (0%), doubled rate (+100%), and a 1.5x rate shift
sampled on staggered quality grids (+50%, exercising the interpolator).

Run:  python3 demos/04_bd_rate_tool.py
"""

import math

import numpy as np

from tsic import RdCurve, bd_rate

base_q = np.array([30.0, 33.0, 36.0, 39.0])
base_r = np.array([0.1, 0.2, 0.4, 0.8])
base = RdCurve(tuple(zip(base_r, base_q)))

print("== identical curves ==")
print(f"bd_rate(A, A) = {bd_rate(base, base):+.4f}%   (exactly zero)")

print("\n== doubled rate at every quality ==")
doubled = RdCurve(tuple(zip(2 * base_r, base_q)))
print(f"bd_rate(A, 2A) = {bd_rate(base, doubled):+.4f}%   (oracle: +100%)")
print(f"bd_rate(2A, A) = {bd_rate(doubled, base):+.4f}%   (sign flips, magnitude differs)")

print("\n== closed-form 1.5x shift on staggered quality samples ==")


def rate_of_quality(q):
    return math.exp(0.21 * q + 0.004 * q * q - 7.0)


qs_base = np.array([26.0, 30.0, 34.0, 38.0])
qs_test = np.array([27.0, 31.0, 35.0, 37.5])
curve_a = RdCurve(tuple((rate_of_quality(q), q) for q in qs_base))
curve_b = RdCurve(tuple((1.5 * rate_of_quality(q), q) for q in qs_test))
print(f"measured: {bd_rate(curve_a, curve_b):+.3f}%   (oracle: +50%, tolerance 0.5%)")

print("\n== lower-is-better quality axes work unchanged ==")
perc = np.array([0.30, 0.20, 0.12, 0.07])  # e.g. a perceptual distance
pa = RdCurve(tuple(zip(base_r, perc)))
pb = RdCurve(tuple(zip(1.3 * base_r, perc)))
print(f"perceptual-axis example: {bd_rate(pa, pb):+.2f}%  (oracle: +30%)")
