"""Sparsemax and temperature annealing, step by step.

Walks one architecture vector from a soft mixture to an exact one-hot
selection as the temperature drops, and contrasts sparsemax with softmax
on the way.

Run: python3 demos/01_sparsemax_annealing.py
"""

import numpy as np

from sparsenas.simplex import (AnnealSchedule, annealed_sparsemax,
                               softmax_tau, sparsemax)
from sparsenas.supernet import OP_NAMES

alpha = np.array([0.40, 0.10, 0.55, 0.25, -0.30])

print("architecture vector alpha:", alpha)
print()
print("softmax keeps every op alive, sparsemax zeroes the weak ones:")
print(f"  softmax  : {np.round(softmax_tau(alpha, 1.0), 4)}")
print(f"  sparsemax: {np.round(sparsemax(alpha), 4)}")
print()

sched = AnnealSchedule(tau0=1.5, factor=0.75, interval=5)
print("annealed sparsemax over the search (tau = 1.5 * 0.75^(n//5)):")
print(f"{'epoch':>6} {'tau':>8}  probabilities ({', '.join(OP_NAMES.values())})")
for epoch in range(0, 60, 5):
    p = annealed_sparsemax(alpha, sched, epoch)
    tau = sched.temperature_at(epoch)
    alive = int(np.count_nonzero(p))
    print(f"{epoch:>6} {tau:>8.4f}  {np.round(p, 4)}   ({alive} ops alive)")

print()
print("The support only ever shrinks: once an op's weight hits exactly")
print("zero it stays out, and a cold enough temperature leaves a single")
print("op -- the discrete architecture falls out of the relaxation.")
