"""Back-of-envelope resolution bounds for a spin-identification experiment.

Given the coupling range to resolve, the calculator reports the resonance
order, delay count, repetition count, and total-time floors implied by the
Rayleigh criterion, plus the actual dip positions of an example spin.
"""

import numpy as np

from vbi.simulator import (BoundsInput, omega_larmor, rayleigh_bounds,
                           resonance_delays, total_measurement_time)

omega_l = 2.7  # angular MHz, i.e. a 0.43 MHz precession
bounds = rayleigh_bounds(BoundsInput(max_aperp=0.5, min_aperp=0.05,
                                     min_delta_az=1e-3, omega_l=omega_l, n_pi=32))
print(f"resonance order to split a 1 kHz pair: m_min = {bounds.m_min:.0f}")
print(f"distinct delays needed:               M_min = {bounds.big_m_min:.0f}")
print(f"repetitions per delay (formula):      R_min = {bounds.r_min:.1f}")
print(f"total-time floor:                     T_min = {bounds.t_min_s:.2f} s")

print("\ndip positions of a spin with A_z = 0.05 (angular MHz), B = 403 G:")
wl = omega_larmor(403.0)
for m in (1, 2, 6, 7):
    tau = resonance_delays(m, 0.05, wl)
    print(f"  m = {m}: tau = {float(tau):.3f} us")

taus = np.linspace(6.0, 8.5, 512)
t_tot = total_measurement_time(taus, repetitions=1024, n_pi=32)
print(f"\na 512-point scan of [6, 8.5] us at R = 1024, N_pi = 32 "
      f"costs {t_tot / 60:.2f} minutes")
