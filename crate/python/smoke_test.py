"""Smoke test for the `akpz` extension module.

Build and install first:  pip install ./crates/python
"""
import math

import akpz

hc = akpz.DimerModel("honeycomb")
sq = akpz.DimerModel("square")

# z <-> slope round trip
z = hc.z_from_slope(0.3, 0.25)
rho = hc.slope_from_z(z)
assert abs(rho[0] - 0.3) < 1e-10 and abs(rho[1] - 0.25) < 1e-10, rho

# lozenge surface tension against the Lobachevsky closed form
lob = lambda p: akpz.lobachevsky(math.pi * p)
exact = -(lob(0.2) + lob(0.35) + lob(0.45)) / math.pi
assert abs(hc.sigma(0.2, 0.35) - exact) < 1e-10

# harmonic speeds never classify as isotropic
for model in (hc, sq):
    v = akpz.SpeedFunction("im-z", model)
    labels = {row[4] for row in v.akpz_map(resolution=20)}
    assert "ISOTROPIC" not in labels, labels
iso = akpz.SpeedFunction("quadratic:1,0,1", hc)
assert iso.classify(0.3, 0.3)[1] == "ISOTROPIC"

# a Burgers shape stays an equilibrium under the flow
run = akpz.run_preservation(grid=(33, 33))
assert run.max_el < 1e-3, run.max_el
print(run.trace_csv())

try:
    akpz.DimerModel("cubic")
except ValueError as e:
    print("rejected:", e)
else:
    raise AssertionError("cubic accepted")

print("smoke test ok")
