"""Activation floats held on the tape for one MoW step, k = 1, as n grows."""

from mow import CostConfig, NetSpec, init_params
from mow.autoencoder import batch_cost
from mow.data import philox
from mow.distances import DistanceSpec

spec = NetSpec(64, 8, ((200, "relu"),) * 3, ((200, "relu"),) * 2)
cfg = CostConfig(distance=DistanceSpec("mmd_imq"))
theta = init_params(spec, philox(0, 0))
rng = philox(0, 9)

print(f"{'n':>5} {'network':>9} {'buffer':>7} {'distance':>9}")
for n in (8, 64, 512):
    x = rng.random((1, 64))
    frozen = rng.standard_normal((n - 1, spec.latent_dim))
    prior = rng.standard_normal((n, spec.latent_dim))
    res = batch_cost(theta, spec, cfg, x, frozen, prior, None)
    floats = res.tape.floats_by_scope()
    print(f"{n:>5} {floats.get('network', 0):>9} {floats.get('buffer', 0):>7} {floats.get('distance', 0):>9}")
