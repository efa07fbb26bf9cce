"""Moving-window (MoW) training for latent distribution-matching autoencoders."""
from .autodiff import ParamVector, backward, evaluate, finite_diff_gradient
from .autoencoder import CostConfig, NetSpec, batch_cost, classical_cost, decode, encode, init_params
from .data import DataQueue, Dataset, load_idx, make_synthetic
from .distances import DistanceSpec, cramer_wold_mc, mmd_imq, sample_unit_directions, sliced_wasserstein
from .optimizer import MowConfig, MowState, mow_init, mow_step, run_training

__version__ = "0.1.0"
