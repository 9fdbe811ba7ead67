"""Space-continuous forecasting of PDE trajectories: a modulated Fourier-feature decoder
driven by a latent ODE, trained jointly on sampled observations."""

from .decoder import decode, decode_backward, decoder_init, spectral_support
from .dynamics import encode, rk4_unroll, rk4_unroll_backward
from .evaluation import forecast, mse_split, run_task_matrix
from .pde_data import dataset_generate, load_dataset, ns_solve, save_dataset, wave_solve
from .training import init_state, load_checkpoint, save_checkpoint, train_epoch

__version__ = "0.1.0"
