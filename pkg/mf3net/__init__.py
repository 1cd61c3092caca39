"""三层网络均场极限模拟包

有限宽度网络的单样本 SGD、其均场极限的粒子 ODE、两者的耦合过程，以及宽度/步长扫描与全局收敛实验。
"""

from .errors import (
    AcceptanceError,
    AssumptionViolation,
    ConfigError,
    ExitCode,
    Mf3netError,
    NumericError,
)
from .math_core import ModelSpec, build_model, default_model, huber_loss, validate_regularity
from .data import DataSpec, DataStream, expect, make_grid_task, next_sample
from .models import NetworkParams, ParticleSystem
from .finite_net import backward, forward, sgd_step, train
from .mf_system import drift, euler_evolve, picard_solve, reduced_evolve
from .neuronal_embedding import IIDEmbedding, Law, couple, run_coupled, sample_embedding
from .metrics import coupling_distance, stationarity_monitor, sup_norms, w1_lipschitz_diagnostic
from .config import ExperimentConfig, TaskKind, load_config
from .harness import convergence_run, crossval, run_task, sweep_eps, sweep_n

__version__ = "0.1.0"
