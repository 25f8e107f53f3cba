"""fedsim: a deterministic federated-learning simulator.

Typical use::

    from fedsim import FederationConfig, gen_quadratic_clients, run_federation

    data = gen_quadratic_clients((1, 3), (0, 1))
    cfg = FederationConfig(rounds=200, local_epochs=2, strategy="scaffold")
    state, records = run_federation(cfg, data)
"""

from .datagen import (
    ClientDataset,
    FederatedDataset,
    gen_concept_shift_regression,
    gen_label_skew_classification,
    gen_quadratic_clients,
    gen_sine_clients,
    load_csv_partition,
    quadratic_fedavg_fixed_point,
)
from .engine import (
    ClientState,
    FederationConfig,
    RoundRecord,
    StrategyState,
    communication_accounting,
    run_federation,
    select_clients,
)
from .errors import ConfigError, DataError, DivergenceError, DomainError, FedSimError, StructuralError
from .estimator import FederatedClassifier, FederatedRegressor
from .models import Batch, ModelSpec, fisher_diag, gradient, hvp, init_params, loss
from .params import LayerLayout, ParamVector, cosine_similarity, merge, split, weighted_average
from .rng import rng_substream
from .strategies import REGISTRY, build_strategy, strategy_names

__version__ = "0.1.0"

__all__ = [
    "Batch", "ClientDataset", "ClientState", "ConfigError", "DataError", "DivergenceError", "DomainError",
    "FedSimError", "FederatedClassifier", "FederatedDataset", "FederatedRegressor", "FederationConfig",
    "LayerLayout", "ModelSpec", "ParamVector", "REGISTRY", "RoundRecord", "StrategyState", "StructuralError",
    "build_strategy", "communication_accounting", "cosine_similarity", "fisher_diag", "gen_concept_shift_regression",
    "gen_label_skew_classification", "gen_quadratic_clients", "gen_sine_clients", "gradient", "hvp", "init_params",
    "load_csv_partition", "loss", "merge", "quadratic_fedavg_fixed_point", "rng_substream", "run_federation",
    "select_clients", "split", "strategy_names", "weighted_average",
]
