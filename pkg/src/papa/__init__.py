"""Population parameter averaging (PAPA) on a small numpy network engine."""

from .nn import (
    AvgPool,
    BatchNorm,
    Conv2D,
    Dense,
    Flatten,
    Network,
    ReLU,
    backward,
    build_network,
    extract_activations,
    forward,
    get_params,
    loss_softmax_ce,
    set_params,
)
from .population import (
    PapaConfig,
    Population,
    average_replace,
    mutate,
    papa_pull,
    population_mean,
    should_average,
)
from .repair import RepairPlan, attach_observers, collect_weighted_stats, repair, reset_batchnorm
from .soups import average_soup, ensemble_logits, evaluate_accuracy, greedy_soup

__version__ = "0.1.0"

__all__ = [
    "AvgPool",
    "BatchNorm",
    "Conv2D",
    "Dense",
    "Flatten",
    "Network",
    "ReLU",
    "backward",
    "build_network",
    "extract_activations",
    "forward",
    "get_params",
    "loss_softmax_ce",
    "set_params",
    "PapaConfig",
    "Population",
    "average_replace",
    "mutate",
    "papa_pull",
    "population_mean",
    "should_average",
    "RepairPlan",
    "attach_observers",
    "collect_weighted_stats",
    "repair",
    "reset_batchnorm",
    "average_soup",
    "ensemble_logits",
    "evaluate_accuracy",
    "greedy_soup",
]
