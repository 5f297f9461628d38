"""iPSC metabolic-network emulator."""

from .layout import INDEX, METABOLITES, REACTION_NAMES, SPECIES, STATE_DIM, default_stoichiometry, read_stoichiometry
from .model import (
    IPSCModel, IPSCReward, apply_medium_exchange, flux_mape, flux_rates, growth_rate, mean_transition,
    reward, sample_transition,
)
from .params import (
    CASE_STUDIES, PARAM_NAMES, GrowthConstants, KineticConfig, KineticParams, RewardConstants, case_mask,
    load_kinetic_config,
)

__all__ = [
    "INDEX", "METABOLITES", "REACTION_NAMES", "SPECIES", "STATE_DIM", "default_stoichiometry",
    "read_stoichiometry", "IPSCModel", "IPSCReward", "apply_medium_exchange", "flux_mape", "flux_rates",
    "growth_rate", "mean_transition", "reward", "sample_transition", "CASE_STUDIES", "PARAM_NAMES",
    "GrowthConstants", "KineticConfig", "KineticParams", "RewardConstants", "case_mask", "load_kinetic_config",
]
