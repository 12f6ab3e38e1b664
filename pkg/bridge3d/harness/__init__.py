from .ablations import ablate_feature_source, ablate_timestep
from .controllability import run_controllability
from .gradsuite import run_gradcheck_suite

__all__ = ["ablate_feature_source", "ablate_timestep", "run_controllability", "run_gradcheck_suite"]
