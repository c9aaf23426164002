"""Two-part finite-mixture quantile regression for semi-continuous panel data."""
from importlib.resources import files

from .almath import (QuantileConfig, al_log_density, check_loss, gig_inverse_moment,
                     sample_al)
from .data import DataValidationError, PanelDataset, PreparedData, UnitRecord, prepare, zero_fraction
from .em import (FitError, FitOptions, FitResult, MixtureParams, NumericalError,
                 PosteriorState, e_step, fit, m_step_binary, m_step_positive,
                 m_step_scale_and_masses, observed_loglik)
from .inference import BootstrapResult, SelectionTable, bootstrap_se, select_model, simulate
from .penalized import (PenaltyConfig, cross_validate_lambda, fit_penalized, lambda_max,
                        penalized_m_step_positive)

__version__ = "0.1.0"


def demo_data_path():
    """Path of the bundled demo panel (simulated, two components)."""
    return files("tpmixqr") / "demo" / "demo_panel.csv"
