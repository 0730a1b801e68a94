"""Small area estimation under the nested error regression model.

Hierarchical Bayes (normal and normal-mixture errors), robust EBLUP,
M-quantile estimation and a design-based simulation harness.
"""
from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("nersae")
except PackageNotFoundError:  # pragma: no cover
    __version__ = "0.0.0"

from .data import SurveyDataset, load_corn, load_dataset, save_dataset
from .hb import GibbsConfig, run_chain, summarize
from .mquantile import fit_mq_sae
from .reblup import HuberPsi, bootstrap_mse, fit_reblup

__all__ = [
    "__version__",
    "SurveyDataset",
    "load_corn",
    "load_dataset",
    "save_dataset",
    "GibbsConfig",
    "run_chain",
    "summarize",
    "HuberPsi",
    "fit_reblup",
    "bootstrap_mse",
    "fit_mq_sae",
]
