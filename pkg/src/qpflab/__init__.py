"""Classical, quantum and hybrid neural-network surrogates for AC power flow.

Modules: ``gridmodel`` (network model and Newton-Raphson), ``datagen`` (load
scenarios and labels), ``qsim`` (statevector/density-matrix simulator),
``neural`` (MLP, backprop, AdamW), ``surrogates`` (scikit-learn style LR/NN,
QNN and QCNN regressors) and ``benchcli`` (seeded experiment runner).
"""

from .datagen import LabeledDataset, corrupt, draw_and_label, generate_pool
from .gridmodel import GridCase, PowerFlowSolution, builtin_grid, load_grid, solve_newton_raphson
from .surrogates import NNRegressor, QCNNRegressor, QNNRegressor, make_model, train

__version__ = "0.1.0"

__all__ = [
    "GridCase",
    "PowerFlowSolution",
    "LabeledDataset",
    "NNRegressor",
    "QNNRegressor",
    "QCNNRegressor",
    "builtin_grid",
    "load_grid",
    "solve_newton_raphson",
    "generate_pool",
    "draw_and_label",
    "corrupt",
    "make_model",
    "train",
]
