"""scikit-learn style wrappers around the golden model and the simulator.

Both transformers map an activation matrix ``X [L, d_model]`` to the
block output of the same shape. ``fit`` builds weights (and, for the
simulator, lowers the program for ``L = X.shape[0]``).
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .compiler import LowerFlags, lower
from .core import MambaConfig, Nonlinearity, Reduction, make_weights, mamba_model_ref, tiny_config
from .engine import MachineConfig
from .simulator import simulate


def _prepare(config: MambaConfig | None, X) -> tuple[MambaConfig, np.ndarray]:
    X = check_array(X, dtype=np.float32, ensure_min_features=1)
    cfg = config or tiny_config(seq_len=X.shape[0])
    if X.shape[1] != cfg.d_model:
        raise ValueError(f"X has {X.shape[1]} features, config expects d_model={cfg.d_model}")
    return replace(cfg, seq_len=X.shape[0]), X


class GoldenMamba(BaseEstimator, TransformerMixin):
    def __init__(self, config: MambaConfig | None = None, seed: int = 0,
                 nonlinearity: str = "approx", reduction: str = "sequential"):
        self.config = config
        self.seed = seed
        self.nonlinearity = nonlinearity
        self.reduction = reduction

    def fit(self, X, y=None):
        cfg, X = _prepare(self.config, X)
        self.config_ = cfg
        self.weights_ = make_weights(cfg, self.seed)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "weights_")
        cfg, X = _prepare(self.config_, X)
        return mamba_model_ref(X, self.weights_, cfg, nonlinearity=Nonlinearity(self.nonlinearity),
                               reduction=Reduction(self.reduction))


class MarcaSimulator(BaseEstimator, TransformerMixin):
    """``fit`` lowers the model for the sequence length of X; ``transform`` simulates."""

    def __init__(self, config: MambaConfig | None = None, seed: int = 0, intra_bm: bool = True,
                 inter_bm: bool = True, baseline_tensor_core: bool = False, exact_kernels: bool = False):
        self.config = config
        self.seed = seed
        self.intra_bm = intra_bm
        self.inter_bm = inter_bm
        self.baseline_tensor_core = baseline_tensor_core
        self.exact_kernels = exact_kernels

    def fit(self, X, y=None):
        cfg, X = _prepare(self.config, X)
        self.config_ = cfg
        self.weights_ = make_weights(cfg, self.seed)
        self.lowered_ = lower(cfg, LowerFlags(self.intra_bm, self.inter_bm))
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "lowered_")
        cfg, X = _prepare(self.config_, X)
        if cfg.seq_len != self.config_.seq_len:
            raise ValueError(f"program was lowered for L={self.config_.seq_len}, got L={cfg.seq_len}")
        machine = MachineConfig(baseline_tensor_core=self.baseline_tensor_core)
        res = simulate(self.lowered_, self.weights_, X, machine=machine, exact_kernels=self.exact_kernels)
        self.stats_ = res.stats
        return res.output
