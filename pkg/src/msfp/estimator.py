"""scikit-learn style wrapper around the per-site quantizer search."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted, check_random_state, validate_data

from .calib import build_search_space, search_mixup, search_signed, search_unsigned
from .fpq import fp_quantize

__all__ = ["FPQuantizer"]


class FPQuantizer(TransformerMixin, BaseEstimator):
    """Fit one FP fake-quantizer to a tensor, then quantize with it.

    The whole input is treated as one quantization site (per-tensor).

    Parameters
    ----------
    bits : int
        Total bit-width, sign bit included for signed formats.
    role : {"activation", "weight"}
        Selects the search space; weights are signed only.
    mode : {"mixup", "signed", "unsigned"}
        ``mixup`` keeps an unsigned + zero-point quantizer only when it beats
        the best signed one.
    n_maxvals : int
        Points on the maxval line.
    maxval0 : float or None
        Anchor of the maxval line; ``None`` uses ``max |X|``.
    max_samples : int or None
        Fit on a random subset of at most this many values.
    random_state : int, Generator or None
        Seeds the subset.
    """

    def __init__(self, bits=4, role="activation", mode="mixup", n_maxvals=100, maxval0=None,
                 max_samples=None, random_state=None):
        self.bits = bits
        self.role = role
        self.mode = mode
        self.n_maxvals = n_maxvals
        self.maxval0 = maxval0
        self.max_samples = max_samples
        self.random_state = random_state

    def fit(self, X, y=None):
        if self.mode not in ("mixup", "signed", "unsigned"):
            raise ValueError(f"mode must be 'mixup', 'signed' or 'unsigned', got {self.mode!r}")
        X = validate_data(self, X, dtype=np.float64)
        x = X.ravel()
        if self.max_samples is not None and x.size > self.max_samples:
            rng = check_random_state(self.random_state)
            x = x[np.sort(rng.choice(x.size, size=self.max_samples, replace=False))]
        m0 = float(np.max(np.abs(x))) if self.maxval0 is None else float(self.maxval0)
        if not m0 > 0:
            # nothing to scale against; fall back to a unit range
            m0 = 1.0
        if self.mode == "unsigned":
            res = search_unsigned(x, build_search_space(self.bits, self.role, "unsigned", m0, self.n_maxvals))
        else:
            signed = build_search_space(self.bits, self.role, "signed", m0, self.n_maxvals)
            if self.mode == "signed":
                res = search_signed(x, signed)
            else:
                res = search_mixup(x, signed, build_search_space(self.bits, self.role, "unsigned", m0, self.n_maxvals))
        self.params_ = res.params
        self.mse_ = res.mse
        self.mode_mse_ = dict(res.mode_mse)
        return self

    def transform(self, X):
        check_is_fitted(self, "params_")
        X = validate_data(self, X, dtype=np.float64, reset=False)
        return fp_quantize(X, self.params_)

    def score(self, X, y=None):
        """Negative quantization MSE on ``X`` (higher is better)."""
        d = self.transform(X) - validate_data(self, X, dtype=np.float64, reset=False)
        return -float(np.mean(d * d))
