"""Input validation helpers used across the package and by the estimators."""

import numpy as np

from .errors import ParameterError, ShapeError, StateError


def as_float_array(x, name="array"):
    """Coerce to a float64 ndarray, rejecting non-finite entries."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.size and not np.all(np.isfinite(arr)):
        raise ParameterError(f"{name} contains non-finite values")
    return arr


def check_samples(samples):
    """Validate a 1-D waveform: finite float samples."""
    arr = np.asarray(samples)
    if arr.ndim != 1:
        raise ShapeError(f"waveform must be 1-D, got shape {arr.shape}")
    if arr.size == 0:
        raise ShapeError("waveform is empty")
    if not np.all(np.isfinite(arr)):
        raise ParameterError("waveform contains non-finite samples")
    return arr.astype(np.float64, copy=False)


def check_feature_tensor(tensor, normalized=None):
    """Validate a FeatureTensor, optionally asserting its normalization state."""
    if tensor.data.ndim != 3:
        raise ShapeError(f"feature tensor must be 3-D, got {tensor.data.shape}")
    if not np.all(np.isfinite(tensor.data)):
        raise ParameterError("feature tensor contains non-finite entries")
    if normalized is True and not tensor.normalized:
        raise StateError("feature tensor is not normalized")
    if normalized is False and tensor.normalized:
        raise StateError("feature tensor is already normalized")
    return tensor


def check_probability_matrix(scores, name="scores"):
    """Validate an array of probabilities in [0, 1]."""
    arr = np.asarray(scores, dtype=np.float64)
    if arr.size == 0:
        raise ShapeError(f"{name} is empty")
    if not np.all(np.isfinite(arr)):
        raise ParameterError(f"{name} contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ParameterError(f"{name} has values outside [0, 1]")
    return arr


def check_odd_window(window):
    """Validate an odd, positive filter window size."""
    window = int(window)
    if window < 1 or window % 2 == 0:
        raise ParameterError(f"window must be odd and >= 1, got {window}")
    return window


def check_fitted(estimator, attribute):
    """Raise StateError unless ``estimator`` carries the fitted attribute."""
    if getattr(estimator, attribute, None) is None:
        raise StateError(
            f"{type(estimator).__name__} is not fitted; call fit() first"
        )
