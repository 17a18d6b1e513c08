import numpy as np
from sklearn.utils.validation import check_array

from .exceptions import EmptyInputError, ShapeMismatchError


def check_field(field, dtype=np.float64, name="field"):
    """Validate a single real 2-D field."""
    arr = np.asarray(field)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ShapeMismatchError(f"{name} must be a non-empty 2-D array, got shape {arr.shape}")
    if np.iscomplexobj(arr):
        raise ValueError(f"{name} must be real-valued")
    return arr.astype(dtype, copy=False)


def check_fields(fields, dtype=np.float64, name="fields", shape=None):
    """Validate a stack of same-shape 2-D fields, returned as an (n, H, W) array.

    Accepts a 3-D array or a sequence of 2-D arrays. A single 2-D field is
    promoted to a stack of one.
    """
    if isinstance(fields, (list, tuple)):
        if len(fields) == 0:
            raise EmptyInputError(f"{name} is empty")
        shapes = {np.shape(f) for f in fields}
        if len(shapes) != 1:
            raise ShapeMismatchError(f"{name} have inconsistent shapes: {sorted(shapes)}")
        fields = np.stack([np.asarray(f) for f in fields])
    arr = np.asarray(fields)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ShapeMismatchError(f"{name} must be (n, H, W), got shape {arr.shape}")
    if arr.shape[0] == 0:
        raise EmptyInputError(f"{name} is empty")
    arr = check_array(
        arr, dtype=dtype, allow_nd=True, ensure_all_finite=True,
        ensure_min_samples=1, ensure_min_features=1, input_name=name,
    )
    if shape is not None and arr.shape[1:] != tuple(shape):
        raise ShapeMismatchError(f"{name} have grid {arr.shape[1:]}, expected {tuple(shape)}")
    return arr


def check_same_shape(a, b, names=("a", "b")):
    if np.shape(a) != np.shape(b):
        raise ShapeMismatchError(f"{names[0]} shape {np.shape(a)} != {names[1]} shape {np.shape(b)}")
