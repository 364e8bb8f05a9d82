"""Dense float arrays, primitive ops with analytic backward passes, and a gradient tape."""

from fetrack.numerics.gradcheck import check_gradients, numerical_grad, rel_error
from fetrack.numerics.tensor import (
    DTYPES,
    GradTape,
    Module,
    Parameter,
    Tensor,
    as_tensor,
    record,
    resolve_dtype,
)

__all__ = [
    "DTYPES",
    "GradTape",
    "Module",
    "Parameter",
    "Tensor",
    "as_tensor",
    "check_gradients",
    "numerical_grad",
    "record",
    "rel_error",
    "resolve_dtype",
]
