"""Multi-stream generative recommender with a verifiable numpy autodiff core."""

from .tensor import (
    Tensor,
    no_grad,
    set_default_dtype,
    default_dtype,
    use_dtype,
)

__all__ = [
    "Tensor",
    "no_grad",
    "set_default_dtype",
    "default_dtype",
    "use_dtype",
]

__version__ = "0.1.0"
