"""Kernel backend selection.

The hot numeric kernels exist twice: a numba @njit version and a pure-numpy
fallback. ``VISMIX_BACKEND`` picks one:

* ``auto`` (default): numba when importable, numpy otherwise
* ``numba``: require numba, fail loudly if missing
* ``numpy``: force the fallback (useful for debugging and benchmarking)

The choice is made once at import time; both paths compute the same
quantities, though last-bit float results may differ between them because
summation orders differ. Within one backend everything is deterministic.
"""

import os

_ENV_VAR = "VISMIX_BACKEND"
_CHOICES = ("auto", "numba", "numpy")


def _resolve() -> str:
    value = os.environ.get(_ENV_VAR, "auto").strip().lower()
    if value not in _CHOICES:
        raise ValueError(
            f"{_ENV_VAR}={value!r} is not one of {_CHOICES}"
        )
    if value == "numpy":
        return "numpy"
    try:
        import numba  # noqa: F401
        return "numba"
    except ImportError:
        if value == "numba":
            raise ImportError(
                f"{_ENV_VAR}=numba but numba is not importable"
            ) from None
        return "numpy"


BACKEND = _resolve()
USE_NUMBA = BACKEND == "numba"
