"""Backend selection for the hot loops.

The compiled ``_ckernels`` module is used when importable; otherwise, or when
the environment variable ``POMBU_PURE_PYTHON`` is set to a non-empty value,
the numpy fallback in ``_pykernels`` is used. Both expose identical functions.
"""
import os
from types import ModuleType

from . import _pykernels


def _load_compiled() -> ModuleType | None:
    try:
        from . import _ckernels
    except ImportError:
        return None
    return _ckernels


_compiled = _load_compiled()

if _compiled is not None and not os.environ.get("POMBU_PURE_PYTHON"):
    _impl: ModuleType = _compiled
    BACKEND = "cython"
else:
    _impl = _pykernels
    BACKEND = "python"

enum_q_moments = _impl.enum_q_moments
sample_tabular = _impl.sample_tabular
discounted_reverse_cumsum = _impl.discounted_reverse_cumsum


def available_backends() -> list[str]:
    return ["python"] + (["cython"] if _compiled is not None else [])


def get_backend(name: str) -> ModuleType:
    if name == "python":
        return _pykernels
    if name == "cython":
        if _compiled is None:
            raise ImportError("compiled kernels are not built")
        return _compiled
    raise ValueError(f"unknown backend {name!r}")
