"""Selects the compiled kernel module when it is importable.

``core`` is the active implementation. :func:`use` switches it at runtime,
which the benchmark and the parity tests rely on.
"""

from . import _core_py

try:
    from . import _core as _compiled
except ImportError:  # extension not built
    _compiled = None

core = _compiled if _compiled is not None else _core_py
name = "compiled" if _compiled is not None else "python"


def available() -> list[str]:
    return ["python"] + (["compiled"] if _compiled is not None else [])


def use(which: str) -> None:
    global core, name
    if which == "compiled":
        if _compiled is None:
            raise ImportError("compiled extension evpoi._core is not built")
        core, name = _compiled, "compiled"
    elif which == "python":
        core, name = _core_py, "python"
    else:
        raise ValueError(f"unknown backend {which!r}")
