"""Dynamic frequency feature fusion network for joint classification of
hyperspectral and SAR/LiDAR patch pairs, built on a self-contained
numpy-backed reverse-mode autodiff engine.

Submodules are imported lazily so the CLI can cap BLAS threads before
numpy loads.
"""

__version__ = "0.1.0"

_SUBMODULES = ("tensor", "gradcheck", "fourier", "ops", "dfb", "ssafb",
               "model", "data", "train", "checks", "cli")


def __getattr__(name):
    if name in _SUBMODULES:
        import importlib

        module = importlib.import_module(f".{name}", __name__)
        globals()[name] = module
        return module
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(list(globals()) + list(_SUBMODULES))
