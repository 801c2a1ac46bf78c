"""Sparse event-driven object detection and multi-core cost simulation."""
__version__ = "0.1.0"

_LAZY = {"EventBinner": "estimators", "EventDetector": "estimators", "load_config": "config"}


def __getattr__(name):
    # keep ``import evdet`` light; scikit-learn loads only when an estimator is used
    if name in _LAZY:
        import importlib

        return getattr(importlib.import_module(f".{_LAZY[name]}", __name__), name)
    raise AttributeError(f"module 'evdet' has no attribute {name!r}")


__all__ = ["EventBinner", "EventDetector", "load_config", "__version__"]
