"""Network layer: backend completion client and the routing HTTP service."""

from .client import BackendEndpoint, BackendError, backend_complete
from .service import build_app, serve

__all__ = ["BackendEndpoint", "BackendError", "backend_complete", "build_app", "serve"]
