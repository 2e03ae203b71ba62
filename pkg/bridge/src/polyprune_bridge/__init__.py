from .bridge import (
    BridgeError,
    ExportManifest,
    build_tensor_map,
    capture_stats,
    export_weights,
    graph_metadata,
    validate_architecture,
)

__version__ = "0.1.0"

__all__ = [
    "BridgeError",
    "ExportManifest",
    "build_tensor_map",
    "capture_stats",
    "export_weights",
    "graph_metadata",
    "validate_architecture",
]
