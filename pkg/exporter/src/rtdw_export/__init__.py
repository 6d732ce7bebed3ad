from .container import ExportError, config_tensor, write_container
from .export import ExportManifest, build_manifest, convert_state_dict, export_checkpoint
from .parity import emit_parity, read_inputs

__version__ = "0.1.0"

__all__ = [
    "ExportError", "ExportManifest", "build_manifest", "config_tensor",
    "convert_state_dict", "emit_parity", "export_checkpoint", "read_inputs",
    "write_container",
]
