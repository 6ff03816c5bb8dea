class ExportError(Exception):
    """Capture or serialization failure; message names the layer when
    hook attachment is the cause."""
