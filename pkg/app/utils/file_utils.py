import json
import logging
import os

from config.config import ALLOWED_EXTENSIONS
from app.utils.errors import MissingInputError, SchemaError

logger = logging.getLogger(__name__)


def allowed_file(filename, allowed_extensions=None):
    """
    Check if a filename has an allowed extension.
    Args:
        filename (str): Name of the file to check
        allowed_extensions (set): Optional set of allowed extensions. If None, uses all artifact extensions.
    Returns:
        bool: True if file extension is allowed, False otherwise
    """
    if not filename:
        logger.warning("Empty filename provided to allowed_file")
        return False

    extensions = allowed_extensions if allowed_extensions is not None else ALLOWED_EXTENSIONS

    if '.' not in os.path.basename(filename):
        logger.warning(f"Filename '{filename}' has no extension")
        return False

    extension = filename.rsplit('.', 1)[1].lower()
    is_allowed = extension in extensions

    if not is_allowed:
        logger.warning(f"File extension '{extension}' not in allowed extensions: {extensions}")

    return is_allowed


def require_input(path, allowed_extensions=None):
    """Fail with MISSING_INPUT unless the artifact exists and has an allowed extension."""
    if not allowed_file(path, allowed_extensions):
        raise SchemaError(f"unsupported artifact type: {path}")
    if not os.path.exists(path):
        raise MissingInputError(f"required input not found: {path}")
    return path


def ensure_parent(path):
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
    return path


def write_json(data, path):
    ensure_parent(path)
    with open(path, 'w') as handle:
        json.dump(data, handle, indent=2, sort_keys=True)
    return path


def read_json(path):
    require_input(path, {'json'})
    try:
        with open(path, 'r') as handle:
            return json.load(handle)
    except json.JSONDecodeError as e:
        raise SchemaError(f"{path} is not valid JSON: {str(e)}", line=e.lineno)
