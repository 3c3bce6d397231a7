import logging
import os

logger = logging.getLogger(__name__)


def safe_write(path: str, payload: bytes | str, keep_backup: bool = True) -> None:
    """
    Safely write file:
    1) write to temp file
    2) optionally backup old file
    3) atomically replace main file
    """
    dir_name = os.path.dirname(path) or "."
    os.makedirs(dir_name, exist_ok=True)

    tmp_path = f"{path}.tmp"
    bak_path = f"{path}.bak"
    data = payload.encode("utf-8") if isinstance(payload, str) else payload

    try:
        with open(tmp_path, "wb") as f:
            f.write(data)

        if keep_backup and os.path.exists(path):
            try:
                os.replace(path, bak_path)
                logger.debug("Created backup: %s", bak_path)
            except OSError as e:
                logger.warning("Failed to create backup %s: %s", bak_path, e, exc_info=True)

        os.replace(tmp_path, path)
        logger.debug("Saved %s (%d bytes)", path, len(data))
    except Exception as e:
        logger.error("Error in safe write to %s: %s", path, e, exc_info=True)
        try:
            if os.path.exists(tmp_path):
                os.remove(tmp_path)
        except OSError:
            pass
        raise
