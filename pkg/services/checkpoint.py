"""Versioned checkpoint container for mini models.

Layout::

    INFOFLOW-CKPT\\n
    <one line of JSON: format_version, config, manifest [{name, shape}]>\\n
    <row-major little-endian float64 blocks, in manifest order>

Headers are written with sorted keys so that identical models produce
byte-identical files.
"""

import json
import logging
from pathlib import Path

import numpy as np
import torch

from services.errors import CheckpointError
from services.mini_lvlm import MiniLVLM, ModelConfig

logger = logging.getLogger(__name__)

MAGIC = b"INFOFLOW-CKPT\n"
FORMAT_VERSION = 1
_FLOAT = np.dtype("<f8")


def save_checkpoint(model: MiniLVLM, path: str | Path) -> Path:
    """Write ``model`` to ``path``.

    Returns:
        The written path.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = model.state_dict()
    header = {
        "format_version": FORMAT_VERSION,
        "config": model.config.model_dump(mode="json"),
        "manifest": [{"name": name, "shape": list(t.shape)} for name, t in state.items()],
    }
    with path.open("wb") as handle:
        handle.write(MAGIC)
        handle.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for tensor in state.values():
            handle.write(tensor.detach().contiguous().numpy().astype(_FLOAT).tobytes())

    logger.info(f"Saved checkpoint with {model.parameter_count()} parameters to {path}")
    return path


def read_header(path: str | Path) -> dict:
    """Read and validate the JSON header of a checkpoint."""
    with Path(path).open("rb") as handle:
        return _read_header(handle, path)


def _read_header(handle, path) -> dict:
    if handle.readline() != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic line)")
    try:
        header = json.loads(handle.readline().decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path} has an unreadable header: {e}") from e
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path} has format version {version}, expected {FORMAT_VERSION}")
    return header


def load_checkpoint(path: str | Path) -> MiniLVLM:
    """Load a checkpoint, validating the shape manifest against the config.

    Raises:
        FileNotFoundError: If ``path`` does not exist.
        CheckpointError: If the container or its manifest is invalid.
    """
    path = Path(path)
    with path.open("rb") as handle:
        header = _read_header(handle, path)
        config = ModelConfig.model_validate(header["config"])
        model = MiniLVLM(config)
        expected = {name: list(t.shape) for name, t in model.state_dict().items()}
        manifest = header.get("manifest", [])

        found = {entry["name"]: entry["shape"] for entry in manifest}
        if found != expected:
            missing = sorted(set(expected) - set(found))
            unexpected = sorted(set(found) - set(expected))
            reshaped = sorted(n for n in set(found) & set(expected) if found[n] != expected[n])
            raise CheckpointError(
                f"{path} manifest does not match config: missing={missing}, "
                f"unexpected={unexpected}, reshaped={reshaped}"
            )

        state = {}
        for entry in manifest:
            count = int(np.prod(entry["shape"], dtype=np.int64))
            raw = handle.read(count * _FLOAT.itemsize)
            if len(raw) != count * _FLOAT.itemsize:
                raise CheckpointError(f"{path} is truncated inside block '{entry['name']}'")
            block = np.frombuffer(raw, dtype=_FLOAT).reshape(entry["shape"])
            state[entry["name"]] = torch.from_numpy(block.astype(np.float64))
        if handle.read(1):
            raise CheckpointError(f"{path} has trailing bytes after the last block")

    model.load_state_dict(state)
    logger.info(f"Loaded checkpoint {path} ({model.parameter_count()} parameters)")
    return model
