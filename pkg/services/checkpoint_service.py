"""
Binary checkpoint:

    b"DEFT" | u16 version | u32 config length | config text (UTF-8)
    then until EOF, per array:
    u16 name length | name | u8 dtype tag | u8 rank | u32 dims... | raw little-endian values

Arrays are written in ``state_dict`` order: parameters, then BN running buffers.
"""
import logging
import struct
from collections import OrderedDict
from pathlib import Path
from typing import BinaryIO, Dict, Tuple

import numpy as np

from models.deft_models import ModelConfig
from models.errors import DataIOError
from services.config_service import parse_model_config, serialize_model_config
from services.model_service import DefTModel

logger = logging.getLogger(__name__)

MAGIC = b"DEFT"
FORMAT_VERSION = 1
DTYPE_TAGS = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
TAG_DTYPES = {tag: dtype for dtype, tag in DTYPE_TAGS.items()}


def _read_exact(fh: BinaryIO, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise DataIOError("truncated checkpoint", {"while_reading": what})
    return data


def write_checkpoint(fh: BinaryIO, config: ModelConfig, state: Dict[str, np.ndarray]):
    blob = serialize_model_config(config).encode("utf-8")
    fh.write(MAGIC)
    fh.write(struct.pack("<HI", FORMAT_VERSION, len(blob)))
    fh.write(blob)
    for name, array in state.items():
        array = np.asarray(array)
        dtype = array.dtype.newbyteorder("<")
        if dtype not in DTYPE_TAGS:
            raise DataIOError("unsupported array dtype in state", {"name": name, "dtype": str(array.dtype)})
        encoded = name.encode("utf-8")
        fh.write(struct.pack("<H", len(encoded)))
        fh.write(encoded)
        fh.write(struct.pack("<BB", DTYPE_TAGS[dtype], array.ndim))
        fh.write(struct.pack(f"<{array.ndim}I", *array.shape))
        fh.write(np.ascontiguousarray(array, dtype=dtype).tobytes())


def read_checkpoint(fh: BinaryIO) -> Tuple[ModelConfig, "OrderedDict[str, np.ndarray]"]:
    if _read_exact(fh, 4, "magic") != MAGIC:
        raise DataIOError("not a DEFT checkpoint")
    version, length = struct.unpack("<HI", _read_exact(fh, 6, "header"))
    if version != FORMAT_VERSION:
        raise DataIOError("unsupported checkpoint version", {"version": version, "supported": FORMAT_VERSION})
    config = parse_model_config(_read_exact(fh, length, "config").decode("utf-8"))
    state: "OrderedDict[str, np.ndarray]" = OrderedDict()
    while True:
        head = fh.read(2)
        if not head:
            break
        if len(head) != 2:
            raise DataIOError("truncated checkpoint", {"while_reading": "record name length"})
        (name_length,) = struct.unpack("<H", head)
        name = _read_exact(fh, name_length, "record name").decode("utf-8")
        tag, rank = struct.unpack("<BB", _read_exact(fh, 2, name))
        if tag not in TAG_DTYPES:
            raise DataIOError("unknown dtype tag", {"name": name, "tag": tag})
        shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, name))
        dtype = TAG_DTYPES[tag]
        count = int(np.prod(shape, dtype=np.int64))
        raw = _read_exact(fh, count * dtype.itemsize, name)
        state[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    return config, state


def save_model(model: DefTModel, path) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("wb") as fh:
            write_checkpoint(fh, model.config, model.state_dict())
    except OSError as e:
        raise DataIOError("could not write checkpoint", {"path": str(path), "original_error": str(e)})
    logger.info("saved checkpoint path=%s arrays=%d", path, len(model.state_dict()))
    return path


def load_model(path, seed: int = 0) -> DefTModel:
    """Rebuild the model from the embedded config and copy every array into it."""
    path = Path(path)
    if not path.is_file():
        raise DataIOError("checkpoint not found", {"path": str(path)})
    try:
        with path.open("rb") as fh:
            config, state = read_checkpoint(fh)
    except OSError as e:
        raise DataIOError("could not read checkpoint", {"path": str(path), "original_error": str(e)})
    model = DefTModel(config, seed)
    dtypes = {a.dtype for a in state.values()}
    if dtypes == {np.dtype(np.float64)}:
        model.to(np.float64)
    model.load_state_dict(state)
    logger.info("loaded checkpoint path=%s arrays=%d", path, len(state))
    return model
