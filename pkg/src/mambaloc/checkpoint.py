"""Weight checkpoints: a plain-text header (precision, seed, config as
key=value, a config hash) followed by raw little-endian tensor buffers.
Round trips are bit-exact.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .model import Model, ModelConfig, build

MAGIC = "mambaloc-checkpoint v1"
_MARKER = b"\ndata\n"


def encode_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(encode_value(x) for x in v)
    return str(v)


def decode_value(s: str):
    s = s.strip()
    if s == "none":
        return None
    if s in ("true", "false"):
        return s == "true"
    if "," in s:
        return tuple(decode_value(x) for x in s.split(","))
    try:
        return int(s)
    except ValueError:
        pass
    try:
        return float(s)
    except ValueError:
        return s


def config_lines(config: ModelConfig) -> list:
    return [f"config.{k}={encode_value(v)}" for k, v in sorted(config.to_dict().items())]


def config_hash(config: ModelConfig) -> str:
    return hashlib.sha256("\n".join(config_lines(config)).encode()).hexdigest()


def _little_endian(arr: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))


def save_checkpoint(path: str, model: Model, seed: int, extra: dict | None = None):
    """Write every parameter and buffer of ``model`` plus its config."""
    tensors = [("param." + n, t.data) for n, t in model.named_parameters()]
    tensors += [("buffer." + n, a) for n, a in model.named_buffers()]
    precision = tensors[0][1].dtype.name
    lines = [MAGIC,
             f"precision={precision}",
             f"seed={int(seed)}",
             f"config_hash={config_hash(model.config)}"]
    lines += config_lines(model.config)
    for key, value in sorted((extra or {}).items()):
        if "\n" in f"{key}{value}":
            raise ValueError(f"checkpoint extra {key!r} must be single-line")
        lines.append(f"extra.{key}={value}")
    for name, arr in tensors:
        shape = ",".join(str(s) for s in arr.shape)
        lines.append(f"tensor.{name}={arr.dtype.name};{shape}")
    with open(path, "wb") as f:
        f.write("\n".join(lines).encode())
        f.write(_MARKER)
        for _, arr in tensors:
            f.write(_little_endian(arr).tobytes())


def load_checkpoint(path: str):
    """Returns (config, seed, {name: array}, extra dict)."""
    with open(path, "rb") as f:
        blob = f.read()
    split = blob.find(_MARKER)
    if split < 0:
        raise ValueError(f"{path}: not a checkpoint (missing data marker)")
    lines = blob[:split].decode().split("\n")
    if lines[0] != MAGIC:
        raise ValueError(f"{path}: bad magic {lines[0]!r}")
    header = {}
    specs = []
    for line in lines[1:]:
        key, _, value = line.partition("=")
        if key.startswith("tensor."):
            dtype_name, _, shape_csv = value.partition(";")
            shape = tuple(int(s) for s in shape_csv.split(",") if s)
            specs.append((key[len("tensor."):], np.dtype(dtype_name), shape))
        else:
            header[key] = value
    config = ModelConfig.from_dict({
        k[len("config."):]: decode_value(v)
        for k, v in header.items() if k.startswith("config.")
    })
    if header.get("config_hash") != config_hash(config):
        raise ValueError(f"{path}: config hash mismatch")
    extra = {k[len("extra."):]: v for k, v in header.items() if k.startswith("extra.")}
    tensors = {}
    offset = split + len(_MARKER)
    for name, dtype, shape in specs:
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        buf = blob[offset:offset + nbytes]
        if len(buf) != nbytes:
            raise ValueError(f"{path}: truncated buffer for {name}")
        arr = np.frombuffer(buf, dtype=dtype.newbyteorder("<")).astype(dtype).reshape(shape)
        tensors[name] = arr
        offset += nbytes
    if offset != len(blob):
        raise ValueError(f"{path}: {len(blob) - offset} trailing bytes")
    return config, int(header.get("seed", 0)), tensors, extra


def restore_model(path: str):
    """Rebuild the model a checkpoint came from. Returns (model, seed, extra)."""
    config, seed, tensors, extra = load_checkpoint(path)
    dtype = tensors[next(iter(tensors))].dtype if tensors else np.float32
    model = build(config, seed=seed, dtype=dtype)
    params = {"param." + n: t for n, t in model.named_parameters()}
    buffers = {"buffer." + n: a for n, a in model.named_buffers()}
    expected = set(params) | set(buffers)
    if expected != set(tensors):
        missing = sorted(expected - set(tensors))[:3]
        surplus = sorted(set(tensors) - expected)[:3]
        raise ValueError(f"{path}: tensor names do not match the config "
                         f"(missing {missing}, surplus {surplus})")
    for name, arr in tensors.items():
        target = params[name].data if name in params else buffers[name]
        if target.shape != arr.shape:
            raise ValueError(f"{path}: {name} shape {arr.shape} vs {target.shape}")
        target[...] = arr
    return model, seed, extra
