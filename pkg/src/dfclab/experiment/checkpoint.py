"""Binary checkpoint format.

Layout::

    DFCCKPT 1\\n
    <name> <rows> <cols>\\n   followed by rows*cols little-endian float64 (row-major)
    ...
    sha256 <hex digest of every preceding byte>\\n
"""
import hashlib

import numpy as np

from dfclab.network import NetworkParams

HEADER = b"DFCCKPT 1\n"
_LE = np.dtype("<f8")


class CheckpointError(ValueError):
    pass


def encode_tensors(tensors):
    """Serialize an ordered ``{name: array}`` mapping (1-D arrays become columns)."""
    parts = [HEADER]
    for name, arr in tensors.items():
        if not name or any(c.isspace() for c in name):
            raise CheckpointError(f"invalid tensor name {name!r}")
        a = np.asarray(arr, dtype=np.float64)
        if a.ndim == 0:
            a = a.reshape(1, 1)
        elif a.ndim == 1:
            a = a.reshape(-1, 1)
        elif a.ndim != 2:
            raise CheckpointError(f"tensor {name} has {a.ndim} dimensions")
        parts.append(f"{name} {a.shape[0]} {a.shape[1]}\n".encode("ascii"))
        parts.append(np.ascontiguousarray(a, dtype=_LE).tobytes())
    body = b"".join(parts)
    return body + f"sha256 {hashlib.sha256(body).hexdigest()}\n".encode("ascii")


def decode_tensors(blob):
    if not blob.startswith(HEADER):
        raise CheckpointError("not a checkpoint (bad header at offset 0)")
    tail = blob.rfind(b"sha256 ")
    if tail < 0 or not blob.endswith(b"\n"):
        raise CheckpointError("missing sha256 trailer")
    body = blob[:tail]
    digest = blob[tail + 7:-1].decode("ascii")
    if hashlib.sha256(body).hexdigest() != digest:
        raise CheckpointError("checksum mismatch")
    pos, out = len(HEADER), {}
    while pos < len(body):
        nl = body.index(b"\n", pos)
        name, rows, cols = body[pos:nl].decode("ascii").split()
        rows, cols = int(rows), int(cols)
        start = nl + 1
        end = start + rows * cols * 8
        if end > len(body):
            raise CheckpointError(f"tensor {name} truncated at offset {len(body)}")
        out[name] = np.frombuffer(body[start:end], dtype=_LE).reshape(rows, cols).astype(np.float64)
        pos = end
    return out


def params_tensors(params):
    t = {}
    for i in range(params.depth):
        t[f"W_{i + 1}"] = params.weights[i]
        t[f"b_{i + 1}"] = params.biases[i]
        t[f"Q_{i + 1}"] = params.feedback[i]
    return t


def optimizer_tensors(prefix, opt):
    t = {f"{prefix}_step": np.array([[opt.step]], dtype=np.float64)}
    for k, (m, v) in enumerate(zip(opt.m, opt.v)):
        t[f"{prefix}_m_{k}"] = m
        t[f"{prefix}_v_{k}"] = v
    return t


def restore_optimizer(prefix, opt, tensors, like):
    """Fill ``opt`` from saved tensors; ``like`` gives the parameter shapes."""
    if f"{prefix}_step" not in tensors:
        return opt
    opt.step = int(tensors[f"{prefix}_step"][0, 0])
    if f"{prefix}_m_0" in tensors:
        opt.m = [tensors[f"{prefix}_m_{k}"].reshape(np.shape(p)) for k, p in enumerate(like)]
        opt.v = [tensors[f"{prefix}_v_{k}"].reshape(np.shape(p)) for k, p in enumerate(like)]
    return opt


def save_checkpoint(path, params, epoch, optimizers=None, extra=None):
    """Write parameters, optimizer moments, epoch and any extra tensors."""
    tensors = params_tensors(params)
    tensors["epoch"] = np.array([[epoch]], dtype=np.float64)
    for prefix, opt in (optimizers or {}).items():
        tensors.update(optimizer_tensors(prefix, opt))
    tensors.update(extra or {})
    with open(path, "wb") as fh:
        fh.write(encode_tensors(tensors))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return decode_tensors(fh.read())


def params_from_tensors(tensors, activations):
    L = len(activations)
    try:
        weights = [tensors[f"W_{i + 1}"] for i in range(L)]
        biases = [tensors[f"b_{i + 1}"][:, 0] for i in range(L)]
        feedback = [tensors[f"Q_{i + 1}"] for i in range(L)]
    except KeyError as exc:
        raise CheckpointError(f"checkpoint lacks tensor {exc.args[0]}") from None
    return NetworkParams(weights, biases, feedback, list(activations))
