"""Versioned, digest-checked checkpoints.

Layout: a magic line, one line of JSON header (tensor table, config
snapshot, training history) and a little-endian binary payload. The SHA-256
digest covers the payload and the header with its ``digest`` field blanked.
"""
from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import numpy as np
import torch

MAGIC = b"NOQS-CHECKPOINT\n"
FORMAT_VERSION = 1


class CorruptionError(IOError):
    pass


class VersionError(IOError):
    pass


def _digest(header: dict, payload: bytes) -> str:
    h = dict(header, digest="")
    m = hashlib.sha256(json.dumps(h, sort_keys=True).encode())
    m.update(payload)
    return m.hexdigest()


def _pack(tensors: dict[str, torch.Tensor]) -> tuple[list, bytes]:
    table, chunks, offset = [], [], 0
    for name, t in tensors.items():
        a = t.detach().cpu().numpy()
        a = a.astype(a.dtype.newbyteorder("<"), copy=False)
        raw = np.ascontiguousarray(a).tobytes()
        table.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape), "offset": offset,
                      "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    return table, b"".join(chunks)


def write_checkpoint(path, tensors: dict[str, torch.Tensor], meta: dict):
    table, payload = _pack(tensors)
    header = {"format_version": FORMAT_VERSION, "tensors": table, "payload_bytes": len(payload),
              "meta": meta, "digest": ""}
    header["digest"] = _digest(header, payload)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(payload)
    os.replace(tmp, path)


def read_checkpoint(path) -> tuple[dict[str, torch.Tensor], dict]:
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(MAGIC):
        raise CorruptionError(f"{path}: not a checkpoint file")
    end = data.find(b"\n", len(MAGIC))
    if end < 0:
        raise CorruptionError(f"{path}: truncated header")
    try:
        header = json.loads(data[len(MAGIC):end])
    except json.JSONDecodeError as exc:
        raise CorruptionError(f"{path}: unreadable header") from exc
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise VersionError(f"{path}: checkpoint format {version}, this build reads {FORMAT_VERSION}; "
                           "re-save it with a matching version")
    payload = data[end + 1:]
    if len(payload) != header["payload_bytes"]:
        raise CorruptionError(f"{path}: payload is {len(payload)} bytes, expected {header['payload_bytes']}")
    if _digest(header, payload) != header["digest"]:
        raise CorruptionError(f"{path}: digest mismatch")
    tensors = {}
    for entry in header["tensors"]:
        raw = payload[entry["offset"]: entry["offset"] + entry["nbytes"]]
        a = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
        tensors[entry["name"]] = torch.from_numpy(a.astype(a.dtype.newbyteorder("="), copy=True))
    return tensors, header["meta"]


# -- train state -------------------------------------------------------------

def save_checkpoint(state, path):
    model = state.model
    tensors = {f"model/{k}": v for k, v in model.state_dict().items()}
    names = {id(p): n for n, p in model.named_parameters()}
    if state.optimizer is not None:
        for group in state.optimizer.param_groups:
            for p in group["params"]:
                for key, value in state.optimizer.state.get(p, {}).items():
                    tensors[f"optim/{names[id(p)]}/{key}"] = torch.as_tensor(value)
    meta = {
        "step": state.step,
        "config": state.config,
        "history": state.history,
        "pretrain": state.pretrain,
        "frozen": [n for n, p in model.named_parameters() if not p.requires_grad],
    }
    write_checkpoint(path, tensors, meta)


def load_checkpoint(path):
    from .config import config_from_dict
    from .training import TrainState, make_optimizer
    from .neural_operator import NOQS

    tensors, meta = read_checkpoint(path)
    cfg = config_from_dict(meta["config"])
    lat = cfg.lattice.build()
    model = NOQS(lat.N, cfg.transformer, cfg.fno).double()
    state_dict = {k[len("model/"):]: v for k, v in tensors.items() if k.startswith("model/")}
    model.load_state_dict(state_dict)
    for name, p in model.named_parameters():
        p.requires_grad_(name not in meta["frozen"])
    opt = make_optimizer(model, cfg.train)
    params = dict(model.named_parameters())
    per_param: dict[str, dict] = {}
    for k, v in tensors.items():
        if k.startswith("optim/"):
            name, _, key = k[len("optim/"):].rpartition("/")
            per_param.setdefault(name, {})[key] = v
    for name, st in per_param.items():
        opt.state[params[name]] = st
    return TrainState(model, opt, meta["step"], meta["history"], meta["config"], meta["pretrain"])
