"""Single-file checkpoint container.

Layout: an 8-byte little-endian manifest length, the manifest (JSON,
utf-8), then the raw little-endian tensor blobs back to back. The
manifest records every tensor's name, shape, dtype and byte offset into
the blob section, plus the architecture-parameter vectors, path-sampler
rng state and the format version. Round-trips are bitwise exact.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from fna.errors import CheckpointError

CKPT_FORMAT_VERSION = "fna_ckpt_v1"

_DTYPES = {"float32": "<f4", "float64": "<f8"}


@dataclass
class Checkpoint:
    kind: str
    state: dict[str, np.ndarray]
    meta: dict
    alphas: list[np.ndarray] | None = None
    rng_state: dict | None = None
    bn_updates_enabled: bool | None = None


def save_checkpoint(path, kind: str, state: dict[str, np.ndarray], meta: dict | None = None,
                    alphas=None, rng_state: dict | None = None,
                    bn_updates_enabled: bool | None = None):
    names = sorted(state)
    tensors = []
    blobs = []
    offset = 0
    for name in names:
        arr = np.ascontiguousarray(state[name])
        if arr.dtype.name not in _DTYPES:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        blob = arr.astype(_DTYPES[arr.dtype.name]).tobytes()
        tensors.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": arr.dtype.name,
            "offset": offset,
            "nbytes": len(blob),
        })
        blobs.append(blob)
        offset += len(blob)
    manifest = {
        "version": CKPT_FORMAT_VERSION,
        "kind": kind,
        "meta": meta or {},
        "tensors": tensors,
        "alphas": [np.asarray(a, dtype=np.float64).tolist() for a in alphas]
        if alphas is not None else None,
        "rng_state": rng_state,
        "bn_updates_enabled": bn_updates_enabled,
    }
    payload = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(payload)))
        f.write(payload)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path) -> Checkpoint:
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if len(raw) < 8:
        raise CheckpointError(f"checkpoint {path} is truncated (no header)")
    (mlen,) = struct.unpack("<Q", raw[:8])
    if len(raw) < 8 + mlen:
        raise CheckpointError(f"checkpoint {path} is truncated (manifest cut short)")
    try:
        manifest = json.loads(raw[8: 8 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"checkpoint {path} has a corrupted manifest: {e}") from e
    if manifest.get("version") != CKPT_FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint version {manifest.get('version')!r} unsupported, "
            f"expected {CKPT_FORMAT_VERSION!r}")
    blob_base = 8 + mlen
    state = {}
    for t in manifest["tensors"]:
        start = blob_base + t["offset"]
        end = start + t["nbytes"]
        if end > len(raw):
            raise CheckpointError(
                f"checkpoint {path} is truncated (tensor {t['name']} out of bounds)")
        arr = np.frombuffer(raw[start:end], dtype=_DTYPES[t["dtype"]])
        state[t["name"]] = arr.astype(t["dtype"]).reshape(t["shape"]).copy()
    alphas = manifest.get("alphas")
    return Checkpoint(
        kind=manifest["kind"],
        state=state,
        meta=manifest.get("meta", {}),
        alphas=[np.asarray(a, dtype=np.float64) for a in alphas]
        if alphas is not None else None,
        rng_state=manifest.get("rng_state"),
        bn_updates_enabled=manifest.get("bn_updates_enabled"),
    )


# -- typed helpers over the container ----------------------------------------

def save_network(path, arch, network, meta: dict | None = None):
    from fna.arch import serialize_arch

    full_meta = {"arch": serialize_arch(arch)}
    full_meta.update(meta or {})
    save_checkpoint(path, "network", network.state_dict(), full_meta)


def load_network(path):
    """-> (ArchDescriptor, Network) rebuilt from the stored state."""
    from fna.arch import deserialize_arch
    from fna.blocks import Network

    ckpt = load_checkpoint(path)
    if ckpt.kind != "network":
        raise CheckpointError(f"expected a network checkpoint, got kind {ckpt.kind!r}")
    arch = deserialize_arch(ckpt.meta["arch"])
    dtype = np.float64 if any(v.dtype == np.float64 for v in ckpt.state.values()) \
        else np.float32
    net = Network(arch, rng=None, dtype=dtype)
    net.load_state_dict(ckpt.state)
    return arch, net


def save_supernet(path, supernet, meta: dict | None = None):
    from fna.arch import serialize_space

    full_meta = {"space": serialize_space(supernet.space)}
    full_meta.update(meta or {})
    save_checkpoint(path, "supernet", supernet.state_dict(), full_meta,
                    alphas=[a.data for a in supernet.alphas()],
                    rng_state=supernet.get_rng_state(),
                    bn_updates_enabled=supernet.bn_updates_enabled)


def load_supernet(path):
    from fna.arch import deserialize_space
    from fna.supernet import SuperNet

    ckpt = load_checkpoint(path)
    if ckpt.kind != "supernet":
        raise CheckpointError(f"expected a supernet checkpoint, got kind {ckpt.kind!r}")
    space = deserialize_space(ckpt.meta["space"])
    dtype = np.float64 if any(
        v.dtype == np.float64 for k, v in ckpt.state.items()) else np.float32
    net = SuperNet(space, dtype=dtype)
    net.load_state_dict(ckpt.state)
    for alpha, stored in zip(net.alphas(), ckpt.alphas or []):
        alpha.data = stored.copy()
    if ckpt.rng_state is not None:
        net.set_rng_state(ckpt.rng_state)
    if ckpt.bn_updates_enabled is not None:
        net.set_bn_updates(ckpt.bn_updates_enabled)
    return net
