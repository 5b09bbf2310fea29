"""Binary containers for features, projectors, adapters, models and optimizer state.

Layout::

    b"IPA1" | header_len (uint32 LE) | header (UTF-8 JSON) | payload

The payload concatenates the tensors listed in ``header["tensors"]`` as
row-major little-endian float64, in that order. Headers are serialised with
sorted keys and no whitespace, so writing the same object twice gives the
same bytes.
"""

import hashlib
import json
import os
import struct
import tempfile
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from .adapters import DoraAdapter, IpaAdapter, LoraAdapter
from .errors import BindingError, FormatError
from .featureset import FeatureSet
from .projector import Projector
from .trainer import AdamState

MAGIC = b"IPA1"
FORMAT_VERSION = 1
KINDS = ("feature_set", "projector", "adapter", "model", "adam_state")
_NEEDS_HASH = ("feature_set", "adapter")


def dump_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


# -- raw container --------------------------------------------------------------


def encode_container(kind, tensors, meta=None):
    """Serialise ``tensors`` (ordered ``(name, array)`` pairs) with ``meta``."""
    if kind not in KINDS:
        raise FormatError(f"unknown container kind {kind!r}")
    meta = dict(meta or {})
    if kind in _NEEDS_HASH and not meta.get("model_hash"):
        raise FormatError(f"{kind} containers must carry a model_hash")
    entries, chunks = [], []
    for name, arr in tensors:
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim not in (1, 2):
            raise FormatError(f"tensor {name} must be 1-D or 2-D")
        entries.append({"name": name, "shape": list(arr.shape)})
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    header = {**meta, "kind": kind, "format_version": FORMAT_VERSION, "tensors": entries}
    hbytes = dump_json(header).encode("utf-8")
    return MAGIC + struct.pack("<I", len(hbytes)) + hbytes + b"".join(chunks)


def decode_container(blob, kind=None):
    """Inverse of :func:`encode_container`: ``(header, {name: array})``."""
    if len(blob) < 8 or blob[:4] != MAGIC:
        raise FormatError("not an IPA1 container (bad magic)")
    (hlen,) = struct.unpack("<I", blob[4:8])
    if 8 + hlen > len(blob):
        raise FormatError("header length exceeds file size")
    try:
        header = json.loads(blob[8 : 8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable header: {exc}") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"unsupported format_version {header.get('format_version')!r}")
    if kind is not None and header.get("kind") != kind:
        raise FormatError(f"expected a {kind} container, found {header.get('kind')!r}")
    if header.get("kind") in _NEEDS_HASH and not header.get("model_hash"):
        raise FormatError("container is missing its model_hash")
    tensors, pos = {}, 8 + hlen
    sizes = [int(np.prod(t["shape"])) for t in header["tensors"]]
    if len(blob) - pos != 8 * sum(sizes):
        raise FormatError("payload length does not match the declared tensors")
    for entry, size in zip(header["tensors"], sizes):
        arr = np.frombuffer(blob, dtype="<f8", count=size, offset=pos)
        tensors[entry["name"]] = arr.astype(np.float64).reshape(entry["shape"])
        pos += 8 * size
    return header, tensors


# -- atomic files -----------------------------------------------------------------


def _umask():
    mask = os.umask(0)
    os.umask(mask)
    return mask


def atomic_write(path, data):
    """Write to a temp name in the target directory, then rename into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.chmod(tmp, 0o666 & ~_umask())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


@contextmanager
def output_lock(directory):
    """Exclusive lock file guarding one output directory."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lock = directory / ".ipakit.lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise FormatError(f"{directory} is locked by another run ({lock})") from None
    os.close(fd)
    try:
        yield directory
    finally:
        lock.unlink(missing_ok=True)


def file_digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(path, config, seeds, outputs, extra=None):
    """Resolved config, seeds and the digest of every output file (no timestamps)."""
    doc = {
        "config": config,
        "seeds": seeds,
        "outputs": {Path(p).name: file_digest(p) for p in sorted(outputs, key=str)},
    }
    if extra:
        doc.update(extra)
    return atomic_write(path, json.dumps(doc, sort_keys=True, indent=2) + "\n")


# -- typed objects ----------------------------------------------------------------


def features_to_bytes(fs):
    meta = {"weight_name": fs.weight_name, "layer_id": fs.layer_id,
            "model_hash": fs.model_hash, "capture_point": fs.capture_point}
    return encode_container("feature_set", [("data", fs.data)], meta)


def features_from_bytes(blob):
    h, t = decode_container(blob, "feature_set")
    return FeatureSet(data=t["data"], weight_name=h["weight_name"], layer_id=h["layer_id"],
                      model_hash=h["model_hash"], capture_point=h["capture_point"])


def _projector_meta(p):
    return {"algorithm": p.algorithm, "centered": p.centered, "seen": int(p.seen),
            "fine_tuned": p.fine_tuned, "model_hash": p.model_hash,
            "weight_name": p.weight_name, "stats": p.stats}


def _projector_from(meta, u, mean):
    return Projector(u=u, mean=mean, algorithm=meta["algorithm"], centered=meta["centered"],
                     seen=meta["seen"], fine_tuned=meta["fine_tuned"],
                     model_hash=meta["model_hash"], weight_name=meta["weight_name"],
                     stats=meta["stats"])


def projector_to_bytes(p):
    return encode_container("projector", [("u", p.u), ("mean", p.mean)], _projector_meta(p))


def projector_from_bytes(blob):
    h, t = decode_container(blob, "projector")
    return _projector_from(h, t["u"], t["mean"])


def adapters_to_bytes(adapted, seeds=None):
    """All adapters of an :class:`AdaptedModel`, bound to its host by hash."""
    tensors, layers = [], {}
    # sorted so the tensor order matches the (sorted) JSON header
    for name in sorted(adapted.adapters):
        ad = adapted.adapters[name]
        info = {"variant": ad.variant, "alpha": ad.alpha, "proj_trainable": ad.proj_trainable}
        if isinstance(ad, IpaAdapter):
            info["projector"] = _projector_meta(ad.proj)
            tensors.append((f"{name}/mean", ad.proj.mean))
        for pname, arr in ad.params().items():
            tensors.append((f"{name}/{pname}", arr))
        layers[name] = info
    meta = {"model_hash": adapted.model.model_hash, "variant": adapted.variant,
            "proj_trainable": adapted.proj_trainable, "layers": layers,
            "seeds": seeds if seeds is not None else adapted.seeds}
    return encode_container("adapter", tensors, meta)


def adapters_from_bytes(blob):
    """Returns ``(adapters, header)``; bind them with :func:`bind_adapters`."""
    h, t = decode_container(blob, "adapter")
    adapters = {}
    for name, info in h["layers"].items():
        alpha, pt = info["alpha"], info["proj_trainable"]
        if info["variant"] == "lora":
            adapters[name] = LoraAdapter(b=t[f"{name}/b"], alpha=alpha, proj_trainable=pt,
                                         a=t[f"{name}/a"])
        elif info["variant"] == "dora":
            adapters[name] = DoraAdapter(m=t[f"{name}/m"], a=t[f"{name}/a"], b=t[f"{name}/b"],
                                         alpha=alpha, proj_trainable=pt)
        elif info["variant"] == "ipa":
            proj = _projector_from(info["projector"], t[f"{name}/u"], t[f"{name}/mean"])
            adapters[name] = IpaAdapter(b=t[f"{name}/b"], alpha=alpha, proj_trainable=pt,
                                        proj=proj)
        else:
            raise FormatError(f"unknown adapter variant {info['variant']!r}")
    return adapters, h


def bind_adapters(model, blob):
    """Load an adapter container onto ``model``, refusing a foreign host."""
    from .nanomodel.adapted import AdaptedModel

    adapters, h = adapters_from_bytes(blob)
    if h["model_hash"] != model.model_hash:
        raise BindingError("adapter container was trained on a different model "
                           f"({h['model_hash'][:12]} != {model.model_hash[:12]})")
    missing = set(model.config.target_names()) ^ set(adapters)
    if missing:
        raise BindingError(f"adapter layers do not match the model targets: {sorted(missing)}")
    for name, ad in adapters.items():
        w = model.linears[name]
        down = ad.proj.u if isinstance(ad, IpaAdapter) else ad.a
        if ad.b.shape[0] != w.d_out or down.shape[1] != w.d_in:
            raise BindingError(f"adapter for {name} has the wrong shape")
    adapters = {name: adapters[name] for name in model.config.target_names()}
    return AdaptedModel(model=model, adapters=adapters, variant=h["variant"],
                        proj_trainable=h["proj_trainable"], seeds=h["seeds"])


def model_to_bytes(model, seeds=None):
    from .nanomodel.transformer import param_shapes

    tensors = [(name, model.param(name)) for name, _ in param_shapes(model.config)]
    meta = {"config": model.config.to_dict(), "model_hash": model.model_hash,
            "seeds": seeds if seeds is not None else model.seeds}
    return encode_container("model", tensors, meta)


def model_from_bytes(blob):
    from .nanomodel.config import ModelConfig
    from .nanomodel.transformer import TinyTransformer

    h, t = decode_container(blob, "model")
    model = TinyTransformer(ModelConfig(**h["config"]), t)
    if h.get("model_hash") and h["model_hash"] != model.model_hash:
        raise FormatError("model payload does not match its recorded hash")
    model.seeds = h["seeds"]
    return model


def adam_state_to_bytes(state, model_hash=""):
    tensors = [(f"m/{k}", state.m[k]) for k in sorted(state.m)]
    tensors += [(f"v/{k}", state.v[k]) for k in sorted(state.v)]
    return encode_container("adam_state", tensors, {"t": state.t, "model_hash": model_hash})


def adam_state_from_bytes(blob):
    h, t = decode_container(blob, "adam_state")
    m = {k[2:]: v for k, v in t.items() if k.startswith("m/")}
    v = {k[2:]: a for k, a in t.items() if k.startswith("v/")}
    return AdamState(m=m, v=v, t=h["t"])


# file helpers

def save(path, blob):
    return atomic_write(path, blob)


def load(path):
    return Path(path).read_bytes()


__all__ = [
    "MAGIC", "adam_state_from_bytes", "adam_state_to_bytes",
    "adapters_from_bytes", "adapters_to_bytes", "atomic_write", "bind_adapters",
    "decode_container", "encode_container", "features_from_bytes", "features_to_bytes",
    "file_digest", "load", "model_from_bytes", "model_to_bytes", "output_lock",
    "projector_from_bytes", "projector_to_bytes", "save", "write_manifest",
]
