"""Binary containers and the command line.

Every artifact is an IPA1 container: magic, a little-endian u32 header
length, a sorted JSON header and a float64 payload. The same steps run from
the shell as ``ipakit <command>``; here they go through ``main`` in a
temporary directory, twice, to show byte-identical reruns.
"""

import json
import struct
import tempfile
from pathlib import Path

from ipakit.cli import main

TINY = {
    "model": {"vocab": 16, "d_model": 8, "n_layers": 1, "n_heads": 2, "d_ff": 16, "seq_len": 4,
              "n_classes": 3, "target_set": "qkv_mlp", "seed": 0},
    "host_train": {"steps": 20, "batch_size": 8, "warmup_steps": 2},
    "task": {"intrinsic_dim": 6, "n_train": 64, "n_eval": 32, "teacher_hidden": 8},
    "adapter": {"rank": 2},
    "train": {"steps": 12, "batch_size": 8, "warmup_steps": 2},
}


def ipakit(*argv):
    if main([str(a) for a in argv]) != 0:
        raise SystemExit(f"ipakit {argv[0]} failed")


def run_all(root):
    root.mkdir()
    cfg = root / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    ipakit("pretrain-host", "--config", cfg, "--out", root / "host.ipa")
    ipakit("collect", "--model", root / "host.ipa", "--config", cfg, "--out", root / "feats")
    feats = sorted((root / "feats").glob("*.features.ipa"))
    ipakit("pretrain-projector", "--features", *feats, "--dh", 2, "--out", root / "proj")
    ipakit("adapt", "--model", root / "host.ipa", "--config", cfg, "--variant", "ipa",
           "--projectors", root / "proj", "--out", root / "ipa")
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*.ipa"))}


with tempfile.TemporaryDirectory() as tmp:
    first = run_all(Path(tmp) / "a")
    second = run_all(Path(tmp) / "b")
    blob = first[Path("ipa/adapter.ipa")]
    (hlen,) = struct.unpack("<I", blob[4:8])
    header = json.loads(blob[8 : 8 + hlen])
    print("magic", blob[:4], "kind", header["kind"], "tensors", len(header["tensors"]))
    print("containers identical across reruns:", first == second, f"({len(first)} files)")
