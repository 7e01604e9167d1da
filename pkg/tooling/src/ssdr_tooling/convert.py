"""One-off converter: public VGG16 checkpoint -> the engine's weight container.

Produces exactly the 14 prefix tensors (conv1_1 .. conv3_3, weight layout
[C_out, C_in, 3, 3], float32 little-endian) and prints per-tensor shapes
plus a content checksum of the written file.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import container_io


class ConversionError(Exception):
    pass


def _prefix_shapes() -> dict:
    widths = [(3, 64), (64, 64), (64, 128), (128, 128), (128, 256), (256, 256), (256, 256)]
    names = ["conv1_1", "conv1_2", "conv2_1", "conv2_2", "conv3_1", "conv3_2", "conv3_3"]
    shapes = {}
    for name, (c_in, c_out) in zip(names, widths):
        shapes[f"{name}.weight"] = (c_out, c_in, 3, 3)
        shapes[f"{name}.bias"] = (c_out,)
    return shapes


@dataclass
class ConversionManifest:
    source_name: str
    mapping: dict  # source state-dict key -> target tensor name
    shapes: dict = field(default_factory=_prefix_shapes)
    sha256: str | None = None  # full digest when known
    sha256_prefix: str | None = None  # torch hub convention: filename carries the first 8 hex digits


def torchvision_vgg16_manifest() -> ConversionManifest:
    """The pinned public checkpoint: torchvision's vgg16-397923af.pth. The
    filename suffix is the checkpoint's sha256 prefix, which is the only part
    of the digest the distribution format guarantees."""
    feature_indices = (0, 2, 5, 7, 10, 12, 14)
    names = ("conv1_1", "conv1_2", "conv2_1", "conv2_2", "conv3_1", "conv3_2", "conv3_3")
    mapping = {}
    for idx, name in zip(feature_indices, names):
        mapping[f"features.{idx}.weight"] = f"{name}.weight"
        mapping[f"features.{idx}.bias"] = f"{name}.bias"
    return ConversionManifest(
        source_name="vgg16-397923af.pth",
        mapping=mapping,
        sha256_prefix="397923af",
    )


def convert_weights(source_path, manifest: ConversionManifest, out_path) -> dict:
    """Converts the checkpoint losslessly; returns the written tensors."""
    import torch

    blob = Path(source_path).read_bytes()
    digest = hashlib.sha256(blob).hexdigest()
    if manifest.sha256 is not None and digest != manifest.sha256:
        raise ConversionError(
            f"{source_path}: sha256 {digest} does not match manifest {manifest.sha256}"
        )
    if manifest.sha256 is None and manifest.sha256_prefix is not None \
            and not digest.startswith(manifest.sha256_prefix):
        raise ConversionError(
            f"{source_path}: sha256 {digest[:8]}... does not match the pinned "
            f"prefix {manifest.sha256_prefix}"
        )
    state = torch.load(source_path, map_location="cpu", weights_only=True)
    if hasattr(state, "state_dict"):
        state = state.state_dict()

    out = {}
    for src_key in manifest.mapping:
        dst = manifest.mapping[src_key]
        if src_key not in state:
            raise ConversionError(f"source checkpoint is missing tensor {src_key!r}")
        tensor = state[src_key]
        arr = tensor.detach().cpu().numpy()
        if arr.dtype != np.float32:
            raise ConversionError(f"{src_key}: expected float32, got {arr.dtype}")
        expected = manifest.shapes[dst]
        if tuple(arr.shape) != expected:
            raise ConversionError(
                f"{src_key} -> {dst}: shape {tuple(arr.shape)}, expected {expected}"
            )
        out[dst] = arr
    # canonical order: block by block, weight before bias
    ordered = {name: out[name] for name in manifest.shapes}
    container_io.write(out_path, ordered)
    written = hashlib.sha256(Path(out_path).read_bytes()).hexdigest()
    total = 0
    for name, arr in ordered.items():
        total += arr.size
        print(f"{name:16s} {list(arr.shape)}")
    print(f"{total} parameters -> {out_path} (sha256 {written[:16]})")
    return ordered
