"""Cross-stack verification: run the VGG16 prefix in torch and compare it to
the engine's feature-map output on the same image.

The engine is driven through its command-line interface (`ssdr featmaps
--raw`), so this check exercises the exact artifact a user runs, not a
private API.
"""

from __future__ import annotations

import subprocess
import tempfile
from pathlib import Path

import numpy as np

from . import container_io


class ReferenceUnavailable(Exception):
    pass


class VerificationError(Exception):
    pass


_PREFIX = (
    ("conv1_1", 3, 64), ("conv1_2", 64, 64), ("pool", 0, 0),
    ("conv2_1", 64, 128), ("conv2_2", 128, 128), ("pool", 0, 0),
    ("conv3_1", 128, 256), ("conv3_2", 256, 256), ("conv3_3", 256, 256), ("pool", 0, 0),
)


def _torch():
    try:
        import torch
        import torch.nn.functional as F
    except ImportError as e:  # pragma: no cover - reference stack present in CI
        raise ReferenceUnavailable(f"torch not importable: {e}") from e
    return torch, F


def preprocess_image(image_u8: np.ndarray) -> np.ndarray:
    """The engine's documented preprocessing, replicated operation for
    operation so both stacks see a bit-identical input: subtract the image's
    own mean (float64 accumulate), half-pixel bilinear resize
    (s = (d + 0.5) * 200/224 - 0.5, clamped), replicate to three channels."""
    g = image_u8.astype(np.float32)
    g -= np.float32(g.mean(dtype=np.float64))
    size, dst = g.shape[0], 224
    coords = np.clip((np.arange(dst) + 0.5) * (size / dst) - 0.5, 0.0, size - 1.0)
    i0 = np.floor(coords).astype(np.int64)
    i1 = np.minimum(i0 + 1, size - 1)
    frac = (coords - i0).astype(np.float32)
    rows = g[i0] * (1.0 - frac)[:, None] + g[i1] * frac[:, None]
    out = rows[:, i0] * (1.0 - frac)[None, :] + rows[:, i1] * frac[None, :]
    return np.repeat(out.astype(np.float32)[None], 3, axis=0)


def reference_prefix_output(tensors: dict, image_u8: np.ndarray) -> np.ndarray:
    """Torch forward of the prefix on one 200x200 grayscale image."""
    torch, F = _torch()
    with torch.no_grad():
        x = torch.from_numpy(preprocess_image(image_u8))[None]
        for name, _, _ in _PREFIX:
            if name == "pool":
                x = F.max_pool2d(x, kernel_size=2, stride=2)
                continue
            w = torch.from_numpy(np.array(tensors[f"{name}.weight"]))
            b = torch.from_numpy(np.array(tensors[f"{name}.bias"]))
            x = F.relu(F.conv2d(x, w, b, stride=1, padding=1))
        return x[0].numpy()


def engine_prefix_output(container_path, image_path, ssdr_cmd="ssdr") -> np.ndarray:
    """Runs the engine CLI and reads back the raw pool3 activation."""
    with tempfile.TemporaryDirectory() as tmp:
        raw = Path(tmp) / "featmaps.ssdr"
        cmd = [ssdr_cmd, "featmaps", "--weights", str(container_path),
               "--image", str(image_path), "--pool", "3",
               "--out", str(Path(tmp) / "maps"), "--raw", str(raw)]
        proc = subprocess.run(cmd, capture_output=True, text=True)
        if proc.returncode != 0:
            raise VerificationError(
                f"engine run failed (exit {proc.returncode}): {proc.stderr.strip()}"
            )
        return np.array(container_io.read(raw)["pool3"])


def verify_against_reference(container_path, image_path, ssdr_cmd="ssdr") -> float:
    """Returns the max absolute deviation between the torch reference and the
    engine on the same preprocessed input."""
    from PIL import Image

    tensors = container_io.read(container_path)
    with Image.open(image_path) as im:
        image = np.asarray(im.convert("L")).astype(np.uint8)
    ours = engine_prefix_output(container_path, image_path, ssdr_cmd=ssdr_cmd)
    ref = reference_prefix_output(tensors, image)
    if ours.shape != ref.shape:
        raise VerificationError(f"shape mismatch: engine {ours.shape} vs reference {ref.shape}")
    return float(np.abs(ours - ref).max())
