"""Synthetic face-brightness datasets with a planted brightness effect.

Each subject gets a base skin brightness drawn from its group's distribution;
each image jitters that brightness. With ``z = (b - peak) / spread`` and
``q = floor + (1 - floor) * exp(-z**2 / 2)`` an image's embedding is

    q * identity  +  shared * sign(z) * min(|z|, z_cap)**power * u  +  noise * n

normalized to unit length, where ``u`` is one direction common to every image
and ``n`` is per-image noise. Near ``peak`` the identity dominates. Toward
either extreme the identity fades and the shared term grows, pulling
same-side images together (higher impostor similarity) and pushing
opposite-side images apart. The skin texture follows the same curve: pixel
spread is ``texture_min + texture_gain * q``, so BIM also peaks at ``peak``.

Images are small grayscale PNGs with a matching parsing label map in the
default 19-class convention of :mod:`facelight.ingest`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .ingest import ImageRecord, write_embeddings, write_manifest

IMAGE_SIZE = 32


@dataclass
class SyntheticConfig:
    # group -> (mean, sd) of subject base brightness
    groups: dict[str, tuple[float, float]] = field(
        default_factory=lambda: {
            "AAF": (155.0, 40.0),
            "AAM": (150.0, 40.0),
            "CF": (170.0, 40.0),
            "CM": (165.0, 40.0),
        }
    )
    subjects_per_group: int = 250
    images_per_subject: int = 5
    within_subject_sd: float = 10.0
    peak: float = 160.0
    spread: float = 45.0
    floor: float = 0.5
    shared: float = 0.135
    power: float = 2.0
    z_cap: float = 1.8
    noise: float = 0.6
    dim: int = 128
    texture_min: float = 4.0
    texture_gain: float = 22.0
    brightness_clip: tuple[float, float] = (8.0, 247.0)
    seed: int = 0


@dataclass
class SyntheticDataset:
    records: list[ImageRecord]
    brightness: np.ndarray  # latent per-image brightness
    embeddings: np.ndarray  # (n, dim) float32, unit rows


def information(b: np.ndarray, cfg: SyntheticConfig) -> np.ndarray:
    z = (np.asarray(b, dtype=np.float64) - cfg.peak) / cfg.spread
    return cfg.floor + (1 - cfg.floor) * np.exp(-0.5 * z * z)


def generate(cfg: SyntheticConfig, root: Path | str = ".") -> SyntheticDataset:
    """Draw subjects, brightness and embeddings; paths point under ``root``."""
    rng = np.random.default_rng(cfg.seed)
    root = Path(root)
    u = rng.standard_normal(cfg.dim)
    u /= np.linalg.norm(u)

    records, bright, embs = [], [], []
    for g in sorted(cfg.groups):
        mean, sd = cfg.groups[g]
        for s in range(cfg.subjects_per_group):
            subject = f"{g}_s{s:04d}"
            identity = rng.standard_normal(cfg.dim)
            identity /= np.linalg.norm(identity)
            base = rng.normal(mean, sd)
            for k in range(cfg.images_per_subject):
                b = float(np.clip(base + rng.normal(0, cfg.within_subject_sd), *cfg.brightness_clip))
                z = (b - cfg.peak) / cfg.spread
                q = float(information(b, cfg))
                n = rng.standard_normal(cfg.dim) / np.sqrt(cfg.dim)
                e = q * identity + cfg.shared * np.sign(z) * min(abs(z), cfg.z_cap) ** cfg.power * u + cfg.noise * n
                image_id = f"{subject}_{k:02d}"
                records.append(
                    ImageRecord(
                        image_id,
                        subject,
                        g,
                        root / "images" / f"{image_id}.png",
                        root / "masks" / f"{image_id}.png",
                        len(records),
                    )
                )
                bright.append(b)
                embs.append(e / np.linalg.norm(e))
    return SyntheticDataset(records, np.asarray(bright), np.asarray(embs, dtype=np.float32))


def face_template(size: int = IMAGE_SIZE) -> np.ndarray:
    """Label map of a frontal face in the default 19-class convention."""
    if size != IMAGE_SIZE:
        raise ValueError("template is drawn for 32x32 images")
    lab = np.zeros((size, size), dtype=np.uint8)
    yy, xx = np.mgrid[0:size, 0:size]
    lab[((yy - 17) / 12.5) ** 2 + ((xx - 15.5) / 10.0) ** 2 <= 1] = 1
    lab[0:5, 5:27] = 17
    lab[9, 9:14], lab[9, 18:23] = 2, 3
    lab[11:13, 9:14], lab[11:13, 18:23] = 4, 5
    lab[13:19, 14:18] = 10
    lab[22, 12:20], lab[23, 13:19], lab[24, 12:20] = 12, 11, 13
    lab[29:32, 12:20] = 14
    return lab


def render_image(b: float, labels: np.ndarray, cfg: SyntheticConfig, rng: np.random.Generator) -> np.ndarray:
    """Grayscale face whose skin pixels are centred on brightness ``b``."""
    spread = cfg.texture_min + cfg.texture_gain * float(information(b, cfg))
    img = np.full(labels.shape, 128.0)
    skin = labels == 1
    img[skin] = rng.normal(b, spread, size=int(skin.sum()))
    nose_bottom = np.flatnonzero((labels == 10).any(axis=1))[-1]
    beard = skin.copy()
    beard[: nose_bottom + 1] = False
    img[beard] -= 35  # darker below the nose; excluded from brightness
    img[labels == 17] = 25
    img[np.isin(labels, (2, 3))] = 40
    img[np.isin(labels, (4, 5))] = 60
    img[labels == 10] = b + 30
    img[np.isin(labels, (11, 12, 13))] = 0.7 * b
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def write_dataset(cfg: SyntheticConfig, out_dir: Path | str) -> dict[str, Path]:
    """Materialize images, label maps, manifest and embeddings under ``out_dir``."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    data = generate(cfg, out)
    labels = face_template()
    rng = np.random.default_rng(cfg.seed + 1)
    label_png = out / "masks" / "_template.png"
    Image.fromarray(labels).save(label_png)
    label_bytes = label_png.read_bytes()
    for r, b in zip(data.records, data.brightness):
        Image.fromarray(render_image(b, labels, cfg, rng)).save(r.image_path)
        r.mask_path.write_bytes(label_bytes)
    label_png.unlink()
    paths = {
        "manifest": out / "manifest.csv",
        "embeddings": out / "embeddings.bin",
        "ids": out / "embeddings.ids",
    }
    write_manifest(paths["manifest"], data.records)
    write_embeddings(paths["embeddings"], paths["ids"], data.embeddings, [r.image_id for r in data.records])
    return paths
