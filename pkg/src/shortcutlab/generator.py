"""Synthetic radiograph-like dataset generator with controllable signals.

Each patient gets a severity latent that drives two correlated visual
manifestations: a central bright ellipse whose width scales with severity
(structural signal) and scattered small opacities whose count scales with it
(textural signal). One of the two, chosen by ``target_signal``, defines the
target label; the other defines the source label, so the two tasks share
features without being identical. Independent patient attributes optionally
leave a visual trace: a bright rectangular marker or a peripheral
soft-tissue intensity profile.

Labels and attributes are statistically independent unless a correlation is
requested downstream. Generation is deterministic given the seed, per patient
and per image.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .core import ImageRecord, Manifest, save_manifest

__all__ = ["GeneratorConfig", "generate", "write_dataset", "AUX_TASK_NAMES"]

TARGET_SIGNALS = ("ellipse_size", "texture_density")
ATTRIBUTE_SIGNALS = ("marker", "intensity_profile", "none")
AUX_TASK_NAMES = ("broad_torso", "many_ribs", "tall_lungs")

_DEFAULT_ATTR_NAME = {"marker": "marker", "intensity_profile": "bodyfat", "none": "attr"}


@dataclass(frozen=True)
class GeneratorConfig:
    """Knobs for the synthetic population.

    ``second_image_prob`` mirrors a cohort averaging slightly more than one
    image per patient. ``heart_amp`` / ``texture_amp`` scale the visual
    strength of the two disease signals; ``noise_std`` must stay positive so
    no signal is trivially separable from raw pixels.
    """

    n_patients: int
    image_side: int = 64
    second_image_prob: float = 0.07
    target_signal: str = "ellipse_size"
    attribute_signal: str = "marker"
    attribute_name: str | None = None
    attribute_rate: float = 0.3
    target_task: str = "chf"
    source_task: str = "pna"
    aux_tasks: int = 0
    aux_missing_rate: float = 0.1
    noise_std: float = 0.04
    noise_jitter: float = 0.15
    latent_jitter: float = 0.18
    heart_amp: float = 1.0
    texture_amp: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_patients < 0:
            raise ValueError("n_patients must be >= 0")
        if self.image_side < 16:
            raise ValueError("image_side must be >= 16")
        if self.target_signal not in TARGET_SIGNALS:
            raise ValueError(f"target_signal must be one of {TARGET_SIGNALS}")
        if self.attribute_signal not in ATTRIBUTE_SIGNALS:
            raise ValueError(f"attribute_signal must be one of {ATTRIBUTE_SIGNALS}")
        if not 0 < self.attribute_rate < 1:
            raise ValueError("attribute_rate must be in (0, 1)")
        if self.noise_std <= 0:
            raise ValueError("noise_std must be > 0 (signals must not be noise-free)")
        if not 0 <= self.second_image_prob < 1:
            raise ValueError("second_image_prob must be in [0, 1)")
        if not 0 <= self.aux_tasks <= len(AUX_TASK_NAMES):
            raise ValueError(f"aux_tasks must be in [0, {len(AUX_TASK_NAMES)}]")

    @property
    def resolved_attribute_name(self) -> str:
        return self.attribute_name or _DEFAULT_ATTR_NAME[self.attribute_signal]

    def declared_tasks(self) -> list:
        return [self.target_task, self.source_task] + list(AUX_TASK_NAMES[: self.aux_tasks])


def generate(config: GeneratorConfig):
    """Build a manifest plus the ground-truth latent record.

    Returns ``(manifest, truth)`` where ``truth`` maps patients to their
    latents, labels, attribute and per-image rendering details (noise scale
    and marker box, when drawn).
    """
    records = []
    truth = {"config": asdict(config), "patients": {}}
    attr_name = config.resolved_attribute_name
    for idx in range(config.n_patients):
        rng = np.random.default_rng([config.seed, idx])
        lat = _draw_latents(config, rng)
        pid = f"p{idx:05d}"
        sid = f"s{idx:05d}"
        n_images = 1 + int(rng.uniform() < config.second_image_prob)
        labels = dict(lat["labels"])
        if config.aux_tasks:
            for name in AUX_TASK_NAMES[: config.aux_tasks]:
                labels[name] = lat["aux_labels"][name]
        ptruth = {
            "severity": lat["severity"],
            "z_struct": lat["z_struct"],
            "z_text": lat["z_text"],
            "labels": labels,
            "attribute": lat["attribute"],
            "images": {},
        }
        for k in range(n_images):
            img_rng = np.random.default_rng([config.seed, idx, k])
            pixels, marker_box, noise_scale = _render(config, lat, img_rng)
            image_id = f"{pid}_i{k}"
            rec_labels = dict(lat["labels"])
            if config.aux_tasks:
                for name in AUX_TASK_NAMES[: config.aux_tasks]:
                    v = lat["aux_labels"][name]
                    if img_rng.uniform() < config.aux_missing_rate:
                        v = None
                    rec_labels[name] = v
            records.append(
                ImageRecord(
                    image_id=image_id,
                    patient_id=pid,
                    study_id=sid,
                    pixels=pixels,
                    labels=rec_labels,
                    attributes={attr_name: lat["attribute"]},
                )
            )
            ptruth["images"][image_id] = {
                "noise_scale": noise_scale,
                "marker_box": marker_box,
            }
        truth["patients"][pid] = ptruth
    manifest = Manifest(records, config.declared_tasks(), [attr_name])
    manifest.validate()
    return manifest, truth


def _draw_latents(config: GeneratorConfig, rng: np.random.Generator) -> dict:
    z = rng.uniform()
    z_struct = float(np.clip(z + rng.normal(0.0, config.latent_jitter), 0.0, 1.0))
    z_text = float(np.clip(z + rng.normal(0.0, config.latent_jitter), 0.0, 1.0))
    if config.target_signal == "ellipse_size":
        y_t, y_s = int(z_struct > 0.5), int(z_text > 0.5)
    else:
        y_t, y_s = int(z_text > 0.5), int(z_struct > 0.5)
    attribute = int(rng.uniform() < config.attribute_rate)
    aux = {
        "broad_torso": rng.uniform(),
        "many_ribs": rng.uniform(),
        "tall_lungs": rng.uniform(),
    }
    return {
        "severity": float(z),
        "z_struct": z_struct,
        "z_text": z_text,
        "labels": {config.target_task: y_t, config.source_task: y_s},
        "attribute": attribute,
        "aux": aux,
        "aux_labels": {k: int(v > 0.5) for k, v in aux.items()},
    }


# ---------------------------------------------------------------------------
# rendering


def _soft_ellipse(Y, X, cy, cx, ry, rx, sharpness=18.0):
    d = ((Y - cy) / ry) ** 2 + ((X - cx) / rx) ** 2
    return 1.0 / (1.0 + np.exp(np.clip((d - 1.0) * sharpness, -60, 60)))


def _render(config: GeneratorConfig, lat: dict, rng: np.random.Generator):
    d = config.image_side
    ax = np.linspace(-1.0, 1.0, d)
    Y, X = np.meshgrid(ax, ax, indexing="ij")
    jit = lambda s: float(rng.normal(0.0, s))  # noqa: E731 - per-image geometry jitter

    aux = lat["aux"]
    torso_rx = 0.50 + 0.14 * aux["broad_torso"] + jit(0.01)
    lung_ry = 0.36 + 0.10 * aux["tall_lungs"] + jit(0.01)
    lung_cx = 0.24 + 0.07 * aux["broad_torso"]

    img = np.full((d, d), 0.12)
    img += 0.30 * _soft_ellipse(Y, X, 0.05 + jit(0.01), jit(0.01), 1.05, torso_rx)
    lungs = _soft_ellipse(Y, X, -0.18 + jit(0.01), -lung_cx + jit(0.01), lung_ry, 0.19) + _soft_ellipse(
        Y, X, -0.18 + jit(0.01), lung_cx + jit(0.01), lung_ry, 0.19
    )
    lungs = np.clip(lungs, 0.0, 1.0)
    img -= 0.22 * lungs

    n_ribs = 4 + int(round(3 * aux["many_ribs"]))
    top, bottom = -0.18 - lung_ry, -0.18 + lung_ry
    for i in range(n_ribs):
        y_i = top + (bottom - top) * (i + 0.5) / n_ribs + jit(0.004)
        band = np.exp(-(((Y - y_i) / 0.030) ** 2))
        img += 0.05 * band * lungs

    heart_rx = 0.13 * (1.0 + config.heart_amp * lat["z_struct"]) + jit(0.004)
    img += 0.30 * _soft_ellipse(Y, X, 0.30 + jit(0.01), 0.07 + jit(0.01), 0.30, heart_rx)

    n_blobs = int(round(2 + 16 * lat["z_text"]))
    for _ in range(n_blobs):
        side = -1.0 if rng.uniform() < 0.5 else 1.0
        by = -0.18 + lung_ry * 0.8 * rng.uniform(-1, 1)
        bx = side * lung_cx + 0.14 * rng.uniform(-1, 1)
        sig = rng.uniform(0.03, 0.06)
        img += 0.10 * config.texture_amp * np.exp(-(((Y - by) ** 2 + (X - bx) ** 2) / (2 * sig**2)))

    marker_box = None
    if lat["attribute"] == 1 and config.attribute_signal == "marker":
        mh, mw = max(4, round(d * 0.14)), max(3, round(d * 0.11))
        r0 = int((0.18 + 0.12 * rng.uniform()) * d)
        c0 = int((0.58 + 0.12 * rng.uniform()) * d)
        r0 = min(r0, d - mh - 1)
        c0 = min(c0, d - mw - 1)
        img[r0 : r0 + mh, c0 : c0 + mw] += 0.75
        marker_box = [int(r0), int(c0), int(mh), int(mw)]
    elif lat["attribute"] == 1 and config.attribute_signal == "intensity_profile":
        outer = _soft_ellipse(Y, X, 0.05, 0.0, 1.08, torso_rx * 1.14)
        inner = _soft_ellipse(Y, X, 0.05, 0.0, 0.98, torso_rx * 0.82)
        img += 0.14 * np.clip(outer - inner, 0.0, 1.0)

    noise_scale = float(config.noise_std * rng.uniform(1.0 - config.noise_jitter, 1.0 + config.noise_jitter))
    img += rng.normal(0.0, noise_scale, size=(d, d))
    return np.clip(img, 0.0, 1.0), marker_box, noise_scale


def write_dataset(manifest: Manifest, truth: dict, out_dir, bit_depth: int = 8) -> None:
    """Persist manifest CSV + PNG images + ground-truth latents JSON."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_manifest(manifest, out_dir / "manifest.csv", out_dir / "images", bit_depth=bit_depth)
    with open(out_dir / "latents.json", "w") as fh:
        json.dump(truth, fh, indent=2, sort_keys=True)
