"""Training corpus synthesis.

Each corpus record is a full-resolution procedural fingerprint rendered in
one of three visual styles, distorted and masked per acquisition, then
center-cropped and downsampled to the training resolution. The ridge
silhouette of the (undegraded) warped print serves as the spatial control
target so the pair (control, image) is pixel-aligned by construction.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from . import identityops, masterprint, promptgrammar, styleembed

CROP = 96          # center crop taken from the 256px render
TRAIN_SIZE = 32

# style name -> (acquisition, sensor, sensing)
STYLES = {
    "clean": ("rolled", "ink on stock paper", "FTIR optical"),
    "latent": ("latent", "crime scene", "FTIR optical"),
    "contactless": ("contactless", "smartphone", "direct-view optical"),
}
QUALITIES = ("low", "average", "high")


def render_style(image: np.ndarray, style: str, quality: str,
                 rng: np.random.Generator) -> np.ndarray:
    """Apply a visual style and quality level to a clean ridge render."""
    from scipy import ndimage

    img = np.asarray(image, float)
    q = {"low": 0, "average": 1, "high": 2}[quality]
    if style == "clean":
        out = img
        blur = (0.9, 0.5, 0.0)[q]
        noise = (0.08, 0.04, 0.01)[q]
    elif style == "latent":
        # smudged low-contrast impression over a textured background
        bg = ndimage.gaussian_filter(rng.standard_normal(img.shape), 6.0)
        bg = 0.75 + 0.12 * bg / max(bg.std(), 1e-9)
        out = 0.45 * img + 0.55 * bg
        blur = (1.4, 1.0, 0.7)[q]
        noise = (0.16, 0.10, 0.06)[q]
    elif style == "contactless":
        # soft optics, compressed contrast, smooth illumination ramp
        h, w = img.shape
        yy, xx = np.mgrid[0:h, 0:w]
        ramp = 0.08 * ((xx / w - 0.5) * rng.uniform(-1, 1)
                       + (yy / h - 0.5) * rng.uniform(-1, 1))
        out = 0.55 + 0.35 * (img - 0.5) + ramp
        blur = (1.6, 1.1, 0.8)[q]
        noise = (0.06, 0.04, 0.02)[q]
    else:
        raise ValueError(f"unknown style {style!r}")
    if blur > 0:
        out = ndimage.gaussian_filter(out, blur)
    if noise > 0:
        out = out + noise * rng.standard_normal(out.shape)
    return np.clip(out, 0.0, 1.0)


def center_crop(image: np.ndarray, size: int = CROP) -> np.ndarray:
    h, w = image.shape
    y0, x0 = (h - size) // 2, (w - size) // 2
    return image[y0:y0 + size, x0:x0 + size]


def downsample(image: np.ndarray, size: int = TRAIN_SIZE) -> np.ndarray:
    """Area-mean downsample; input side must be a multiple of `size`."""
    h, w = image.shape
    fy, fx = h // size, w // size
    assert fy * size == h and fx * size == w, (image.shape, size)
    return image.reshape(size, fy, size, fx).mean(axis=(1, 3))


def save_png(path, image: np.ndarray):
    arr = np.clip(np.asarray(image, float) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)


def load_png(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("L"), float) / 255.0


@dataclass
class CorpusRecord:
    identity: int
    impression: int
    seed: int
    pattern_class: str
    style: str
    prompt: dict
    image_path: str
    control_path: str
    mask_id: str
    grid_id: str
    minutiae: np.ndarray

    def to_json(self) -> str:
        d = {
            "identity": self.identity,
            "impression": self.impression,
            "seed": self.seed,
            "pattern_class": self.pattern_class,
            "style": self.style,
            "prompt": self.prompt,
            "image_path": self.image_path,
            "control_path": self.control_path,
            "mask_id": self.mask_id,
            "grid_id": self.grid_id,
            "minutiae": np.asarray(self.minutiae, float).round(3).tolist(),
        }
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "CorpusRecord":
        d = json.loads(line)
        d["minutiae"] = np.asarray(d["minutiae"], float)
        return cls(**d)


def spec_for(style: str, quality: str, pattern_class: str) -> promptgrammar.PromptSpec:
    acq, sensor, sensing = STYLES[style]
    return promptgrammar.PromptSpec(
        acquisition=acq, pattern_class=pattern_class, quality=quality,
        sensor=sensor, sensing=sensing,
        sensing_omitted=(sensor == "crime scene"))


def build_corpus(out_dir, n_identities: int, impressions: int, seed: int,
                 size: int = 256, progress=None) -> list[CorpusRecord]:
    """Write corpus/images/*.png and corpus/meta.jsonl; returns the records."""
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    rng = masterprint.make_rng(seed)
    masks = identityops.build_default_mask_bank((size, size), seed=seed + 1)
    grids = identityops.build_default_distortion_bank((size, size), seed=seed + 2)
    style_names = list(STYLES)

    records = []
    for ident in range(n_identities):
        cls = masterprint.CLASSES[ident % len(masterprint.CLASSES)]
        mp_seed = seed * 100003 + ident
        mp = masterprint.generate_masterprint(cls, mp_seed, size=size)
        base_minutiae = mp.minutiae
        for imp in range(impressions):
            style = style_names[(ident + imp) % len(style_names)]
            quality = QUALITIES[int(rng.integers(len(QUALITIES)))]
            spec = spec_for(style, quality, cls)
            acq = spec.acquisition

            gi, grid = grids.sample(acq, rng)
            fld = identityops.densify_grid(grid, (size, size))
            warped = identityops.apply_distortion(mp.image, fld)
            mi, mask = masks.sample(acq, rng)

            control_full = masterprint.binarize(warped) & mask
            target_full = render_style(warped, style, quality, rng)
            target_full = np.where(mask, target_full, 1.0)

            minutiae = identityops.displace_minutiae(base_minutiae, fld, (size, size))
            if len(minutiae):
                keep = mask[np.clip(minutiae[:, 1].astype(int), 0, size - 1),
                            np.clip(minutiae[:, 0].astype(int), 0, size - 1)]
                minutiae = minutiae[keep]

            stem = f"{ident:08x}_{imp:02d}"
            ipath = img_dir / f"{stem}.png"
            cpath = img_dir / f"{stem}_ctrl.png"
            save_png(ipath, downsample(center_crop(target_full)))
            save_png(cpath, downsample(center_crop(control_full.astype(float))))

            records.append(CorpusRecord(
                identity=ident, impression=imp, seed=mp_seed,
                pattern_class=cls, style=style,
                prompt=asdict(spec),
                image_path=str(ipath.relative_to(out_dir)),
                control_path=str(cpath.relative_to(out_dir)),
                mask_id=f"{acq}/{mi:02d}", grid_id=f"{acq}/{gi:02d}",
                minutiae=minutiae))
        if progress:
            progress(ident + 1, n_identities)

    with open(out_dir / "meta.jsonl", "w") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")
    identityops.save_banks(out_dir / "bank", masks, grids)
    return records


def load_corpus(out_dir) -> list[CorpusRecord]:
    out_dir = Path(out_dir)
    with open(out_dir / "meta.jsonl") as fh:
        return [CorpusRecord.from_json(line) for line in fh if line.strip()]


def corpus_tensors(out_dir, records, vocab, cache_path=None):
    """Load a corpus into training arrays: images and controls in [0,1],
    prompt specs, and cached style tokens per image."""
    out_dir = Path(out_dir)
    cache = styleembed.StyleCache(cache_path or out_dir / "styles" / "cache.bin")
    images, controls, specs, tokens = [], [], [], []
    for rec in records:
        img = load_png(out_dir / rec.image_path)
        ctl = load_png(out_dir / rec.control_path)
        spec = promptgrammar.PromptSpec(**rec.prompt)
        spec.validate(vocab)
        emb = cache.get_or_compute(img)
        tok = styleembed.style_tokens(emb)
        images.append(img)
        controls.append(ctl)
        specs.append(spec)
        tokens.append(tok.tokens)
    return (np.stack(images), np.stack(controls), specs,
            np.stack(tokens).astype(np.float32))
