"""Identity-preservation toolkit.

Ridge extraction (deterministic Gabor pipeline), acquisition-indexed
foreground masking, dense distortion grids built from sparse minutiae
displacements (affine + thin-plate radial basis), backward warping, and the
minutiae matcher used as the identity oracle throughout evaluation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage, signal
from scipy.interpolate import RBFInterpolator

from . import masterprint
from .masterprint import estimate_orientation, orientation_coherence, pixel_theta

ACQUISITIONS = ("rolled", "slap", "swipe", "contactless", "latent")
GRID_STEP = 16          # px between displacement-grid nodes
MAX_DISPLACEMENT = 24.0


class EmptyBank(KeyError):
    pass


class DegenerateConfiguration(ValueError):
    pass


@dataclass
class RidgeSilhouette:
    image: np.ndarray          # binary, ridge = True
    provenance: str = ""
    low_confidence: bool = False


@dataclass
class MinutiaeMatch:
    score: float
    pairs: list                # [(idx_a, idx_b), ...]
    transform: tuple           # (dx, dy, dtheta)


# ---------------------------------------------------------------------------
# ridge extraction

def _dominant_frequency(image: np.ndarray) -> float:
    """Radial FFT peak inside the plausible ridge band."""
    f = np.abs(np.fft.fftshift(np.fft.fft2(image - image.mean())))
    h, w = image.shape
    fy = np.fft.fftshift(np.fft.fftfreq(h))
    fx = np.fft.fftshift(np.fft.fftfreq(w))
    rr = np.hypot(fy[:, None], fx[None, :])
    band = (rr > 1 / 16) & (rr < 1 / 5)
    if not band.any():
        return 1 / 9
    idx = np.argmax(f * band)
    return float(rr.flat[idx])


def extract_ridge(image: np.ndarray, provenance: str = "") -> RidgeSilhouette:
    """Style-free binary ridge silhouette of a grayscale fingerprint.

    Local contrast normalization, block orientation/frequency estimation,
    oriented Gabor enhancement, per-block mean threshold.
    """
    img = image.astype(np.float64)
    mean = ndimage.uniform_filter(img, 15)
    std = np.sqrt(np.maximum(ndimage.uniform_filter(img ** 2, 15) - mean ** 2, 1e-6))
    norm = (img - mean) / (std + 1e-3)

    theta = estimate_orientation(img)
    fld = masterprint.OrientationField(theta, np.ones_like(theta), img.shape)
    theta_pix = pixel_theta(fld)
    freq = _dominant_frequency(img)
    freq = float(np.clip(freq, 1 / 14, 1 / 5))

    nbins = masterprint.N_ORIENT_BINS
    sigma = 0.5 / freq
    r = int(round(1.0 / freq))
    y, x = np.mgrid[-r:r + 1, -r:r + 1]
    env = np.exp(-(x ** 2 + y ** 2) / (2 * sigma ** 2))
    responses = []
    for k in range(nbins):
        tn = k * np.pi / nbins + np.pi / 2
        kern = env * np.cos(2 * np.pi * freq * (x * np.cos(tn) + y * np.sin(tn)))
        kern /= np.abs(kern).sum()
        responses.append(signal.fftconvolve(norm, kern, mode="same"))
    responses = np.stack(responses)
    bins = np.mod(np.round(theta_pix / np.pi * nbins).astype(int), nbins)
    enhanced = np.take_along_axis(responses, bins[None], axis=0)[0]

    # ridges are dark in the input, so enhanced ridge response is negative
    silhouette = enhanced < ndimage.uniform_filter(enhanced, 15)
    coh = orientation_coherence(img)
    low = bool(np.mean(coh) < 0.2)
    return RidgeSilhouette(silhouette, provenance=provenance, low_confidence=low)


# ---------------------------------------------------------------------------
# mask / distortion banks

@dataclass
class MaskBank:
    masks: dict = field(default_factory=dict)  # acquisition -> [binary arrays]

    def sample(self, acquisition: str, rng: np.random.Generator):
        entries = self.masks.get(acquisition, [])
        if not entries:
            raise EmptyBank(acquisition)
        i = int(rng.integers(len(entries)))
        return i, entries[i]


@dataclass
class DistortionBank:
    grids: dict = field(default_factory=dict)  # acquisition -> [(gh, gw, 2) arrays]

    def sample(self, acquisition: str, rng: np.random.Generator):
        entries = self.grids.get(acquisition, [])
        if not entries:
            raise EmptyBank(acquisition)
        i = int(rng.integers(len(entries)))
        return i, entries[i]


def _ellipse_mask(shape, cx, cy, rx, ry):
    h, w = shape
    ys, xs = np.mgrid[0:h, 0:w]
    return ((xs - cx) / rx) ** 2 + ((ys - cy) / ry) ** 2 <= 1.0


def build_default_mask_bank(shape=(256, 256), per_type: int = 4,
                            seed: int = 0) -> MaskBank:
    """Procedural masks: near-full rolled, elliptical slap, narrow swipe,
    soft contactless ellipse, fragmentary latent blobs."""
    rng = masterprint.make_rng(seed)
    h, w = shape
    bank = MaskBank({a: [] for a in ACQUISITIONS})
    for _ in range(per_type):
        cx = w / 2 + rng.uniform(-6, 6)
        cy = h / 2 + rng.uniform(-6, 6)
        bank.masks["rolled"].append(
            _ellipse_mask(shape, cx, cy, w * 0.48, h * 0.49))
        bank.masks["slap"].append(
            _ellipse_mask(shape, cx, cy, w * rng.uniform(0.30, 0.36),
                          h * rng.uniform(0.36, 0.42)))
        bank.masks["swipe"].append(
            _ellipse_mask(shape, cx, cy, w * rng.uniform(0.20, 0.26),
                          h * rng.uniform(0.42, 0.47)))
        bank.masks["contactless"].append(
            _ellipse_mask(shape, cx, cy, w * rng.uniform(0.34, 0.40),
                          h * rng.uniform(0.38, 0.44)))
        # latent: blobby fragments inside a slap-sized ellipse
        noise = ndimage.gaussian_filter(rng.standard_normal(shape), 18)
        frag = noise > np.percentile(noise, 55)
        bank.masks["latent"].append(
            frag & _ellipse_mask(shape, cx, cy, w * 0.38, h * 0.42))
    return bank


def synth_smooth_field(shape, amplitude: float, rng: np.random.Generator) -> np.ndarray:
    """Dense smooth (H, W, 2) displacement field with max norm ~ amplitude."""
    h, w = shape
    coarse = rng.standard_normal((2, 5, 5))
    f = np.stack([ndimage.zoom(c, (h / 5, w / 5), order=3) for c in coarse], axis=-1)
    f = ndimage.gaussian_filter(f, (h / 12, w / 12, 0))
    norm = np.abs(f).max()
    if norm > 0:
        f = f / norm * amplitude
    return f


DEFAULT_DISTORTION_AMPLITUDE = {
    "rolled": 4.0, "slap": 6.0, "swipe": 9.0, "contactless": 5.0, "latent": 10.0,
}


def build_default_distortion_bank(shape=(256, 256), per_type: int = 4,
                                  seed: int = 1, site_sets=None) -> DistortionBank:
    """Grids fit from sparse displacements of a smooth synthetic field,
    sampled at minutiae-like sites (matched genuine-pair displacements at
    desk scale)."""
    rng = masterprint.make_rng(seed)
    h, w = shape
    bank = DistortionBank({a: [] for a in ACQUISITIONS})
    for acq in ACQUISITIONS:
        amp = DEFAULT_DISTORTION_AMPLITUDE[acq]
        for _ in range(per_type):
            dense = synth_smooth_field(shape, amp, rng)
            if site_sets:
                sites = site_sets[int(rng.integers(len(site_sets)))]
            else:
                sites = np.column_stack([rng.uniform(10, w - 10, 30),
                                         rng.uniform(10, h - 10, 30)])
            disp = np.stack([dense[int(y), int(x)] for x, y in sites])
            pairs = [((x, y), (x + d[0], y + d[1]))
                     for (x, y), d in zip(sites, disp)]
            bank.grids[acq].append(build_distortion_grid(pairs, shape))
    return bank


# ---------------------------------------------------------------------------
# distortion grids

def build_distortion_grid(paired_minutiae, shape=(256, 256),
                          grid_step: int = GRID_STEP) -> np.ndarray:
    """Dense displacement grid from sparse point correspondences.

    Thin-plate-spline interpolation (affine polynomial term + radial basis
    residuals); exact at the input sites, exact for purely affine data.
    Returns a (gh, gw, 2) array of (dx, dy) at `grid_step` px resolution.
    """
    pairs = list(paired_minutiae)
    if len(pairs) < 3:
        raise DegenerateConfiguration("need >= 3 correspondences")
    src = np.array([p[0] for p in pairs], float)
    dst = np.array([p[1] for p in pairs], float)
    if len(np.unique(src.round(3), axis=0)) < len(src):
        raise DegenerateConfiguration("duplicate source points")
    centered = src - src.mean(0)
    if np.linalg.matrix_rank(centered, tol=1e-6) < 2:
        raise DegenerateConfiguration("collinear source points")
    disp = dst - src
    h, w = shape
    gh, gw = h // grid_step + 1, w // grid_step + 1
    gy, gx = np.mgrid[0:gh, 0:gw] * grid_step
    query = np.column_stack([gx.ravel(), gy.ravel()])
    if np.allclose(disp, 0.0):
        return np.zeros((gh, gw, 2))
    interp = RBFInterpolator(src, disp, kernel="thin_plate_spline", degree=1)
    grid = interp(query).reshape(gh, gw, 2)
    return np.clip(grid, -MAX_DISPLACEMENT, MAX_DISPLACEMENT)


def densify_grid(grid: np.ndarray, shape, grid_step: int = GRID_STEP) -> np.ndarray:
    """Bilinear upsample of grid nodes (spaced `grid_step` px) to pixels."""
    h, w = shape
    ys, xs = np.mgrid[0:h, 0:w].astype(float)
    coords = [ys / grid_step, xs / grid_step]
    return np.stack([
        ndimage.map_coordinates(grid[:, :, k], coords, order=1, mode="nearest")
        for k in range(2)], axis=-1)


def apply_distortion(image: np.ndarray, field_or_grid: np.ndarray,
                     background: float = 1.0) -> np.ndarray:
    """Backward bilinear warp; features move forward by ~+field."""
    if not np.all(np.isfinite(field_or_grid)):
        raise ValueError("displacement field contains non-finite values")
    h, w = image.shape
    if field_or_grid.shape[:2] != (h, w):
        dense = densify_grid(field_or_grid, (h, w))
    else:
        dense = field_or_grid
    ys, xs = np.mgrid[0:h, 0:w].astype(float)
    sample_x = xs - dense[:, :, 0]
    sample_y = ys - dense[:, :, 1]
    return ndimage.map_coordinates(image.astype(float), [sample_y, sample_x],
                                   order=1, mode="constant", cval=background)


def displace_minutiae(minutiae: np.ndarray, field_or_grid: np.ndarray,
                      shape) -> np.ndarray:
    """Forward-displace minutiae coordinates by the field (angle unchanged)."""
    if minutiae.size == 0:
        return minutiae.copy()
    dense = field_or_grid if field_or_grid.shape[:2] == tuple(shape) \
        else densify_grid(field_or_grid, shape)
    out = minutiae.copy()
    for i, (x, y) in enumerate(minutiae[:, :2]):
        row = int(np.clip(round(y), 0, shape[0] - 1))
        col = int(np.clip(round(x), 0, shape[1] - 1))
        out[i, 0] = x + dense[row, col, 0]
        out[i, 1] = y + dense[row, col, 1]
    return out


def apply_mask(silhouette: np.ndarray, acquisition: str, bank: MaskBank,
               rng: np.random.Generator):
    """AND the silhouette with a sampled acquisition mask.

    Returns (control image, mask id)."""
    mask_id, mask = bank.sample(acquisition, rng)
    return silhouette & mask, mask_id


# ---------------------------------------------------------------------------
# minutiae matching

def _angdiff(a, b):
    """Absolute difference of mod-2pi directions."""
    d = np.abs(a - b) % (2 * np.pi)
    return np.minimum(d, 2 * np.pi - d)


def _match_directed(A, B, pos_tol, ang_tol, rot_range, rot_step):
    best = (0, [], (0.0, 0.0, 0.0))
    ax, ay, aa = A[:, 0], A[:, 1], A[:, 2]
    bx, by, ba = B[:, 0], B[:, 1], B[:, 2]
    for dtheta in np.arange(-rot_range, rot_range + 1e-9, rot_step):
        c, s = np.cos(dtheta), np.sin(dtheta)
        rx = c * ax - s * ay
        ry = s * ax + c * ay
        ra = (aa + dtheta) % (2 * np.pi)
        ang_ok = _angdiff(ra[:, None], ba[None, :]) <= ang_tol
        if not ang_ok.any():
            continue
        ii, jj = np.where(ang_ok)
        tx = bx[jj] - rx[ii]
        ty = by[jj] - ry[ii]
        # coarse Hough vote over translations
        qx = np.round(tx / 8).astype(int)
        qy = np.round(ty / 8).astype(int)
        keys, counts = np.unique(np.stack([qx, qy]), axis=1, return_counts=True)
        order = np.argsort(counts)[::-1][:3]
        for k in order:
            sel = (qx == keys[0, k]) & (qy == keys[1, k])
            dx = float(np.mean(tx[sel]))
            dy = float(np.mean(ty[sel]))
            px = rx + dx
            py = ry + dy
            d2 = (px[:, None] - bx[None, :]) ** 2 + (py[:, None] - by[None, :]) ** 2
            cand = (d2 <= pos_tol ** 2) & ang_ok
            if not cand.any():
                continue
            # greedy one-to-one pairing, nearest first
            order2 = np.argsort(d2[cand])
            ci, cj = np.where(cand)
            used_a, used_b, pairs = set(), set(), []
            for idx in order2:
                i, j = ci[idx], cj[idx]
                if i in used_a or j in used_b:
                    continue
                used_a.add(i)
                used_b.add(j)
                pairs.append((int(i), int(j)))
            if len(pairs) > best[0]:
                best = (len(pairs), pairs, (dx, dy, float(dtheta)))
    return best


def match_minutiae(A: np.ndarray, B: np.ndarray, pos_tol: float = 12.0,
                   ang_tol: float = np.deg2rad(25.0),
                   rot_range: float = np.deg2rad(30.0),
                   rot_step: float = np.deg2rad(10.0)) -> MinutiaeMatch:
    """Rigid-alignment search plus greedy one-to-one pairing.

    Score = 2 |pairs| / (|A| + |B|), symmetric in its arguments.
    """
    if len(A) == 0 or len(B) == 0:
        return MinutiaeMatch(0.0, [], (0.0, 0.0, 0.0))
    n1, p1, t1 = _match_directed(A, B, pos_tol, ang_tol, rot_range, rot_step)
    n2, p2, t2 = _match_directed(B, A, pos_tol, ang_tol, rot_range, rot_step)
    if n2 > n1:
        n1 = n2
        p1 = [(j, i) for i, j in p2]
        dx, dy, dth = t2
        t1 = (-dx, -dy, -dth)
    score = 2.0 * n1 / (len(A) + len(B))
    return MinutiaeMatch(float(min(score, 1.0)), p1, t1)


# ---------------------------------------------------------------------------
# bank serialization

GRID_MAGIC = b"GRID1"


def save_grid(path, grid: np.ndarray):
    gh, gw, _ = grid.shape
    with open(path, "wb") as fh:
        fh.write(GRID_MAGIC)
        fh.write(np.array([gh, gw], dtype="<u2").tobytes())
        fh.write(grid.astype("<f4").tobytes())


def load_grid(path) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.read(5) != GRID_MAGIC:
            raise ValueError(f"{path}: not a GRID1 file")
        gh, gw = np.frombuffer(fh.read(4), dtype="<u2")
        data = np.frombuffer(fh.read(int(gh) * int(gw) * 8), dtype="<f4")
    return data.reshape(int(gh), int(gw), 2).astype(float)


def save_banks(directory, mask_bank: MaskBank, dist_bank: DistortionBank):
    from PIL import Image
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index = []
    for acq, masks in mask_bank.masks.items():
        for i, m in enumerate(masks):
            name = f"mask_{acq}_{i:02d}.png"
            Image.fromarray((m * 255).astype(np.uint8)).save(directory / name)
            index.append({"kind": "mask", "acquisition": acq, "id": i, "file": name})
    for acq, grids in dist_bank.grids.items():
        for i, g in enumerate(grids):
            name = f"grid_{acq}_{i:02d}.bin"
            save_grid(directory / name, g)
            index.append({"kind": "grid", "acquisition": acq, "id": i, "file": name})
    with open(directory / "index.jsonl", "w") as fh:
        for rec in index:
            fh.write(json.dumps(rec) + "\n")


def load_banks(directory):
    from PIL import Image
    directory = Path(directory)
    mask_bank = MaskBank({a: [] for a in ACQUISITIONS})
    dist_bank = DistortionBank({a: [] for a in ACQUISITIONS})
    with open(directory / "index.jsonl") as fh:
        for line in fh:
            rec = json.loads(line)
            if rec["kind"] == "mask":
                arr = np.array(Image.open(directory / rec["file"])) > 127
                mask_bank.masks[rec["acquisition"]].append(arr)
            else:
                dist_bank.grids[rec["acquisition"]].append(load_grid(directory / rec["file"]))
    return mask_bank, dist_bank
