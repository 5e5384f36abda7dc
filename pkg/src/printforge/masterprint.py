"""Procedural master fingerprint generation.

A master print is a synthetic finger's canonical ridge pattern plus its
ground truth: orientation field (zero-pole model), singular points,
minutiae, class label. Ridges are grown by iterative oriented Gabor
filtering of sparse seed impulses, SFinGe style.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage, signal
from skimage.morphology import remove_small_holes, remove_small_objects, skeletonize

CLASSES = ("whorl", "plain arch", "tented arch", "left loop", "right loop")
BLOCK = 8           # orientation-field block size in px
MARGIN = 16         # singular points keep this distance from the border
DEFAULT_SIZE = 256
N_ORIENT_BINS = 16  # Gabor bank angular resolution


class SingularityOnGrid(ValueError):
    pass


def make_rng(seed: int) -> np.random.Generator:
    """Portable counter-based RNG; all corpus randomness flows through this."""
    return np.random.Generator(np.random.Philox(key=np.uint64(seed)))


@dataclass(frozen=True)
class SingularPoints:
    cores: tuple  # ((x, y), ...)
    deltas: tuple

    def all_points(self) -> list:
        return list(self.cores) + list(self.deltas)


@dataclass
class OrientationField:
    theta: np.ndarray      # (H//BLOCK, W//BLOCK) angles in [0, pi)
    coherence: np.ndarray  # same shape, values in [0, 1]
    shape: tuple           # pixel-space (H, W)


@dataclass
class GrownRidges:
    image: np.ndarray
    iterations: int
    converged: bool


@dataclass
class MasterPrint:
    image: np.ndarray            # (H, W) grayscale in [0, 1], ridges dark
    field: OrientationField
    singular: SingularPoints
    minutiae: np.ndarray         # (n, 4): x, y, angle [0, pi), kind (0 term / 1 bif)
    class_label: str
    id: int
    seed: int
    frequency: float = 0.0
    extras: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# singular points

def sample_singularities(pattern_class: str, rng: np.random.Generator,
                         shape: tuple = (DEFAULT_SIZE, DEFAULT_SIZE)) -> SingularPoints:
    """Class-consistent core/delta layout, jittered inside safe regions."""
    if pattern_class not in CLASSES:
        raise ValueError(f"unknown class {pattern_class!r}")
    h, w = shape
    cx, cy = w / 2, h / 2

    def jit(x, y, amp=16.0):
        px = float(np.clip(x + rng.uniform(-amp, amp), MARGIN, w - 1 - MARGIN))
        py = float(np.clip(y + rng.uniform(-amp, amp), MARGIN, h - 1 - MARGIN))
        return (px, py)

    if pattern_class == "plain arch":
        return SingularPoints((), ())
    if pattern_class == "whorl":
        sep = rng.uniform(28, 44)
        cores = (jit(cx, cy - sep / 2, 8), jit(cx, cy + sep / 2, 8))
        dx = rng.uniform(55, 75)
        dy = rng.uniform(45, 65)
        deltas = (jit(cx - dx, cy + dy, 8), jit(cx + dx, cy + dy, 8))
        return SingularPoints(cores, deltas)
    if pattern_class == "tented arch":
        core = jit(cx, cy - 10, 8)
        # delta almost directly below the core
        delta = (float(np.clip(core[0] + rng.uniform(-4, 4), MARGIN, w - 1 - MARGIN)),
                 float(np.clip(core[1] + rng.uniform(48, 64), MARGIN, h - 1 - MARGIN)))
        return SingularPoints((core,), (delta,))
    # loops: delta sits below and laterally offset from the core;
    # left loop -> delta to the right, right loop -> delta to the left
    core = jit(cx, cy - 12, 8)
    lat = rng.uniform(40, 60)
    if pattern_class == "right loop":
        lat = -lat
    delta = (float(np.clip(core[0] + lat, MARGIN, w - 1 - MARGIN)),
             float(np.clip(core[1] + rng.uniform(48, 68), MARGIN, h - 1 - MARGIN)))
    return SingularPoints((core,), (delta,))


# ---------------------------------------------------------------------------
# orientation field

def _theta_at(points: SingularPoints, xs: np.ndarray, ys: np.ndarray,
              theta0: float) -> np.ndarray:
    """Zero-pole model: theta = theta0 + 1/2 (sum arg(z-c) - sum arg(z-d)) mod pi."""
    z = xs + 1j * ys
    acc = np.full(z.shape, 2.0 * theta0)
    for (px, py) in points.cores:
        d = z - (px + 1j * py)
        if np.any(d == 0):
            raise SingularityOnGrid(f"core at grid sample ({px}, {py})")
        acc = acc + np.angle(d)
    for (px, py) in points.deltas:
        d = z - (px + 1j * py)
        if np.any(d == 0):
            raise SingularityOnGrid(f"delta at grid sample ({px}, {py})")
        acc = acc - np.angle(d)
    return np.mod(acc / 2.0, np.pi)


def orientation_from_singularities(points: SingularPoints,
                                   shape: tuple = (DEFAULT_SIZE, DEFAULT_SIZE),
                                   theta0: float = 0.0,
                                   block: int = BLOCK) -> OrientationField:
    h, w = shape
    by, bx = h // block, w // block
    ys, xs = np.meshgrid(
        (np.arange(by) + 0.5) * block, (np.arange(bx) + 0.5) * block, indexing="ij")
    for attempt in range(3):
        try:
            theta = _theta_at(points, xs, ys, theta0)
            break
        except SingularityOnGrid:
            xs = xs + 1e-3  # epsilon resample off the singularity
    coherence = np.ones_like(theta)
    for (px, py) in points.all_points():
        dist = np.hypot(xs - px, ys - py)
        coherence = np.minimum(coherence, np.clip(dist / 16.0, 0.0, 1.0))
    return OrientationField(theta.astype(np.float64), coherence, (h, w))


def pixel_theta(field: OrientationField) -> np.ndarray:
    """Upsample a block field to pixel resolution in doubled-angle space."""
    h, w = field.shape
    c = np.cos(2 * field.theta)
    s = np.sin(2 * field.theta)
    zy = h / field.theta.shape[0]
    zx = w / field.theta.shape[1]
    cu = ndimage.zoom(c, (zy, zx), order=1, mode="nearest")
    su = ndimage.zoom(s, (zy, zx), order=1, mode="nearest")
    return np.mod(np.arctan2(su, cu) / 2.0, np.pi)


def poincare_index(field: OrientationField, bx: int, by: int) -> float:
    """Winding number (in units of full turns) around block (bx, by)."""
    t = field.theta
    ring = [(by, bx), (by, bx + 1), (by + 1, bx + 1), (by + 1, bx)]
    total = 0.0
    for i in range(4):
        a = t[ring[i]]
        b = t[ring[(i + 1) % 4]]
        d = b - a
        # principal difference in the mod-pi angle space
        while d > np.pi / 2:
            d -= np.pi
        while d < -np.pi / 2:
            d += np.pi
        total += d
    return total / (2 * np.pi)


# ---------------------------------------------------------------------------
# ridge growth

def _gabor_bank(frequency: float, n_bins: int = N_ORIENT_BINS):
    sigma = 0.5 / frequency
    r = int(round(1.2 / frequency))
    y, x = np.mgrid[-r:r + 1, -r:r + 1]
    env = np.exp(-(x ** 2 + y ** 2) / (2 * sigma ** 2))
    bank = []
    for k in range(n_bins):
        t = k * np.pi / n_bins          # ridge direction
        tn = t + np.pi / 2              # modulation runs across the ridges
        carrier = np.cos(2 * np.pi * frequency * (x * np.cos(tn) + y * np.sin(tn)))
        kern = env * carrier
        bank.append(kern / np.abs(kern).sum())
    return bank


def grow_ridges(field: OrientationField, frequency: float,
                rng: np.random.Generator, max_iter: int = 60,
                tol: float = 1e-3) -> GrownRidges:
    """Iterative anisotropic Gabor filtering of sparse seed impulses."""
    if not (1 / 12 <= frequency <= 1 / 6):
        raise ValueError(f"frequency {frequency} outside [1/12, 1/6]")
    h, w = field.shape
    theta_pix = pixel_theta(field)
    bins = np.mod(np.round(theta_pix / np.pi * N_ORIENT_BINS).astype(int), N_ORIENT_BINS)
    bank = _gabor_bank(frequency)

    img = np.zeros((h, w))
    n_seeds = max(8, (h * w) // 800)
    sy = rng.integers(0, h, n_seeds)
    sx = rng.integers(0, w, n_seeds)
    img[sy, sx] = rng.choice([-1.0, 1.0], n_seeds)

    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        responses = np.stack(
            [signal.fftconvolve(img, k, mode="same") for k in bank])
        new = np.take_along_axis(responses, bins[None], axis=0)[0]
        # normalize response gain, then soft-clip toward binary ridge/valley
        scale = np.percentile(np.abs(new), 95)
        if scale > 0:
            new = new / scale
        new = np.tanh(3.0 * new)
        delta = np.mean(np.abs(new - img))
        img = new
        if delta < tol:
            converged = True
            break
    out = (1.0 - img) / 2.0  # ridges (+1) map to dark
    out = (out - out.min()) / max(out.max() - out.min(), 1e-9)
    return GrownRidges(out, it, converged)


# ---------------------------------------------------------------------------
# binarization / skeleton / minutiae

def binarize(image: np.ndarray, window: int = 31) -> np.ndarray:
    """Adaptive mean threshold; True where ridge (dark)."""
    local_mean = ndimage.uniform_filter(image, size=window, mode="reflect")
    return image < local_mean


def skeletonize_ridges(binary: np.ndarray) -> np.ndarray:
    clean = remove_small_objects(binary, min_size=12)
    clean = remove_small_holes(clean, area_threshold=12)
    return skeletonize(clean)


_CN_OFFSETS = [(-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1)]


def _minutia_direction(sk: np.ndarray, y: int, x: int, radius: int = 12) -> float:
    """Direction (mod 2pi) of a minutia, traced along its own skeleton.

    Breadth-first walk over connected skeleton pixels only, so neighboring
    ridges cannot contaminate the estimate. For a termination the summed
    offsets point along the ridge into the line; for a bifurcation they
    point toward the two-branch side."""
    h, w = sk.shape
    seen = {(y, x)}
    frontier = [(y, x)]
    vy = vx = 0.0
    for _ in range(radius):
        nxt = []
        for py, px in frontier:
            for dy in (-1, 0, 1):
                for dx in (-1, 0, 1):
                    ny, nx_ = py + dy, px + dx
                    if (ny, nx_) in seen or not (0 <= ny < h and 0 <= nx_ < w):
                        continue
                    if sk[ny, nx_]:
                        seen.add((ny, nx_))
                        nxt.append((ny, nx_))
                        d = np.hypot(ny - y, nx_ - x)
                        if d >= 4:  # skip the isotropic immediate neighborhood
                            vy += (ny - y) / d
                            vx += (nx_ - x) / d
        frontier = nxt
        if not frontier:
            break
    if vy == 0.0 and vx == 0.0:
        return 0.0
    return float(np.mod(np.arctan2(vy, vx), 2 * np.pi))


def extract_minutiae(skeleton: np.ndarray, mask: np.ndarray | None = None,
                     border: int = 8) -> np.ndarray:
    """Crossing-number minutiae from a 1-px skeleton.

    Returns (n, 4) float array of x, y, direction [0, 2pi), kind
    (0 termination, 1 bifurcation). The direction comes from the local
    skeleton geometry. Minutiae within `border` px of the mask edge are
    dropped, as are close pairs (skeletonization spur artifacts).
    """
    sk = (skeleton > 0).astype(np.int16)
    h, w = sk.shape
    padded = np.pad(sk, 1)
    neigh = np.stack([padded[1 + dy: 1 + dy + h, 1 + dx: 1 + dx + w]
                      for dy, dx in _CN_OFFSETS])
    cn = 0.5 * np.abs(np.diff(np.concatenate([neigh, neigh[:1]]), axis=0)).sum(axis=0)
    cn = cn * sk

    if mask is None:
        mask = np.ones_like(sk, bool)
    # image border counts as mask boundary
    dist_in = ndimage.distance_transform_edt(np.pad(mask, 1))[1:-1, 1:-1]

    pts = []
    for kind, cnv in ((0, 1), (1, 3)):
        ys, xs = np.where(cn == cnv)
        for y, x in zip(ys, xs):
            if dist_in[y, x] <= border:
                continue
            pts.append((float(x), float(y), _minutia_direction(sk, y, x), float(kind)))
    if not pts:
        return np.zeros((0, 4))
    m = np.array(pts)
    # drop mutually-close minutiae (spurs and broken-ridge doublets)
    keep = np.ones(len(m), bool)
    d2 = ((m[:, None, :2] - m[None, :, :2]) ** 2).sum(-1)
    np.fill_diagonal(d2, np.inf)
    for i in range(len(m)):
        if keep[i] and d2[i][keep].min(initial=np.inf) < 6.0 ** 2:
            close = np.where((d2[i] < 6.0 ** 2) & keep)[0]
            keep[close] = False
            keep[i] = False
    return m[keep]


def estimate_orientation(image: np.ndarray, block: int = BLOCK) -> np.ndarray:
    """Gradient-based block orientation (mod pi) of a grayscale image."""
    gy, gx = np.gradient(ndimage.gaussian_filter(image.astype(float), 1.0))
    gxx = ndimage.uniform_filter(gx * gx, block * 2)
    gyy = ndimage.uniform_filter(gy * gy, block * 2)
    gxy = ndimage.uniform_filter(gx * gy, block * 2)
    h, w = image.shape
    by, bx = h // block, w // block
    cy = (np.arange(by) * block + block // 2).clip(0, h - 1)
    cx = (np.arange(bx) * block + block // 2).clip(0, w - 1)
    sxx = gxx[np.ix_(cy, cx)]
    syy = gyy[np.ix_(cy, cx)]
    sxy = gxy[np.ix_(cy, cx)]
    # gradient direction is normal to the ridge flow
    phi = 0.5 * np.arctan2(2 * sxy, sxx - syy)
    return np.mod(phi + np.pi / 2, np.pi)


def orientation_coherence(image: np.ndarray, block: int = BLOCK) -> np.ndarray:
    gy, gx = np.gradient(ndimage.gaussian_filter(image.astype(float), 1.0))
    gxx = ndimage.uniform_filter(gx * gx, block * 2)
    gyy = ndimage.uniform_filter(gy * gy, block * 2)
    gxy = ndimage.uniform_filter(gx * gy, block * 2)
    num = np.sqrt((gxx - gyy) ** 2 + 4 * gxy ** 2)
    den = gxx + gyy + 1e-9
    coh = num / den
    h, w = image.shape
    cy = (np.arange(h // block) * block + block // 2).clip(0, h - 1)
    cx = (np.arange(w // block) * block + block // 2).clip(0, w - 1)
    return coh[np.ix_(cy, cx)]


def perturb_field(fld: OrientationField, rng: np.random.Generator,
                  noise_amp: float = 0.12, arch_amp: float = 0.0) -> OrientationField:
    """Smooth orientation perturbation (applied in doubled-angle space).

    Keeps Poincare indices intact: the perturbation is weak and smooth, so
    no new singularities appear. `arch_amp` adds the tent-shaped bend that
    gives plain arches their curvature.
    """
    by, bx = fld.theta.shape
    noise = rng.standard_normal((by, bx))
    noise = ndimage.gaussian_filter(noise, 2.0, mode="nearest")
    noise = noise / max(np.abs(noise).max(), 1e-9) * noise_amp
    dtheta = noise
    if arch_amp:
        h, w = fld.shape
        ys, xs = np.meshgrid((np.arange(by) + 0.5) * BLOCK,
                             (np.arange(bx) + 0.5) * BLOCK, indexing="ij")
        bend = -arch_amp * ((xs - w / 2) / (w / 2)) * np.exp(-(((ys - h * 0.45) / (h * 0.3)) ** 2))
        dtheta = dtheta + bend
    c = np.cos(2 * (fld.theta + dtheta))
    s = np.sin(2 * (fld.theta + dtheta))
    theta = np.mod(np.arctan2(s, c) / 2.0, np.pi)
    return OrientationField(theta, fld.coherence, fld.shape)


# ---------------------------------------------------------------------------
# full generation

def generate_masterprint(pattern_class: str, seed: int,
                         size: int = DEFAULT_SIZE,
                         frequency: float | None = None) -> MasterPrint:
    rng = make_rng(seed)
    if frequency is None:
        frequency = float(rng.uniform(1 / 11, 1 / 8))
    points = sample_singularities(pattern_class, rng, (size, size))
    theta0 = float(rng.uniform(-0.35, 0.35)) % np.pi
    fld = orientation_from_singularities(points, (size, size), theta0=theta0)
    # arches carry extra orientation noise: without singularities the grown
    # pattern is near-perfect parallel stripes with too few minutiae
    if pattern_class == "plain arch":
        fld = perturb_field(fld, rng, noise_amp=0.75, arch_amp=0.7)
    else:
        fld = perturb_field(fld, rng, noise_amp=0.12)
    grown = grow_ridges(fld, frequency, rng)
    binary = binarize(grown.image)
    sk = skeletonize_ridges(binary)
    minutiae = extract_minutiae(sk)
    mp_id = int(np.uint64(seed) ^ np.uint64(0x9E3779B97F4A7C15))
    return MasterPrint(
        image=grown.image.astype(np.float32),
        field=fld,
        singular=points,
        minutiae=minutiae,
        class_label=pattern_class,
        id=mp_id,
        seed=seed,
        frequency=frequency,
        extras={"converged": grown.converged, "iterations": grown.iterations},
    )
