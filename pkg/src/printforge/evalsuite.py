"""Quantitative evaluation protocols.

Proxy substitutions are explicit and named in every report: the Poincare
classifier stands in for a commercial class labeler, the coherence/contrast
quality proxy for NFIQ 2.0, the minutiae matcher for a learned embedding
matcher. Numbers from these proxies are never comparable to published
values obtained with the proprietary tools.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy import ndimage

from . import identityops, masterprint
from .masterprint import OrientationField, estimate_orientation, orientation_coherence

MATCHER_ID = "minutiae-rigid-greedy"
QUALITY_PROXY_ID = "block-coherence-contrast"
CLASSIFIER_ID = "poincare-census"

DUPLICATE_THRESHOLD = 0.35   # genuine match threshold, capacity protocol
LEAKAGE_THRESHOLD = 0.231    # genuine match threshold, leakage protocol


class EmptySet(ValueError):
    pass


class InsufficientData(ValueError):
    def __init__(self, acquisition):
        super().__init__(f"need >= 30 scores for acquisition {acquisition!r}")
        self.acquisition = acquisition


class Unclassifiable(ValueError):
    pass


# ---------------------------------------------------------------------------
# quality proxy and bins

def quality_proxy(image: np.ndarray, block: int = 16) -> float:
    """0..100 quality score: mean(block orientation coherence x contrast)."""
    img = np.asarray(image, float)
    coh = orientation_coherence(img, block=block)
    h, w = img.shape
    by, bx = h // block, w // block
    contrast = np.zeros((by, bx))
    for i in range(by):
        for j in range(bx):
            blk = img[i * block:(i + 1) * block, j * block:(j + 1) * block]
            contrast[i, j] = min(4.0 * blk.std(), 1.0)
    return float(100.0 * np.mean(coh[:by, :bx] * contrast))


@dataclass
class QualityBins:
    params: dict  # acquisition -> {mu, sigma, low, high, degenerate}

    def label(self, acquisition: str, score: float) -> str:
        p = self.params[acquisition]
        if p["degenerate"]:
            return "average"
        if score < p["low"]:
            return "low"
        if score > p["high"]:
            return "high"
        return "average"


def fit_quality_bins(scores_by_acquisition: dict) -> QualityBins:
    """Normal fit per acquisition; thresholds at mu -/+ sigma."""
    params = {}
    for acq, scores in scores_by_acquisition.items():
        scores = np.asarray(scores, float)
        if len(scores) < 30:
            raise InsufficientData(acq)
        mu = float(scores.mean())
        sigma = float(scores.std(ddof=1))
        params[acq] = {
            "mu": mu, "sigma": sigma,
            "low": mu - sigma, "high": mu + sigma,
            "degenerate": bool(sigma == 0.0),
        }
    return QualityBins(params)


# ---------------------------------------------------------------------------
# verification metrics

@dataclass
class ScoreSet:
    genuine: np.ndarray
    imposter: np.ndarray
    matcher_id: str = MATCHER_ID
    thresholds: dict = field(default_factory=dict)


def tar_at_far(scores: ScoreSet, far: float):
    """(tar, threshold): threshold is the smallest imposter score whose
    accept fraction does not exceed `far`."""
    imp = np.sort(np.asarray(scores.imposter, float))
    gen = np.asarray(scores.genuine, float)
    if len(imp) == 0:
        raise EmptySet("imposter set is empty")
    threshold = None
    for t in imp:
        if np.mean(imp >= t) <= far:
            threshold = float(t)
            break
    if threshold is None:
        threshold = float(imp[-1]) + 1e-9  # no imposter may be accepted
    tar = float(np.mean(gen >= threshold)) if len(gen) else 0.0
    return tar, threshold


def pairwise_scores(identities, matcher=None) -> np.ndarray:
    """Symmetric matrix of matcher scores over all identity pairs."""
    matcher = matcher or (lambda a, b: identityops.match_minutiae(a, b).score)
    n = len(identities)
    mat = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            s = matcher(identities[i], identities[j])
            mat[i, j] = mat[j, i] = s
    return mat


def duplicate_rate(identities, threshold: float = DUPLICATE_THRESHOLD,
                   matcher=None, checkpoints=None, score_matrix=None) -> dict:
    """Duplicate-identity curve over growing prefixes of the identity list.

    An identity is a duplicate when it participates in at least one pair
    scoring above `threshold`. The pair-counting variant is reported
    alongside (identity counting is primary).
    """
    n = len(identities)
    if n < 2:
        raise ValueError("need n >= 2 identities")
    if score_matrix is None:
        score_matrix = pairwise_scores(identities, matcher)
    checkpoints = sorted(set(c for c in (checkpoints or [n]) if 2 <= c <= n))
    curve = {}
    for m in checkpoints:
        sub = score_matrix[:m, :m]
        above = np.triu(sub > threshold, k=1)
        dup_ids = np.count_nonzero(above.any(0) | above.any(1))
        n_pairs = m * (m - 1) // 2
        curve[m] = {
            "identity_rate": dup_ids / m,
            "pair_rate": int(above.sum()) / n_pairs,
            "duplicate_identities": int(dup_ids),
            "pairs_above": int(above.sum()),
        }
    return curve


def leakage_check(generated, training, threshold: float = LEAKAGE_THRESHOLD,
                  matcher=None) -> dict:
    """Max score of each generated identity against the training set."""
    if len(generated) == 0 or len(training) == 0:
        raise EmptySet("both generated and training sets must be nonempty")
    matcher = matcher or (lambda a, b: identityops.match_minutiae(a, b).score)
    max_scores = []
    for g in generated:
        max_scores.append(max(matcher(g, t) for t in training))
    max_scores = np.array(max_scores)
    above = int(np.sum(max_scores > threshold))
    return {
        "count_above": above,
        "fraction_above": above / len(generated),
        "max_score": float(max_scores.max()),
        "threshold": threshold,
        "per_identity_max": max_scores,
    }


# ---------------------------------------------------------------------------
# dataset statistics

def _foreground(image: np.ndarray, block: int = 16) -> np.ndarray:
    img = np.asarray(image, float)
    std = ndimage.uniform_filter(img ** 2, block) - ndimage.uniform_filter(img, block) ** 2
    return np.sqrt(np.maximum(std, 0)) > 0.05


def minutia_quality(image: np.ndarray, minutiae: np.ndarray) -> np.ndarray:
    """Per-minutia local orientation coherence, scaled 0..100."""
    coh = orientation_coherence(np.asarray(image, float))
    out = []
    for x, y in minutiae[:, :2]:
        by = int(min(y // masterprint.BLOCK, coh.shape[0] - 1))
        bx = int(min(x // masterprint.BLOCK, coh.shape[1] - 1))
        out.append(100.0 * coh[by, bx])
    return np.array(out)


def minutiae_stats(images, minutiae_lists=None, crop: int = 256) -> dict:
    """Minutiae count / quality on the center crop, foreground area on the
    full image; each reported as mu +/- sigma."""
    counts, quals, areas = [], [], []
    for i, img in enumerate(images):
        img = np.asarray(img, float)
        if minutiae_lists is not None and minutiae_lists[i] is not None:
            mn = np.asarray(minutiae_lists[i])
        else:
            sil = identityops.extract_ridge(img)
            mn = masterprint.extract_minutiae(masterprint.skeletonize_ridges(sil.image))
        h, w = img.shape
        y0, x0 = max(0, (h - crop) // 2), max(0, (w - crop) // 2)
        y1, x1 = min(h, y0 + crop), min(w, x0 + crop)
        if len(mn):
            inside = ((mn[:, 0] >= x0) & (mn[:, 0] < x1)
                      & (mn[:, 1] >= y0) & (mn[:, 1] < y1))
            mc = mn[inside]
        else:
            mc = mn
        counts.append(len(mc))
        q = minutia_quality(img, mc) if len(mc) else np.array([0.0])
        quals.append(float(q.mean()))
        areas.append(int(_foreground(img).sum()))

    def mu_sigma(v):
        v = np.asarray(v, float)
        return {"mu": float(v.mean()), "sigma": float(v.std())}

    return {
        "minutiae_count": mu_sigma(counts),
        "minutiae_quality": mu_sigma(quals),
        "foreground_area_px": mu_sigma(areas),
        "n_images": len(counts),
        "quality_proxy_id": QUALITY_PROXY_ID,
    }


# ---------------------------------------------------------------------------
# pattern classification

def _singular_clusters(theta: np.ndarray, coherence=None):
    fld = OrientationField(theta, np.ones_like(theta),
                          (theta.shape[0] * masterprint.BLOCK,
                           theta.shape[1] * masterprint.BLOCK))
    by, bx = theta.shape
    core_map = np.zeros((by - 1, bx - 1), bool)
    delta_map = np.zeros((by - 1, bx - 1), bool)
    for j in range(by - 1):
        for i in range(bx - 1):
            if coherence is not None and coherence[j, i] < 0.25:
                continue
            p = masterprint.poincare_index(fld, i, j)
            if abs(p - 0.5) < 0.25:
                core_map[j, i] = True
            elif abs(p + 0.5) < 0.25:
                delta_map[j, i] = True

    def centroids(m):
        lab, n = ndimage.label(m, structure=np.ones((3, 3)))
        out = []
        for k in range(1, n + 1):
            ys, xs = np.where(lab == k)
            out.append(((xs.mean() + 1.0) * masterprint.BLOCK,
                        (ys.mean() + 1.0) * masterprint.BLOCK))
        return out

    return centroids(core_map), centroids(delta_map)


def classify_pattern(field_or_image) -> str:
    """Pattern class from a Poincare-index census of cores and deltas.

    Raises Unclassifiable for censuses outside the class map (reported as
    their own category by callers)."""
    if isinstance(field_or_image, OrientationField):
        theta = field_or_image.theta
        coherence = None
    else:
        img = np.asarray(field_or_image, float)
        theta = estimate_orientation(img)
        coherence = orientation_coherence(img)
    cores, deltas = _singular_clusters(theta, coherence)
    if len(cores) == 0 and len(deltas) == 0:
        return "plain arch"
    if len(cores) >= 2:
        return "whorl"
    if len(cores) == 1 and len(deltas) >= 1:
        cx, cy = cores[0]
        dx_, dy_ = min(deltas, key=lambda d: (d[0] - cx) ** 2 + (d[1] - cy) ** 2)
        off = dx_ - cx
        dist = max(np.hypot(dx_ - cx, dy_ - cy), 1e-9)
        if abs(off) <= 0.30 * dist:
            return "tented arch"
        return "left loop" if off > 0 else "right loop"
    raise Unclassifiable(f"census cores={len(cores)} deltas={len(deltas)}")


# ---------------------------------------------------------------------------
# report bundle

@dataclass
class EvalReport:
    tar_at_far: dict = field(default_factory=dict)
    duplicate_curve: dict = field(default_factory=dict)
    leakage: dict = field(default_factory=dict)
    minutiae: dict = field(default_factory=dict)
    class_consistency: dict = field(default_factory=dict)
    quality_bins: dict = field(default_factory=dict)
    inputs: dict = field(default_factory=dict)
    substitutions: dict = field(default_factory=lambda: {
        "matcher": MATCHER_ID,
        "quality": QUALITY_PROXY_ID,
        "classifier": CLASSIFIER_ID,
    })

    def to_json(self) -> str:
        def default(o):
            if isinstance(o, np.ndarray):
                return o.tolist()
            if isinstance(o, (np.integer,)):
                return int(o)
            if isinstance(o, (np.floating,)):
                return float(o)
            raise TypeError(type(o))
        return json.dumps(asdict(self), indent=2, sort_keys=True, default=default)

    def to_text(self) -> str:
        lines = ["printforge evaluation report", "=" * 32]
        lines.append(f"substitutions: {self.substitutions}")
        if self.tar_at_far:
            lines.append("TAR @ FAR:")
            for far, (tar, thr) in sorted(self.tar_at_far.items()):
                lines.append(f"  FAR={far}: TAR={tar:.4f} (threshold {thr:.4f})")
        if self.duplicate_curve:
            lines.append(f"duplicate identities (threshold {DUPLICATE_THRESHOLD}):")
            for n, rec in sorted(self.duplicate_curve.items()):
                lines.append(f"  n={n}: {100 * rec['identity_rate']:.2f}% identities"
                             f" ({100 * rec['pair_rate']:.3f}% pairs)")
        if self.leakage:
            lines.append(f"leakage: {self.leakage.get('count_above', 0)} above "
                         f"{self.leakage.get('threshold')} "
                         f"(max {self.leakage.get('max_score', 0):.3f})")
        if self.minutiae:
            m = self.minutiae
            for key in ("minutiae_count", "minutiae_quality", "foreground_area_px"):
                if key in m:
                    lines.append(f"  {key}: {m[key]['mu']:.2f} +/- {m[key]['sigma']:.2f}")
        if self.class_consistency:
            lines.append(f"class consistency: {self.class_consistency}")
        return "\n".join(lines)


def dataset_checksum(paths) -> str:
    h = hashlib.sha256()
    for p in sorted(str(p) for p in paths):
        h.update(p.encode())
        with open(p, "rb") as fh:
            h.update(fh.read())
    return h.hexdigest()[:16]
