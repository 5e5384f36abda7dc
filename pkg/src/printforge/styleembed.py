"""Fixed (non-learned) convolutional texture descriptor.

A three-stage stack of seeded random orthogonal 3x3 filters produces
feature maps at full, half and quarter resolution; per-stage channel
means/variances and Gram-matrix eigenvalues are pooled and projected to a
256-dim embedding. Because nothing is trained, any conformant reference
image yields a usable style embedding, including sensors never seen in
training.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

EMBED_DIM = 256
STAGE_CHANNELS = (16, 32, 64)


class ExtractorMismatch(ValueError):
    pass


class LayoutMismatch(ValueError):
    pass


@dataclass(frozen=True)
class StyleEmbedding:
    vector: np.ndarray  # (256,)
    extractor_seed: int

    def __post_init__(self):
        assert self.vector.shape == (EMBED_DIM,)
        assert np.all(np.isfinite(self.vector))


@dataclass(frozen=True)
class StyleTokens:
    tokens: np.ndarray  # (k, d)
    extractor_seed: int


def _orthogonal_filters(rng, n_out, n_in):
    """n_out filters of shape (n_in, 3, 3), orthonormalized in blocks of at
    most n_in*9 (the ambient dimension)."""
    dim = n_in * 9
    rows = []
    while len(rows) < n_out:
        m = rng.standard_normal((dim, min(dim, n_out - len(rows))))
        q, _ = np.linalg.qr(m)
        rows.extend(q.T)
    return np.array(rows[:n_out]).reshape(n_out, n_in, 3, 3)


class StyleExtractor:
    """Deterministic texture featurizer; state is fixed by its seed."""

    def __init__(self, seed: int = 0):
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.filters = []
        n_in = 1
        for c in STAGE_CHANNELS:
            self.filters.append(_orthogonal_filters(rng, c, n_in))
            n_in = c
        raw_dim = 3 * sum(STAGE_CHANNELS)
        proj = rng.standard_normal((EMBED_DIM, raw_dim))
        # orthonormal rows keep the projection full-rank and well-scaled
        q, _ = np.linalg.qr(proj.T)
        self.projection = q.T[:EMBED_DIM]

    def _stage(self, feats, filters):
        out = np.stack([
            sum(ndimage.convolve(feats[i], filters[o, i], mode="reflect")
                for i in range(feats.shape[0]))
            for o in range(filters.shape[0])])
        return np.abs(out)

    def __call__(self, image: np.ndarray) -> StyleEmbedding:
        img = np.asarray(image, float)
        # mean subtraction makes the descriptor exactly invariant to global
        # brightness shifts; contrast is kept, it is a style attribute
        img = img - img.mean()
        feats = img[None]
        parts = []
        for filters in self.filters:
            feats = self._stage(feats, filters)
            c, h, w = feats.shape
            flat = feats.reshape(c, -1)
            mu = flat.mean(1)
            var = flat.var(1)
            gram = (flat @ flat.T) / flat.shape[1]
            eig = np.sort(np.linalg.eigvalsh(gram))[::-1]
            parts.extend([mu, var, eig])
            feats = feats[:, ::2, ::2]  # next stage at half resolution
        raw = np.concatenate(parts)
        raw = np.sign(raw) * np.log1p(np.abs(raw))  # tame heavy-tailed Gram stats
        return StyleEmbedding(self.projection @ raw, self.seed)


def extract_style(image: np.ndarray, extractor: StyleExtractor | None = None) -> StyleEmbedding:
    return (extractor or _default_extractor())(image)


_EXTRACTOR = None


def _default_extractor() -> StyleExtractor:
    global _EXTRACTOR
    if _EXTRACTOR is None:
        _EXTRACTOR = StyleExtractor(seed=0)
    return _EXTRACTOR


def style_distance(a: StyleEmbedding, b: StyleEmbedding) -> float:
    if a.extractor_seed != b.extractor_seed:
        raise ExtractorMismatch(
            f"embeddings from different extractors: {a.extractor_seed} vs {b.extractor_seed}")
    return float(np.linalg.norm(a.vector - b.vector))


class TokenLayout:
    """Fixed linear unpacking of the 256-dim embedding into k style tokens."""

    def __init__(self, k: int = 4, dim: int = 128, seed: int = 1):
        self.k = k
        self.dim = dim
        rng = np.random.default_rng(seed)
        m = rng.standard_normal((k * dim, EMBED_DIM))
        q, _ = np.linalg.qr(m)  # (k*dim, EMBED_DIM), orthonormal columns
        self.matrix = q * np.sqrt(EMBED_DIM / (k * dim))

    def __call__(self, embedding: StyleEmbedding) -> StyleTokens:
        if self.matrix.shape[1] != embedding.vector.shape[0]:
            raise LayoutMismatch("embedding length does not match token layout")
        flat = self.matrix @ embedding.vector
        return StyleTokens(flat.reshape(self.k, self.dim).astype(np.float32),
                           embedding.extractor_seed)


_LAYOUT = None


def style_tokens(embedding: StyleEmbedding, layout: TokenLayout | None = None) -> StyleTokens:
    global _LAYOUT
    if layout is None:
        if _LAYOUT is None:
            _LAYOUT = TokenLayout()
        layout = _LAYOUT
    return layout(embedding)


# ---------------------------------------------------------------------------
# cache: binary records keyed by image checksum

def image_checksum(image: np.ndarray) -> str:
    arr = np.ascontiguousarray(np.asarray(image, np.float32))
    return hashlib.sha256(arr.tobytes() + str(arr.shape).encode()).hexdigest()[:16]


class StyleCache:
    """Append-only binary record file of embeddings keyed by checksum."""

    def __init__(self, path):
        self.path = Path(path)
        self._mem = {}
        if self.path.exists():
            self._load()

    def _load(self):
        with open(self.path, "rb") as fh:
            while True:
                head = fh.read(24)
                if len(head) < 24:
                    break
                key = head[:16].decode()
                (seed,) = struct.unpack("<q", head[16:24])
                vec = np.frombuffer(fh.read(EMBED_DIM * 4), dtype="<f4")
                self._mem[key] = StyleEmbedding(vec.astype(float), seed)

    def get_or_compute(self, image: np.ndarray,
                       extractor: StyleExtractor | None = None) -> StyleEmbedding:
        key = image_checksum(image)
        if key in self._mem:
            return self._mem[key]
        emb = extract_style(image, extractor)
        # round through the stored precision so hits and misses agree exactly
        emb = StyleEmbedding(emb.vector.astype("<f4").astype(float),
                             emb.extractor_seed)
        self._mem[key] = emb
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "ab") as fh:
            fh.write(key.encode())
            fh.write(struct.pack("<q", emb.extractor_seed))
            fh.write(emb.vector.astype("<f4").tobytes())
        return emb
