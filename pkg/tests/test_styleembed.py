import numpy as np
import pytest

from printforge import corpus, masterprint, styleembed as se

EXTRACTOR = se.StyleExtractor(seed=0)


def styled_images(style, n, seed0):
    """Render one masterprint under a style at several qualities."""
    out = []
    for i in range(n):
        m = masterprint.generate_masterprint(
            masterprint.CLASSES[i % 5], 9000 + seed0 + i)
        rng = masterprint.make_rng(seed0 + i)
        q = corpus.QUALITIES[i % len(corpus.QUALITIES)]
        out.append(corpus.render_style(m.image, style, q, rng))
    return out


class TestEmbedding:
    def test_shape_and_finite(self):
        emb = EXTRACTOR(np.random.default_rng(0).random((64, 64)))
        assert emb.vector.shape == (se.EMBED_DIM,)

    def test_deterministic(self):
        img = np.random.default_rng(1).random((64, 64))
        a = se.StyleExtractor(seed=0)(img)
        b = se.StyleExtractor(seed=0)(img)
        assert np.array_equal(a.vector, b.vector)

    def test_seed_changes_embedding(self):
        img = np.random.default_rng(2).random((64, 64))
        a = se.StyleExtractor(seed=0)(img)
        b = se.StyleExtractor(seed=1)(img)
        assert not np.allclose(a.vector, b.vector)

    def test_metric_identity(self):
        img = np.random.default_rng(3).random((64, 64))
        emb = EXTRACTOR(img)
        assert se.style_distance(emb, emb) == 0.0

    def test_extractor_mismatch(self):
        img = np.random.default_rng(4).random((64, 64))
        with pytest.raises(se.ExtractorMismatch):
            se.style_distance(se.StyleExtractor(seed=0)(img),
                              se.StyleExtractor(seed=1)(img))

    def test_brightness_shift_invariance(self):
        # exact invariance under unclipped global shifts
        img = np.random.default_rng(5).random((64, 64))
        a = EXTRACTOR(img)
        b = EXTRACTOR(img + 0.37)
        assert se.style_distance(a, b) < 1e-8

    def test_contrast_is_not_erased(self):
        img = np.random.default_rng(6).random((64, 64))
        a = EXTRACTOR(img)
        b = EXTRACTOR(img * 0.2)
        assert se.style_distance(a, b) > 0.1


@pytest.fixture(scope="module")
def embeddings():
    out = {}
    for i, style in enumerate(sorted(corpus.STYLES)):
        imgs = styled_images(style, 8, 100 * i)
        out[style] = [EXTRACTOR(im).vector for im in imgs]
    return out


class TestSeparability:
    def test_nearest_centroid_accuracy(self, embeddings):
        styles = sorted(embeddings)
        correct = total = 0
        for s in styles:
            for i, v in enumerate(embeddings[s]):
                cents = {t: np.mean([w for j, w in enumerate(embeddings[t])
                                     if t != s or j != i], axis=0)
                         for t in styles}
                pred = min(cents, key=lambda t: np.linalg.norm(v - cents[t]))
                correct += pred == s
                total += 1
        assert correct / total >= 0.9, correct / total

    def test_inter_over_intra(self, embeddings):
        styles = sorted(embeddings)
        intra, inter = [], []
        for a in styles:
            va = embeddings[a]
            intra.extend(np.linalg.norm(x - y) for i, x in enumerate(va)
                         for y in va[i + 1:])
            for b in styles:
                if b <= a:
                    continue
                inter.extend(np.linalg.norm(x - y) for x in va
                             for y in embeddings[b])
        assert np.mean(inter) > 2 * np.mean(intra), (np.mean(inter), np.mean(intra))


class TestTokens:
    def test_zero_embedding_zero_tokens(self):
        emb = se.StyleEmbedding(np.zeros(se.EMBED_DIM), 0)
        toks = se.style_tokens(emb)
        assert np.all(toks.tokens == 0)
        assert toks.tokens.shape == (4, 128)

    def test_layout_deterministic(self):
        emb = EXTRACTOR(np.random.default_rng(7).random((64, 64)))
        a = se.TokenLayout(seed=1)(emb)
        b = se.TokenLayout(seed=1)(emb)
        assert np.array_equal(a.tokens, b.tokens)

    def test_layout_mismatch(self):
        layout = se.TokenLayout(k=2, dim=8, seed=3)
        bad = se.StyleEmbedding(np.zeros(se.EMBED_DIM), 0)
        layout.matrix = layout.matrix[:, :100]
        with pytest.raises(se.LayoutMismatch):
            layout(bad)

    def test_norm_preserved_in_scale(self):
        # orthonormal unpacking keeps token energy comparable to the embedding
        emb = EXTRACTOR(np.random.default_rng(8).random((64, 64)))
        toks = se.style_tokens(emb)
        ratio = np.linalg.norm(toks.tokens) / np.linalg.norm(emb.vector)
        assert 0.5 < ratio < 2.0


class TestCache:
    def test_round_trip(self, tmp_path):
        cache = se.StyleCache(tmp_path / "style.cache")
        img = np.random.default_rng(9).random((64, 64))
        a = cache.get_or_compute(img, EXTRACTOR)
        again = se.StyleCache(tmp_path / "style.cache")
        b = again.get_or_compute(img, EXTRACTOR)
        assert np.allclose(a.vector, b.vector, atol=1e-6)
        assert b.extractor_seed == a.extractor_seed

    def test_hit_skips_recompute(self, tmp_path):
        calls = []

        class Spy(se.StyleExtractor):
            def __call__(self, image):
                calls.append(1)
                return super().__call__(image)

        spy = Spy(seed=0)
        cache = se.StyleCache(tmp_path / "c.bin")
        img = np.random.default_rng(10).random((32, 32))
        cache.get_or_compute(img, spy)
        cache.get_or_compute(img, spy)
        assert len(calls) == 1

    def test_checksum_distinguishes_shape(self):
        flat = np.zeros(16, np.float32)
        square = np.zeros((4, 4), np.float32)
        assert se.image_checksum(flat) != se.image_checksum(square)
