import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from printforge import promptgrammar as pg

VOCAB = pg.default_vocabulary()


def spec_strategy():
    return st.builds(
        pg.PromptSpec,
        acquisition=st.sampled_from(VOCAB.values("acquisition")),
        pattern_class=st.sampled_from(VOCAB.values("class")),
        quality=st.sampled_from(VOCAB.values("quality")),
        sensor=st.sampled_from(VOCAB.values("sensor")),
        sensing=st.sampled_from(VOCAB.values("sensing")),
    )


class TestVocabulary:
    def test_sizes(self):
        assert len(VOCAB.values("acquisition")) == 5
        assert len(VOCAB.values("class")) == 5
        assert len(VOCAB.values("quality")) == 3
        assert len(VOCAB.values("sensor")) == 30
        assert len(VOCAB.values("sensing")) == 5

    def test_checksum_stable(self):
        assert VOCAB.checksum == pg.Vocabulary.load().checksum
        assert len(VOCAB.checksum) == 16

    def test_unknown_value(self):
        with pytest.raises(pg.UnknownVocabulary) as exc:
            VOCAB.index("sensor", "polygraph")
        assert exc.value.factor == "sensor"
        assert exc.value.value == "polygraph"

    def test_missing_section_rejected(self, tmp_path):
        p = tmp_path / "v.txt"
        p.write_text("[acquisition]\nrolled\n")
        with pytest.raises(ValueError, match="missing sections"):
            pg.Vocabulary.load(p)


class TestFormat:
    def test_template_byte_exact(self):
        spec = pg.PromptSpec("slap", "whorl", "high", "Digital Persona", "FTIR optical")
        assert pg.format_prompt(spec) == (
            "a slap fingerprint image, whorl pattern, high quality, "
            "Digital Persona, FTIR optical")

    def test_stage1_template(self):
        s = pg.format_stage1_prompt("left loop")
        assert "rolled fingerprint image, left loop pattern" in s
        assert "ink on stock paper" in s
        assert s == ("a rolled fingerprint image, left loop pattern, "
                     "high quality, ink on stock paper")

    def test_stage1_spec_valid(self):
        for cls in VOCAB.values("class"):
            pg.stage1_spec(cls).validate(VOCAB)

    def test_crime_scene_omits_sensing(self):
        spec = pg.PromptSpec("latent", "whorl", "low", "crime scene",
                             "FTIR optical", sensing_omitted=True)
        s = pg.format_prompt(spec)
        assert s == "a latent fingerprint image, whorl pattern, low quality, crime scene"

    def test_invalid_spec_rejected(self):
        spec = pg.PromptSpec("rolled", "whorl", "high", "polygraph", "FTIR optical")
        with pytest.raises(pg.UnknownVocabulary):
            pg.format_prompt(spec)


class TestParse:
    def test_paper_example(self):
        spec = pg.parse_prompt("a slap fingerprint image, whorl pattern, "
                               "high quality, Digital Persona, FTIR optical")
        assert spec == pg.PromptSpec("slap", "whorl", "high",
                                     "Digital Persona", "FTIR optical")

    def test_round_trip_exhaustive(self):
        for acq, cls, q, sensor, sensing in itertools.product(
                VOCAB.values("acquisition"), VOCAB.values("class"),
                VOCAB.values("quality"), VOCAB.values("sensor"),
                VOCAB.values("sensing")):
            spec = pg.PromptSpec(acq, cls, q, sensor, sensing)
            assert pg.parse_prompt(pg.format_prompt(spec)) == spec

    def test_whitespace_tolerant(self):
        spec = pg.PromptSpec("rolled", "plain arch", "low", "Ink on paper",
                             "FTIR optical")
        assert pg.parse_prompt("  " + pg.format_prompt(spec) + "\n") == spec

    def test_missing_image_word(self):
        with pytest.raises(pg.MalformedTemplate):
            pg.parse_prompt("a slap fingerprint, whorl pattern, high quality, "
                            "Digital Persona, FTIR optical")

    def test_wrong_field_count(self):
        with pytest.raises(pg.MalformedTemplate):
            pg.parse_prompt("a slap fingerprint image, whorl pattern")

    def test_crime_scene_round_trip(self):
        spec = pg.PromptSpec("latent", "right loop", "low", "crime scene",
                             "FTIR optical", sensing_omitted=True)
        assert pg.parse_prompt(pg.format_prompt(spec)) == spec

    def test_unknown_value_surfaced(self):
        with pytest.raises(pg.UnknownVocabulary):
            pg.parse_prompt("a slap fingerprint image, spiral pattern, "
                            "high quality, Digital Persona, FTIR optical")

    @given(spec_strategy())
    @settings(max_examples=100, deadline=None)
    def test_round_trip_property(self, spec):
        assert pg.parse_prompt(pg.format_prompt(spec)) == spec


class TestEncode:
    TABLE = pg.FactorEmbeddingTable.create(VOCAB, dim=32, seed=3)

    def test_determinism(self):
        spec = pg.PromptSpec("swipe", "whorl", "low", "Eikon", "capacitive")
        a = pg.encode_prompt(spec, self.TABLE)
        b = pg.encode_prompt(spec, self.TABLE)
        assert np.array_equal(a.tokens, b.tokens)
        assert a.vocab_version == VOCAB.checksum

    def test_null_condition_zero(self):
        tokens = pg.encode_prompt(None, self.TABLE).tokens
        assert tokens.shape == (5, 32)
        assert np.all(tokens == 0)

    def test_positional_difference(self):
        a = pg.PromptSpec("swipe", "whorl", "low", "Eikon", "capacitive")
        b = pg.PromptSpec("swipe", "whorl", "high", "Eikon", "capacitive")
        ta = pg.encode_prompt(a, self.TABLE).tokens
        tb = pg.encode_prompt(b, self.TABLE).tokens
        differs = [not np.array_equal(ta[i], tb[i]) for i in range(5)]
        assert differs == [False, False, True, False, False]

    def test_covers(self):
        assert self.TABLE.covers(VOCAB)

    def test_injective_over_sample(self):
        seen = set()
        for acq in VOCAB.values("acquisition"):
            for q in VOCAB.values("quality"):
                spec = pg.PromptSpec(acq, "whorl", q, "Eikon", "thermal")
                seen.add(pg.encode_prompt(spec, self.TABLE).tokens.tobytes())
        assert len(seen) == 15
