import json

import numpy as np
import pytest

from printforge import cli, config, corpus, masterprint


def write(tmp_path, text, name="run.ini"):
    p = tmp_path / name
    p.write_text(text)
    return p


class TestLoadConfig:
    def test_defaults_without_file(self):
        cfg = config.load_config(None)
        assert cfg.train.steps == 3000
        assert cfg.corpus.size == 200
        assert cfg.eval.leakage_threshold == 0.231

    def test_overrides(self, tmp_path):
        p = write(tmp_path, "[train]\nsteps = 12\nlr = 0.002\n\n[run]\nseed = 9\n")
        cfg = config.load_config(p)
        assert cfg.train.steps == 12
        assert cfg.train.lr == pytest.approx(0.002)
        assert cfg.seed == 9
        assert cfg.train.batch == 4  # untouched default

    def test_unknown_key(self, tmp_path):
        p = write(tmp_path, "[train]\nstepz = 12\n")
        with pytest.raises(config.ConfigError, match="stepz"):
            config.load_config(p)

    def test_unknown_section(self, tmp_path):
        p = write(tmp_path, "[trian]\nsteps = 12\n")
        with pytest.raises(config.ConfigError, match="trian"):
            config.load_config(p)

    def test_bad_type(self, tmp_path):
        p = write(tmp_path, "[train]\nsteps = many\n")
        with pytest.raises(config.ConfigError, match="many"):
            config.load_config(p)

    def test_missing_file(self, tmp_path):
        with pytest.raises(config.ConfigError, match="not found"):
            config.load_config(tmp_path / "absent.ini")

    def test_malformed_file(self, tmp_path):
        p = write(tmp_path, "steps = 12\nno section header")
        with pytest.raises(config.ConfigError):
            config.load_config(p)

    def test_to_text_round_trip(self, tmp_path):
        cfg = config.RunConfig()
        cfg.seed = 5
        cfg.train.steps = 42
        cfg.generate.sampler = "ancestral"
        p = write(tmp_path, cfg.to_text())
        back = config.load_config(p)
        assert back.to_text() == cfg.to_text()


class TestValidation:
    def test_bad_mode(self):
        cfg = config.RunConfig()
        cfg.train.mode = "frozen"
        with pytest.raises(config.ConfigError, match="mode"):
            config.validate_config(cfg)

    def test_bad_schedule(self):
        cfg = config.RunConfig()
        cfg.train.schedule = "quadratic"
        with pytest.raises(config.ConfigError):
            config.validate_config(cfg)

    def test_bad_style_source(self):
        cfg = config.RunConfig()
        cfg.generate.style_source = "magic"
        with pytest.raises(config.ConfigError, match="style_source"):
            config.validate_config(cfg)

    def test_drop_prob_bounds(self):
        cfg = config.RunConfig()
        cfg.train.drop_prob = 1.5
        with pytest.raises(config.ConfigError, match="drop_prob"):
            config.validate_config(cfg)

    def test_n_identities_ceil(self):
        c = config.CorpusConfig(size=200, impressions=3)
        assert c.n_identities == 67

    def test_paper_scale_warning(self):
        cfg = config.RunConfig()
        assert config.paper_scale_warning(cfg) is None
        cfg.train.steps = 100_000
        assert "desk-scale" in config.paper_scale_warning(cfg)


class TestCLI:
    def test_missing_config_exit_2(self, tmp_path, capsys):
        rc = cli.main(["gen-corpus", "--config", str(tmp_path / "nope.ini"),
                       "--out", str(tmp_path / "c")])
        assert rc == 2
        assert "config error" in capsys.readouterr().err

    def test_missing_checkpoint_exit_3(self, tmp_path, capsys):
        rc = cli.main(["generate", "--checkpoint", str(tmp_path / "no.gprnt"),
                       "--out", str(tmp_path / "g")])
        assert rc == 3
        assert "data error" in capsys.readouterr().err

    def test_missing_corpus_exit_3(self, tmp_path, capsys):
        rc = cli.main(["train", "--corpus", str(tmp_path / "empty"),
                       "--out", str(tmp_path / "m.gprnt")])
        assert rc == 3

    def test_evaluate_missing_dataset_exit_3(self, tmp_path):
        rc = cli.main(["evaluate", str(tmp_path / "nothing"),
                       "--out", str(tmp_path / "r")])
        assert rc == 3

    def test_bad_threads_exit_2(self, tmp_path, monkeypatch, capsys):
        monkeypatch.setenv("PRINTFORGE_THREADS", "lots")
        rc = cli.main(["gen-corpus", "--out", str(tmp_path / "c")])
        assert rc == 2
        assert "PRINTFORGE_THREADS" in capsys.readouterr().err

    def test_style_extract(self, tmp_path, capsys):
        m = masterprint.generate_masterprint("whorl", 123)
        img = tmp_path / "ref.png"
        corpus.save_png(img, m.image)
        out = tmp_path / "styles.json"
        rc = cli.main(["style-extract", "--out", str(out), str(img)])
        assert rc == 0
        data = json.loads(out.read_text())
        assert len(data) == 1
        (rec,) = data
        assert len(rec["embedding"]) == 256
        assert np.all(np.isfinite(rec["embedding"]))

    def test_seed_flag_overrides(self, tmp_path):
        # two corpora with different --seed must differ
        a, b, c = (tmp_path / n for n in "abc")
        cfg = config.RunConfig()
        cfg.corpus.size = 6
        cfg.corpus.impressions = 3
        p = write(tmp_path, cfg.to_text())
        for out, seed in ((a, "1"), (b, "2"), (c, "1")):
            rc = cli.main(["gen-corpus", "--config", str(p), "--seed", seed,
                           "--out", str(out)])
            assert rc == 0
        a_imgs = sorted(f.name for f in (a / "images").glob("*.png"))
        assert a_imgs and a_imgs == sorted(
            f.name for f in (c / "images").glob("*.png"))
        same = all((a / "images" / n).read_bytes() == (c / "images" / n).read_bytes()
                   for n in a_imgs)
        diff = any((a / "images" / n).read_bytes() != (b / "images" / n).read_bytes()
                   for n in a_imgs if (b / "images" / n).exists())
        assert same and diff
