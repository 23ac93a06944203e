"""Config file grammar, typing and precedence."""

import itertools

import pytest

from aeseg import config
from aeseg.config import PipelineConfig
from aeseg.models import ConfigError


def write(tmp_path, text):
    path = tmp_path / "run.cfg"
    path.write_text(text)
    return path


class TestParse:
    def test_comments_and_blanks(self):
        assert config.parse_text("# c\n\n a = 1 \nb=x=y\n") == {"a": "1", "b": "x=y"}

    def test_duplicate_key(self):
        with pytest.raises(ConfigError, match="line 2|:2:"):
            config.parse_text("seed = 1\nseed = 2\n")

    def test_missing_equals(self):
        with pytest.raises(ConfigError, match=":1:"):
            config.parse_text("seed 1\n")


class TestBuild:
    def test_defaults(self):
        cfg = config.load()
        assert cfg.seed == 42 and cfg.ae.ae_steps == 3 and cfg.ae.delta == 0.2
        assert cfg.psl.prohibit_p == 0.1 and cfg.data.image_size == (64, 64)
        assert cfg.data.seed == cfg.ae.seed == cfg.psl.seed == 42

    def test_typed_values(self, tmp_path):
        cfg = config.load(write(tmp_path, "data.image_size = 48, 48\nae.loss_converge_threshold = 0.2\n"
                                          "psl.enable = false\nae.flip = yes\nmodel.channels = 8,8,8\n"
                                          "model.strides = 2,1,1\n"))
        assert cfg.data.image_size == (48, 48)
        assert cfg.ae.loss_converge_threshold == 0.2
        assert cfg.enable_psl is False and cfg.ae.flip is True
        assert cfg.channels == (8, 8, 8)

    def test_none_value(self, tmp_path):
        cfg = config.load(write(tmp_path, "ae.loss_converge_threshold = none\n"))
        assert cfg.ae.loss_converge_threshold is None

    def test_seed_propagates(self):
        cfg = config.load(overrides={"seed": 7})
        assert cfg.data.seed == cfg.ae.seed == cfg.psl.seed == 7

    @pytest.mark.parametrize("text", ["bogus = 1\n", "ae.bogus = 1\n", "zz.delta = 0.2\n", "ae.seed = 3\n",
                                      "seed = abc\n", "ae.delta = 1.5\n", "psl.delta = 0.3\n",
                                      "enable_psl = maybe\n", "threads = 0\n", "seed = -1\n",
                                      "model.strides = 4,8\n"])
    def test_errors(self, tmp_path, text):
        with pytest.raises(ConfigError):
            config.load(write(tmp_path, text))

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            config.load(tmp_path / "nope.cfg")

    def test_round_trip(self, tmp_path):
        cfg = config.load(overrides={"seed": 5, "ae.delta": 0.3, "data.n_train": 12})
        back = config.load(write(tmp_path, config.dumps(cfg)))
        assert back.to_dict() == cfg.to_dict()
        assert back.digest() == cfg.digest()

    def test_digest_ignores_out_and_threads(self):
        a = config.load(overrides={"out": "a", "threads": 1})
        b = config.load(overrides={"out": "b", "threads": 3})
        assert a.digest() == b.digest()
        assert a.digest() != config.load(overrides={"seed": 1}).digest()

    def test_artifact_root(self, monkeypatch, tmp_path):
        cfg = config.load(overrides={"out": "run1"})
        monkeypatch.delenv(config.ARTIFACT_ROOT_ENV, raising=False)
        assert str(cfg.artifact_root()) == "run1"
        monkeypatch.setenv(config.ARTIFACT_ROOT_ENV, str(tmp_path))
        assert cfg.artifact_root() == tmp_path / "run1"


class TestPrecedence:
    @pytest.mark.parametrize("in_file,in_cli", list(itertools.product([False, True], repeat=2)))
    def test_matrix(self, tmp_path, in_file, in_cli):
        path = write(tmp_path, "ae.delta = 0.3\nseed = 9\n" if in_file else "")
        overrides = {"ae.delta": 0.4, "seed": 11} if in_cli else {"ae.delta": None, "seed": None}
        cfg = config.load(path, overrides)
        want_delta = 0.4 if in_cli else 0.3 if in_file else PipelineConfig().ae.delta
        want_seed = 11 if in_cli else 9 if in_file else 42
        assert cfg.ae.delta == want_delta
        assert cfg.seed == want_seed

    def test_alias_in_file_and_field_in_cli(self, tmp_path):
        cfg = config.load(write(tmp_path, "ae.steps = 2\n"), {"ae.ae_steps": 4})
        assert cfg.ae.ae_steps == 4
