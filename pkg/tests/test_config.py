import pytest

from entroprune.config import ConfigError, load_config, parse_config


class TestParse:
    def test_typed_values(self):
        cfg = parse_config("""
# comment
[run]
seed = 3
dtype = f64
[dilute]
schedule = cosine   # inline
compensation = false
decay_steps = 0
[select]
method = nose
ratio = 0.4
""")
        assert cfg.get("run", "seed") == 3
        assert cfg.get("dilute", "compensation") is False
        assert cfg.get("dilute", "decay_steps") == 0
        assert cfg.get("select", "ratio") == 0.4
        assert cfg.get("train", "lr", 1.0) == 1.0

    @pytest.mark.parametrize("text,key", [
        ("[model]\nwidth = 3\n", "model.width"),
        ("[bogus]\nx = 1\n", "bogus"),
        ("[train]\nlr = -1\n", "train.lr"),
        ("[train]\nepochs = many\n", "train.epochs"),
        ("[dilute]\nschedule = step\n", "dilute.schedule"),
        ("[select]\nratio = 1.5\nmethod = nose\n", "select.ratio"),
        ("[select]\nn = 2\n", "select.method"),
        ("[dilute]\nepochs = 2\n", "dilute.schedule"),
        ("[dilute]\nschedule = linear\ncompensation = maybe\n", "dilute.compensation"),
    ])
    def test_rejections_name_the_key(self, text, key):
        with pytest.raises(ConfigError, match=key.replace(".", r"\.")):
            parse_config(text)

    def test_n_and_ratio_exclusive(self):
        with pytest.raises(ConfigError):
            parse_config("[select]\nmethod = nose\nn = 2\nratio = 0.4\n")

    def test_malformed(self):
        with pytest.raises(ConfigError):
            parse_config("key = value without section\n")

    def test_data_paths_relative_to_file(self, tmp_path):
        (tmp_path / "d").mkdir()
        (tmp_path / "d" / "train.eltd").write_bytes(b"")
        (tmp_path / "run.ini").write_text("[data]\ntrain = d/train.eltd\n")
        cfg = load_config(tmp_path / "run.ini")
        assert cfg.get("data", "train") == str(tmp_path / "d" / "train.eltd")

    def test_missing_data_file(self, tmp_path):
        (tmp_path / "run.ini").write_text("[data]\ntest = nowhere.eltd\n")
        with pytest.raises(ConfigError, match="data.test"):
            load_config(tmp_path / "run.ini")

    def test_missing_config_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "absent.ini")
