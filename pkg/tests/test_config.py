import dataclasses

import pytest

from siamst.config import RunConfig, config_from_dict, dump_config, load_config
from siamst.errors import ConfigurationError
from siamst.siamese import average_checkpoints


class TestPublishedDefaults:
    def test_stage_defaults(self):
        cfg = RunConfig()
        assert (cfg.encoder.alpha, cfg.encoder.beta, cfg.encoder.gamma) == (1.0, 1.0, 1.0)
        kd = cfg.st.kd
        assert (kd.lam, kd.temperature, kd.k) == (0.5, 1.3, 8)
        assert dataclasses.replace(kd, enabled=False).smoothing == 0.2
        assert cfg.decode.beam_size == 5
        assert cfg.average_best == 10 and cfg.siamese.keep_best == 10 and cfg.st.keep_best == 10
        assert average_checkpoints.__defaults__[0] == 10

    def test_optimizer_defaults(self):
        cfg = RunConfig()
        assert cfg.siamese.learning_rate == 2e-4
        assert cfg.siamese.warmup_steps == 1000
        assert cfg.siamese.patience == 5000
        assert cfg.st.learning_rate == 5e-5

    def test_filter_defaults(self):
        f = RunConfig().filter
        assert (f.target_corpus_wer, f.st_wer_threshold, f.min_characters) == (0.11, 0.5, 4)
        assert (f.length_ratio_min, f.length_ratio_max, f.tfidf_threshold) == (0.5, 2.0, 0.8)

    def test_segment_grid_default(self):
        s = RunConfig().segment
        assert (s.grid_smallest, s.grid_upper) == (0.2, 30.0)


class TestLoading:
    def test_yaml_and_overrides(self, tmp_path):
        path = tmp_path / "c.yaml"
        path.write_text("seed: 3\nsiamese:\n  max_steps: 10\n  learning_rate: 2e-3\n")
        cfg = load_config(path, ["st.kd.lam=0.25", "encoder.sinkhorn.epsilon=0.05"])
        assert cfg.seed == 3 and cfg.siamese.seed == 3 and cfg.st.seed == 3
        assert cfg.siamese.max_steps == 10 and cfg.siamese.learning_rate == 2e-3
        assert cfg.st.kd.lam == 0.25 and cfg.encoder.sinkhorn.epsilon == 0.05

    def test_unknown_key_has_path(self):
        with pytest.raises(ConfigurationError, match="st.kd.lamda"):
            config_from_dict({"st": {"kd": {"lamda": 0.3}}})

    def test_stage_seed_reserved(self):
        with pytest.raises(ConfigurationError):
            config_from_dict({"siamese": {"seed": 1}})

    def test_type_errors(self):
        with pytest.raises(ConfigurationError):
            config_from_dict({"siamese": {"max_steps": "many"}})
        with pytest.raises(ConfigurationError):
            config_from_dict({"st": {"kd": {"enabled": "yes please"}}})

    def test_validation_runs(self):
        with pytest.raises(ConfigurationError):
            config_from_dict({"st": {"kd": {"lam": 1.5}}})

    def test_bad_override(self):
        with pytest.raises(ConfigurationError):
            load_config(None, ["seed"])

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigurationError):
            load_config(tmp_path / "nope.yaml")


class TestSerialization:
    def test_dump_round_trip(self, tmp_path):
        cfg = load_config(None, ["seed=7", "st.kd.enabled=false", "decode.beam_size=3"])
        path = tmp_path / "c.yaml"
        path.write_text(dump_config(cfg))
        back = load_config(path)
        assert back == cfg and back.hash() == cfg.hash()

    def test_hash_tracks_values(self):
        assert RunConfig().hash() == RunConfig().hash()
        assert RunConfig().hash() != RunConfig(seed=1).hash()
        assert RunConfig().with_seed(1).hash() == RunConfig(seed=1).hash()

    def test_with_seed_is_a_copy(self):
        base = RunConfig()
        other = base.with_seed(5)
        assert base.siamese.seed == 0 and other.siamese.seed == 5
