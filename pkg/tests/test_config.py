import pytest
import yaml

from gazeshift import (
    ConfigError,
    PROFILES,
    RunConfig,
    load_run_config,
    profile_config,
    save_run_config,
)


class TestProfiles:
    def test_both_profiles_build(self):
        for name in ("desk", "full"):
            cfg = profile_config(name)
            assert isinstance(cfg, RunConfig)
            assert cfg.schema_version == 1

    def test_desk_scale(self):
        cfg = profile_config("desk")
        assert cfg.scene.width == 64
        assert cfg.tokenizer.frame_size == 64
        assert cfg.transformer.dim == cfg.tokenizer.dim == 64
        assert cfg.n_anchors == 5
        assert (cfg.distill.alpha, cfg.distill.beta, cfg.distill.lam) == (1.0, 1.0, 500.0)
        assert cfg.distill.n_recon == 16
        assert cfg.schedule.i_range == (27, 32)

    def test_full_scale(self):
        cfg = profile_config("full")
        assert cfg.scene.width == 224
        assert cfg.transformer.dim == 768
        assert cfg.transformer.heads == 12
        assert cfg.transformer.ff_dim == 3072
        assert cfg.schedule.t_total == 1000
        assert cfg.schedule.t_reverse == 100
        assert cfg.distill.optim.lr == pytest.approx(1e-5)
        assert cfg.distill.optim.batch_size == 4
        assert cfg.expert_optim.lr == pytest.approx(1e-4)
        assert cfg.expert_optim.batch_size == 80

    def test_unknown_profile_rejected(self):
        with pytest.raises(ConfigError):
            profile_config("mainframe")

    def test_override_kwargs(self):
        cfg = profile_config("desk", seed=7, out_dir="runs/x")
        assert cfg.seed == 7 and cfg.out_dir == "runs/x"


class TestValidation:
    def test_wrong_schema_version(self):
        with pytest.raises(ConfigError):
            profile_config("desk", schema_version=99)

    def test_scene_tokenizer_mismatch(self):
        doc = dict(PROFILES["desk"])
        doc = {**doc, "scene": {"width": 32, "height": 32}}
        with pytest.raises(ConfigError):
            profile_config("desk", scene={"width": 32, "height": 32})

    def test_unknown_top_level_key(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text(yaml.safe_dump({"profile": "desk", "bogus_block": {"a": 1}}))
        with pytest.raises(ConfigError):
            load_run_config(p)


class TestYamlLoading:
    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_run_config(tmp_path / "nope.yaml")

    def test_malformed_yaml(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text("profile: [unclosed")
        with pytest.raises(ConfigError):
            load_run_config(p)

    def test_non_mapping_root(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text("- just\n- a\n- list\n")
        with pytest.raises(ConfigError):
            load_run_config(p)

    def test_profile_inheritance_with_block_override(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text(yaml.safe_dump({
            "profile": "desk",
            "seed": 3,
            "distill": {"lam": 0.0},
        }))
        cfg = load_run_config(p)
        assert cfg.seed == 3
        assert cfg.distill.lam == 0.0
        # untouched keys of the same block keep the profile values
        assert cfg.distill.n_recon == 16
        assert cfg.transformer.ff_dim == 128

    def test_unknown_profile_key(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text("profile: galaxy\n")
        with pytest.raises(ConfigError):
            load_run_config(p)

    def test_round_trip(self, tmp_path):
        cfg = profile_config("desk", seed=11, out_dir="runs/rt")
        p = tmp_path / "saved.yaml"
        save_run_config(cfg, p)
        again = load_run_config(p)
        assert again.seed == 11 and again.out_dir == "runs/rt"
        assert again.distill == cfg.distill
        assert again.tokenizer == cfg.tokenizer
        assert again.schedule.i_range == cfg.schedule.i_range
        p2 = tmp_path / "saved2.yaml"
        save_run_config(again, p2)
        assert p.read_text() == p2.read_text()
