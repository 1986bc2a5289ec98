import numpy as np
import pytest

from zslgen import cli
from zslgen.config import (
    ConfigError,
    ExperimentConfig,
    config_hash,
    parse_config,
    serialize_config,
)


class TestConfigParsing:
    def test_empty_file_gives_contract_defaults(self, tmp_path):
        path = tmp_path / "empty.ini"
        path.write_text("")
        cfg = parse_config(path)
        assert cfg.train.alpha1 == cfg.train.alpha2 == cfg.train.alpha3 == 1e-3
        assert cfg.train.beta1 == 1e-3 and cfg.train.beta2 == cfg.train.beta3 == 1e-5
        assert cfg.train.sigma_train == 0.1 and cfg.train.sigma_test == 1.0
        assert cfg.classifier.samples_per_class_zsl == 100
        assert cfg.classifier.samples_per_class_gzsl == 300
        assert cfg.classifier.softmax_epochs == 20

    def test_no_file_gives_defaults(self):
        assert parse_config(None) == ExperimentConfig()

    def test_parse_serialize_parse_identity(self, tmp_path):
        path = tmp_path / "c.ini"
        path.write_text(
            "[train]\n"
            "n_way = 4\n"
            "k_shot_support = 2\n"
            "k_shot_query = 2\n"
            "alpha1 = 0.005\n"
            "first_order = false\n"
            "[network]\n"
            "gen_hidden = 32,16\n"
            "[sweep]\n"
            "sigmas = 0.25,0.75\n"
            "[output]\n"
            "out_dir = /tmp/xyz\n"
        )
        cfg = parse_config(path)
        assert cfg.train.n_way == 4 and cfg.train.k_sup == 2 and cfg.train.k_qry == 2
        assert cfg.network.gen_hidden == (32, 16)
        assert cfg.sweep.sigmas == (0.25, 0.75)
        round1 = serialize_config(cfg)
        path2 = tmp_path / "c2.ini"
        path2.write_text(round1)
        cfg2 = parse_config(path2)
        assert cfg2 == cfg
        assert serialize_config(cfg2) == round1

    def test_unknown_key_named(self, tmp_path):
        path = tmp_path / "c.ini"
        path.write_text("[train]\nbananas = 4\n")
        with pytest.raises(ConfigError, match="bananas"):
            parse_config(path)

    def test_unknown_section_named(self, tmp_path):
        path = tmp_path / "c.ini"
        path.write_text("[fruit]\nn = 1\n")
        with pytest.raises(ConfigError, match="fruit"):
            parse_config(path)

    def test_type_error_names_key(self, tmp_path):
        path = tmp_path / "c.ini"
        path.write_text("[train]\nn_way = banana\n")
        with pytest.raises(ConfigError, match="n_way"):
            parse_config(path)

    def test_out_of_range_rejected(self, tmp_path):
        path = tmp_path / "c.ini"
        path.write_text("[train]\nsigma_test = 0.0\n")
        with pytest.raises(ConfigError, match="sigma"):
            parse_config(path)

    def test_flag_overrides_beat_file(self, tmp_path):
        path = tmp_path / "c.ini"
        path.write_text("[train]\nepochs = 7\n")
        cfg = parse_config(path, {"train.epochs": "9"})
        assert cfg.train.epochs == 9

    def test_config_hash_tracks_model_fields_only(self):
        base = parse_config(None)
        same = parse_config(None, {"classifier.softmax_epochs": "5"})
        different = parse_config(None, {"train.seed": "9"})
        assert config_hash(base) == config_hash(same)
        assert config_hash(base) != config_hash(different)


TOY_ARGS = [
    "--toy-seen", "4", "--toy-unseen", "2", "--toy-attr-dim", "4",
    "--toy-feat-dim", "6", "--toy-per-class", "8", "--toy-noise", "0.05",
]

TINY_OVERRIDE_FILE = """
[network]
gen_hidden = 6
critic_hidden = 6
decoder_hidden = 5
projector_hidden = 5
modulator_hidden = 5
embed_dim = 4
z_dim = 3

[train]
n_way = 2
k_shot_support = 3
k_shot_query = 2
tasks_per_batch = 2
epochs = 3
seed = 5

[classifier]
samples_per_class_zsl = 12
samples_per_class_gzsl = 12
softmax_epochs = 5

[eval]
retrieval_ks = 3,5
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """toygen -> train once; reused by the read-only command tests."""
    root = tmp_path_factory.mktemp("cli")
    cfg_path = root / "tiny.ini"
    data_dir, run_dir = root / "data", root / "run"
    cfg_path.write_text(
        TINY_OVERRIDE_FILE
        + f"\n[data]\nfeatures = {data_dir}/features.zslf\nattributes = {data_dir}/attributes.zsla\n"
        + f"labels = {data_dir}/labels.zsll\nsplit = {data_dir}/split.txt\n"
    )
    assert cli.run(["toygen", "--config", str(cfg_path), "--out", str(data_dir)] + TOY_ARGS) == 0
    assert cli.run(["train", "--config", str(cfg_path), "--out", str(run_dir)]) == 0
    return cfg_path, data_dir, run_dir


class TestCliPipeline:
    def test_toygen_and_train_artifacts(self, workspace):
        cfg_path, data_dir, run_dir = workspace
        for name in ("features.zslf", "attributes.zsla", "labels.zsll", "split.txt"):
            assert (data_dir / name).exists()
        assert (run_dir / "checkpoint_final.ckpt").exists()
        assert (run_dir / "train.log").exists()
        assert (run_dir / "config.resolved.ini").exists()

    def test_eval_zsl_writes_report(self, workspace, tmp_path):
        cfg_path, _, run_dir = workspace
        code = cli.run([
            "eval-zsl", "--config", str(cfg_path), "--out", str(tmp_path),
            "--checkpoint", str(run_dir / "checkpoint_final.ckpt"),
        ])
        assert code == 0
        text = (tmp_path / "zsl_report.txt").read_text()
        assert "[summary]" in text and "checkpoint_sha256" in text

    def test_eval_zsl_without_checkpoint_fails(self, workspace, tmp_path):
        cfg_path, _, _ = workspace
        code = cli.run(["eval-zsl", "--config", str(cfg_path), "--out", str(tmp_path)])
        assert code == 2

    def test_eval_gzsl(self, workspace, tmp_path):
        cfg_path, _, run_dir = workspace
        code = cli.run([
            "eval-gzsl", "--config", str(cfg_path), "--out", str(tmp_path),
            "--checkpoint", str(run_dir / "checkpoint_final.ckpt"),
            "--classifier", "weighted-svm",
        ])
        assert code == 0
        text = (tmp_path / "gzsl_report.txt").read_text()
        assert "harmonic" in text

    def test_retrieve(self, workspace, tmp_path):
        cfg_path, _, run_dir = workspace
        code = cli.run([
            "retrieve", "--config", str(cfg_path), "--out", str(tmp_path),
            "--checkpoint", str(run_dir / "checkpoint_final.ckpt"),
        ])
        assert code == 0
        assert "mean_precision_at_3" in (tmp_path / "retrieval_report.txt").read_text()

    def test_synthesize(self, workspace, tmp_path):
        cfg_path, _, run_dir = workspace
        code = cli.run([
            "synthesize", "--config", str(cfg_path), "--out", str(tmp_path),
            "--checkpoint", str(run_dir / "checkpoint_final.ckpt"), "--samples", "7",
        ])
        assert code == 0
        from zslgen.datasets import load_binary

        feats = load_binary(tmp_path / "synthetic.zslf")
        assert feats.n_images == 2 * 7  # two unseen classes

    def test_sweep_grid(self, workspace, tmp_path):
        cfg_path, _, run_dir = workspace
        code = cli.run([
            "sweep", "--config", str(cfg_path), "--out", str(tmp_path),
            "--checkpoint", str(run_dir / "checkpoint_final.ckpt"),
        ])
        assert code == 0
        summary = (tmp_path / "sweep" / "summary.tsv").read_text().splitlines()
        assert len(summary) == 1 + 4 * 3  # header + grid of 4 sample counts x 3 sigmas
        reports = list((tmp_path / "sweep").glob("sweep_s*_sig*.txt"))
        assert len(reports) == 12

    def test_gradcheck_command(self, tmp_path):
        code = cli.run(["gradcheck", "--out", str(tmp_path)])
        assert code == 0
        text = (tmp_path / "gradcheck_report.txt").read_text()
        assert text.count("pass") == 3

    def test_report_determinism(self, workspace, tmp_path):
        cfg_path, _, run_dir = workspace
        for sub in ("a", "b"):
            assert cli.run([
                "eval-zsl", "--config", str(cfg_path), "--out", str(tmp_path / sub),
                "--checkpoint", str(run_dir / "checkpoint_final.ckpt"),
            ]) == 0
        assert (tmp_path / "a" / "zsl_report.txt").read_bytes() == (
            tmp_path / "b" / "zsl_report.txt"
        ).read_bytes()

    def test_bad_config_exit_code(self, tmp_path):
        bad = tmp_path / "bad.ini"
        bad.write_text("[train]\nn_way = banana\n")
        assert cli.run(["train", "--config", str(bad), "--out", str(tmp_path)]) == 2

    def test_missing_data_exit_code(self, tmp_path):
        cfg = tmp_path / "c.ini"
        cfg.write_text(
            "[data]\nfeatures = /nope.zslf\nattributes = /nope.zsla\n"
            "labels = /nope.zsll\nsplit = /nope.txt\n"
        )
        assert cli.run(["train", "--config", str(cfg), "--out", str(tmp_path)]) == 3
