import numpy as np
import pytest

from pcegzsl import cli
from pcegzsl.config import ConfigError, format_config, load_config, parse_config
from pcegzsl.losses import ContrastiveVariant

TINY = """\
# small enough for a few seconds per run
epochs = 2
batch_size = 16
n_critic = 2
hidden_dim = 16
d_h = 8
d_z = 6
noise_dim = 4
n_synth_per_unseen = 10
classifier_epochs = 3
seed = 7
n_seen = 4
n_unseen = 2
attr_dim = 6
feature_dim = 8
samples_per_class = 20
"""


@pytest.fixture
def workspace(tmp_path):
    cfg = tmp_path / "tiny.cfg"
    cfg.write_text(TINY)
    assert cli.main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "data")]) == 0
    return tmp_path, cfg


def _train(tmp, cfg, out, *extra):
    return cli.main(["train", "--config", str(cfg), "--data", str(tmp / "data"), "--out", str(tmp / out), *extra])


def test_config_round_trip():
    cfg, spec = load_config()
    text = format_config(cfg, spec)
    from pcegzsl.config import build

    cfg2, spec2 = build(parse_config(text))
    assert (cfg2, spec2) == (cfg, spec)


def test_config_errors_name_the_line():
    with pytest.raises(ConfigError, match="line 2"):
        parse_config("epochs = 3\nbogus = 1\n")
    with pytest.raises(ConfigError, match="line 3"):
        parse_config("# c\n\nepochs 3\n")
    with pytest.raises(ConfigError, match="duplicate"):
        parse_config("seed = 1\nseed = 2\n")
    assert parse_config("variant = Margin\n")["variant"] is ContrastiveVariant.MARGIN


def test_gen_data_prints_summary(workspace, capsys, tmp_path):
    cli.main(["gen-data", "--config", str(workspace[1]), "--out", str(tmp_path / "again")])
    assert capsys.readouterr().out.strip() == "classes=4+2 samples=120 dim=8"
    for name in ("features.csv", "attributes.csv", "splits.txt"):
        assert (tmp_path / "data" / name).read_bytes() == (tmp_path / "again" / name).read_bytes()


def test_train_writes_outputs_and_is_idempotent(workspace):
    tmp, cfg = workspace
    assert _train(tmp, cfg, "a") == 0
    assert _train(tmp, cfg, "b") == 0
    for name in ("checkpoint.pcem", "report.csv", "config.txt", "metrics.csv"):
        assert (tmp / "a" / name).exists()
    for name in ("checkpoint.pcem", "config.txt", "metrics.csv"):
        assert (tmp / "a" / name).read_bytes() == (tmp / "b" / name).read_bytes()
    header, row = (tmp / "a" / "metrics.csv").read_text().splitlines()
    assert header == "setting,U,S,H,T" and row.startswith("adaptive,")


def test_eval_modes(workspace):
    tmp, cfg = workspace
    _train(tmp, cfg, "run", "--skip-eval")
    assert not (tmp / "run" / "metrics.csv").exists()
    ck = str(tmp / "run" / "checkpoint.pcem")
    data = str(tmp / "data")
    assert cli.main(["eval", "--checkpoint", ck, "--data", data, "--mode", "zsl", "--out", str(tmp / "z.csv")]) == 0
    assert (tmp / "z.csv").read_text().splitlines()[1].startswith("zsl,,,,")
    assert cli.main(["eval", "--checkpoint", ck, "--data", data, "--synth-per-class", "3", "--out", str(tmp / "m.csv")]) == 0
    cells = (tmp / "m.csv").read_text().splitlines()[1].split(",")
    assert len(cells) == 5 and all(cells[1:])


def test_resume_continues(workspace):
    tmp, cfg = workspace
    _train(tmp, cfg, "first", "--skip-eval")
    assert _train(tmp, cfg, "second", "--skip-eval", "--resume", str(tmp / "first" / "checkpoint.pcem")) == 0
    epochs = [line.split(",")[0] for line in (tmp / "second" / "report.csv").read_text().splitlines()[1:]]
    assert epochs == ["3", "4"]


def test_variant_all_writes_three_rows(workspace):
    tmp, cfg = workspace
    assert _train(tmp, cfg, "abl", "--variant", "all") == 0
    lines = (tmp / "abl" / "metrics.csv").read_text().splitlines()
    assert [line.split(",")[0] for line in lines[1:]] == ["plain", "margin", "adaptive"]
    for v in ("plain", "margin", "adaptive"):
        assert (tmp / "abl" / v / "checkpoint.pcem").exists()


def test_dump_embeddings(workspace):
    tmp, cfg = workspace
    _train(tmp, cfg, "run", "--skip-eval")
    out = tmp / "emb.csv"
    code = cli.main([
        "dump-embeddings", "--checkpoint", str(tmp / "run" / "checkpoint.pcem"),
        "--data", str(tmp / "data"), "--out", str(out), "--synth-per-class", "5",
    ])
    assert code == 0
    lines = out.read_text().splitlines()
    assert lines[0] == ",".join([f"e{j}" for j in range(8)] + ["label", "fake"])
    flags = np.array([int(line.rsplit(",", 1)[1]) for line in lines[1:]])
    # 4 seen classes keep 4 of 20 rows for test; 2 unseen classes give all 20
    n_real = 4 * 4 + 2 * 20
    assert (flags == 0).sum() == n_real and (flags == 1).sum() == 2 * 5


def test_exit_codes(workspace, capsys):
    tmp, cfg = workspace
    bad = tmp / "bad.cfg"
    bad.write_text("epochs = 2\nwhat = 3\n")
    assert cli.main(["gen-data", "--config", str(bad), "--out", str(tmp / "x")]) == 2
    assert "line 2" in capsys.readouterr().err
    bad.write_text("epochs = -1\n")
    assert cli.main(["gen-data", "--config", str(bad), "--out", str(tmp / "x")]) == 2
    assert _train(tmp, cfg, "nope", "--data", str(tmp / "missing")) == 3
    assert cli.main(["eval", "--checkpoint", str(tmp / "none.pcem"), "--data", str(tmp / "data"), "--config", str(cfg)]) == 3
    junk = tmp / "junk.pcem"
    junk.write_bytes(b"nope")
    assert cli.main(["eval", "--checkpoint", str(junk), "--data", str(tmp / "data"), "--config", str(cfg)]) == 3


def test_numerical_abort_exit_code(workspace, monkeypatch):
    from pcegzsl import pipeline

    real = pipeline.losses.proto_contrastive_loss
    monkeypatch.setattr(pipeline.losses, "proto_contrastive_loss", lambda *a, **k: (float("inf"),) + real(*a, **k)[1:])
    tmp, cfg = workspace
    assert _train(tmp, cfg, "boom") == 4


def test_gradcheck_command(capsys):
    assert cli.main(["gradcheck", "--configs", "2"]) == 0
    out = capsys.readouterr().out
    assert out.count("pass") == 7
    assert cli.main(["gradcheck", "--configs", "2", "--corrupt", "semantic"]) == 1
    assert "gradient check failed: semantic" in capsys.readouterr().out
