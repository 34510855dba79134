import json

import pytest

from surds import checkpoint as ckpt
from surds import data
from surds.cli import main

TINY = ["--width", "1", "--image-size", "32", "--stride", "4", "--embed-dim", "8", "--save-every", "0"]


@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--writers", "4", "--per-writer", "6", "--seed", "7", "--out", str(out / "toy"),
                 "--split", "0.5"]) == 0
    return out


@pytest.fixture(scope="module")
def pretrained(toy):
    out = toy / "pre"
    assert main(["pretrain", "--manifest", str(toy / "toy" / "train.csv"), "--out", str(out),
                 "--epochs", "2", *TINY]) == 0
    return out / "pretrain-latest.ckpt"


def _log(path):
    return [json.loads(line) for line in path.read_text().splitlines()]


def test_synth_writes_48_rows(toy):
    rows = (toy / "toy" / "manifest.csv").read_text().splitlines()
    assert len(rows) == 49
    tr = data.load_manifest(toy / "toy" / "train.csv")
    te = data.load_manifest(toy / "toy" / "test.csv")
    assert len(tr.writer_ids) == len(te.writer_ids) == 2


def test_synth_same_seed_identical(tmp_path):
    for name in ("a", "b"):
        assert main(["--seed", "3", "synth", "--writers", "2", "--per-writer", "2", "--out", str(tmp_path / name)]) == 0
    assert (tmp_path / "a" / "manifest.csv").read_bytes() == (tmp_path / "b" / "manifest.csv").read_bytes()
    assert (tmp_path / "a" / "w001" / "f_01.png").read_bytes() == (tmp_path / "b" / "w001" / "f_01.png").read_bytes()


def test_missing_out_is_usage_error(capsys):
    with pytest.raises(SystemExit) as e:
        main(["synth", "--writers", "2"])
    assert e.value.code == 2
    assert "--out" in capsys.readouterr().err


def test_split_command(toy, tmp_path):
    assert main(["split", "--manifest", str(toy / "toy" / "manifest.csv"), "--train-ratio", "0.75",
                 "--out", str(tmp_path)]) == 0
    assert len(data.load_manifest(tmp_path / "train.csv").writer_ids) == 3


def test_pretrain_one_epoch_one_record(toy, tmp_path):
    assert main(["pretrain", "--manifest", str(toy / "toy" / "train.csv"), "--out", str(tmp_path),
                 "--epochs", "1", *TINY[:-2]]) == 0
    assert len(_log(tmp_path / "pretrain-log.jsonl")) == 1
    assert (tmp_path / "pretrain-0001.ckpt").is_file()


def test_pretrain_no_attention_metadata(toy, tmp_path):
    assert main(["pretrain", "--manifest", str(toy / "toy" / "train.csv"), "--out", str(tmp_path),
                 "--epochs", "1", "--no-attention", *TINY]) == 0
    archive = ckpt.read_checkpoint(tmp_path / "pretrain-latest.ckpt")
    assert archive["metadata"]["attention"] is False
    assert archive["model_config"]["attention"] is False


def test_pretrain_provenance(toy, pretrained):
    meta = ckpt.read_checkpoint(pretrained)["metadata"]
    manifest = toy / "toy" / "train.csv"
    assert meta["provenance"]["manifest_sha256"] == data.manifest_hash(manifest)
    assert meta["provenance"]["run_config"]["epochs"] == 2


@pytest.mark.parametrize("extra", [[], ["--from-scratch", "--init", "x.ckpt"]])
def test_finetune_init_flags_are_usage_errors(toy, tmp_path, extra):
    with pytest.raises(SystemExit) as e:
        main(["finetune", "--manifest", str(toy / "toy" / "train.csv"), "--out", str(tmp_path), *extra])
    assert e.value.code == 2


def test_finetune_full_and_from_scratch(toy, pretrained, tmp_path):
    train = str(toy / "toy" / "train.csv")
    assert main(["finetune", "--manifest", train, "--out", str(tmp_path / "full"), "--init", str(pretrained),
                 "--epochs", "1", "--save-every", "0"]) == 0
    assert main(["finetune", "--manifest", train, "--out", str(tmp_path / "rn"), "--from-scratch",
                 "--epochs", "1", *TINY]) == 0
    full = ckpt.read_checkpoint(tmp_path / "full" / "finetune-latest.ckpt")
    rn = ckpt.read_checkpoint(tmp_path / "rn" / "finetune-latest.ckpt")
    assert full["metadata"]["pretrained"] is True and rn["metadata"]["pretrained"] is False
    # architecture follows the stage-1 checkpoint
    assert full["model_config"] == ckpt.read_checkpoint(pretrained)["model_config"]


def test_finetune_architecture_conflict(toy, pretrained, tmp_path):
    with pytest.raises(SystemExit) as e:
        main(["finetune", "--manifest", str(toy / "toy" / "train.csv"), "--out", str(tmp_path),
              "--init", str(pretrained), "--width", "2"])
    assert e.value.code == 2


def test_evaluate_report_and_determinism(toy, pretrained, tmp_path, capsys):
    args = ["evaluate", "--manifest", str(toy / "toy" / "test.csv"), "--checkpoint", str(pretrained),
            "--k", "3", "--seed", "2", "--out", str(tmp_path), "--embeddings", str(tmp_path / "emb.bin")]
    assert main(args) == 0
    out = capsys.readouterr().out
    assert "Accuracy:" in out and "FAR:" in out and "FRR:" in out
    first = (tmp_path / "report.json").read_bytes()
    rep = json.loads(first)
    assert (rep["n_genuine"], rep["n_forged"], rep["k"], rep["seed"]) == (6, 12, 3, 2)
    assert rep["provenance"]["manifest_sha256"] == data.manifest_hash(toy / "toy" / "test.csv")
    assert rep["provenance"]["checkpoint"]["stage"] == "pretrain"
    assert (tmp_path / "emb.bin.index").is_file()
    assert main(args) == 0
    assert (tmp_path / "report.json").read_bytes() == first


def test_evaluate_k_too_large_names_writer(toy, pretrained, tmp_path, capsys):
    code = main(["evaluate", "--manifest", str(toy / "toy" / "test.csv"), "--checkpoint", str(pretrained),
                 "--k", "6", "--out", str(tmp_path)])
    assert code == 1
    assert "w00" in capsys.readouterr().err
    assert not (tmp_path / "report.json").exists()


def test_config_precedence(toy, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("epochs = 3\nseed = 5\nwarmup_epochs = 0  # no warmup\n"
                   "width = 1\nimage_size = 32\nstride = 4\nembed_dim = 8\nsave_every = 0\n")
    assert main(["--config", str(cfg), "pretrain", "--manifest", str(toy / "toy" / "train.csv"),
                 "--out", str(tmp_path / "o"), "--epochs", "1"]) == 0
    meta = ckpt.read_checkpoint(tmp_path / "o" / "pretrain-latest.ckpt")["metadata"]
    assert meta["config"]["epochs"] == 1          # flag beats file
    assert meta["seed"] == 5                      # file beats default
    assert meta["config"]["momentum"] == 0.9      # default


def test_config_unknown_key(toy, tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("epoch = 3\n")
    with pytest.raises(SystemExit) as e:
        main(["--config", str(cfg), "synth", "--out", str(tmp_path)])
    assert e.value.code == 2


def test_missing_manifest_exits_nonzero(tmp_path, capsys):
    assert main(["pretrain", "--manifest", str(tmp_path / "nope.csv"), "--out", str(tmp_path)]) == 1
    assert "nope.csv" in capsys.readouterr().err
