import json

import pytest

from envcodegen.cli import ConfigError, main, read_config_file, resolve
from envcodegen.corpus import load_dataset

SMALL = ["--set", "H=8", "--set", "decoder_sym_embed=6", "--set", "layers=1",
         "--set", "dropout_p=0", "--set", "epochs=1", "--set", "batch_size=8"]


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out", str(d / "train.jsonl"), "--n", "24", "--seed", "1"]) == 0
    assert main(["synth", "--out", str(d / "test.jsonl"), "--n", "6", "--seed", "2"]) == 0
    return d


def _run(argv, capsys):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def test_synth_writes_loadable_records(data, java):
    assert len(load_dataset(data / "train.jsonl", java)) == 24


def test_preprocess_stats_and_rerun(data, java, tmp_path, capsys):
    out = tmp_path / "pre"
    code, _, _ = _run(["preprocess", "--train-file", data / "train.jsonl", "--out", out], capsys)
    assert code == 0
    stats = json.loads((out / "stats.json").read_text())
    assert stats["thresholds"] == {"identifier": 7, "type": 2, "rule": 2}
    kept = load_dataset(data / "train.jsonl", java)
    assert stats["counts"]["kept"] == len(kept) == stats["counts"]["read"]
    avg = sum(len(e.nl) for e in kept) / len(kept)
    assert stats["statistics"]["avg_nl_length"] == pytest.approx(avg)
    first = (out / "vocab.json").read_bytes(), (out / "stats.json").read_bytes()
    _run(["preprocess", "--train-file", data / "train.jsonl", "--out", out], capsys)
    assert ((out / "vocab.json").read_bytes(), (out / "stats.json").read_bytes()) == first


def test_preprocess_threshold_flag(data, tmp_path, capsys):
    out = tmp_path / "pre"
    _run(["preprocess", "--train-file", data / "train.jsonl", "--out", out,
          "--set", "threshold_identifier=1"], capsys)
    assert json.loads((out / "stats.json").read_text())["thresholds"]["identifier"] == 1


@pytest.mark.parametrize("system", ["ours", "retrieval", "seq2seq", "seq2prod"])
def test_train_predict_eval(system, data, tmp_path, capsys):
    ckpt = tmp_path / "m.ckpt"
    preds = tmp_path / "p.txt"
    code, _, err = _run(["train", "--system", system, "--train-file", data / "train.jsonl",
                         "--checkpoint", ckpt] + SMALL, capsys)
    assert code == 0, err
    code, _, err = _run(["predict", "--checkpoint", ckpt, "--test-file", data / "test.jsonl",
                         "--out", preds, "--train-file", data / "train.jsonl"], capsys)
    assert code == 0, err
    assert len(preds.read_text().splitlines()) == 6
    code, out, err = _run(["eval", "--predictions", preds, "--test-file", data / "test.jsonl"],
                          capsys)
    assert code == 0, err
    report = json.loads(out.splitlines()[0])
    assert 0.0 <= report["bleu"] <= 100.0 and "parse_failure_rate" in report["extra"]
    if system in ("ours", "seq2prod"):
        assert report["extra"]["parse_failure_rate"] == 0.0
    again = tmp_path / "q.txt"
    _run(["predict", "--checkpoint", ckpt, "--test-file", data / "test.jsonl", "--out", again,
          "--train-file", data / "train.jsonl"], capsys)
    assert again.read_bytes() == preds.read_bytes()


def test_eval_identical_files(data, tmp_path, java, capsys):
    refs = tmp_path / "refs.txt"
    refs.write_text("".join(" ".join(e.tokens) + "\n"
                            for e in load_dataset(data / "test.jsonl", java)))
    code, out, _ = _run(["eval", "--predictions", refs, "--test-file", data / "test.jsonl"],
                        capsys)
    report = json.loads(out.splitlines()[0])
    assert code == 0 and report["exact_match"] == 100.0 and report["bleu"] == 100.0


def test_ablate_table(data, tmp_path, capsys):
    out = tmp_path / "table.txt"
    code, stdout, err = _run(["ablate", "--train-file", data / "train.jsonl", "--out", out]
                             + SMALL, capsys)
    assert code == 0, err
    lines = out.read_text().splitlines()
    assert len(lines) == 7 and lines[0].startswith("Model")
    assert [l.split("  ")[0] for l in lines[2:]] == ["Full", "-Variables", "-Methods",
                                                      "-Two step attention",
                                                      "-Camel-case encoding"]


def test_missing_checkpoint(data, tmp_path, capsys):
    code, _, err = _run(["predict", "--checkpoint", tmp_path / "nope.ckpt", "--test-file",
                         data / "test.jsonl", "--out", tmp_path / "p.txt"], capsys)
    assert code == 1 and err.startswith("error: input:") and len(err.strip().splitlines()) == 1


def test_missing_input_file(tmp_path, capsys):
    code, _, err = _run(["train", "--train-file", tmp_path / "nope.jsonl", "--checkpoint",
                         tmp_path / "m.ckpt"], capsys)
    assert code == 1 and err.startswith("error: input:")


def test_architecture_mismatch(data, tmp_path, capsys):
    ckpt = tmp_path / "m.ckpt"
    _run(["train", "--train-file", data / "train.jsonl", "--checkpoint", ckpt] + SMALL, capsys)
    code, _, err = _run(["predict", "--checkpoint", ckpt, "--test-file", data / "test.jsonl",
                         "--out", tmp_path / "p.txt", "--set", "H=16"], capsys)
    assert code == 1 and err.startswith("error: mismatch:")
    # decoding settings may change
    code, _, err = _run(["predict", "--checkpoint", ckpt, "--test-file", data / "test.jsonl",
                         "--out", tmp_path / "p.txt", "--beam", "1"], capsys)
    assert code == 0, err


def test_unknown_key(tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("H = 8\nbogus = 1\n")
    code, _, err = _run(["synth", "--config", cfg, "--out", tmp_path / "s.jsonl"], capsys)
    assert code == 1 and "unknown config key 'bogus'" in err


def test_usage_error_exit_two(capsys):
    with pytest.raises(SystemExit) as e:
        main(["train", "--beam", "x"])
    assert e.value.code == 2
    assert capsys.readouterr().err.startswith("error: usage:")


def test_flags_override_config_file(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("# comment\nH = 16\nbeam = 5\nuse_copy = true\n")
    run, config, explicit = resolve(read_config_file(cfg), {"H": "8", "use_copy": False})
    assert config.H == 8 and config.beam_size == 5 and config.use_copy is False
    assert {"H", "beam_size", "use_copy"} <= explicit


def test_bad_config_line(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("H 8\n")
    with pytest.raises(ConfigError, match=":1:"):
        read_config_file(cfg)
