import csv
import json

import numpy as np
import pytest

import orpit.cli as cli
from orpit.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, run
from orpit.recursion import NumericError
from orpit.separator import SeparatorConfig, init_params, save_checkpoint
from orpit.stopper import load_classifier
from orpit.wavio import Waveform, read_wav, write_wav

TINY = SeparatorConfig(n_basis=8, enc_kernel=16, enc_stride=8, mask_layers=2, mask_channels=8,
                       dilations=(1, 2), seed=0)


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run(["synth-data", "--out-dir", str(root / "train"), "--counts", "1:4,2:4,3:4",
                "--duration", "0.2", "--seed", "1"]) == EXIT_OK
    assert run(["synth-data", "--out-dir", str(root / "three"), "--counts", "3:4",
                "--duration", "0.2", "--seed", "2"]) == EXIT_OK
    save_checkpoint(init_params(TINY), root / "m.orp")
    return root


def model(work):
    return str(work / "m.orp")


def mix_wav(work):
    return sorted((work / "train").glob("*_mix.wav"))[0]


def manifest(work, name="train"):
    return str(work / name / "manifest.jsonl")


class TestUsage:
    def test_no_command(self, capsys):
        assert run([]) == EXIT_USAGE
        assert "usage" in capsys.readouterr().err

    def test_unknown_flag(self, capsys):
        assert run(["separate", "--bogus"]) == EXIT_USAGE
        assert "usage" in capsys.readouterr().err

    @pytest.mark.parametrize("stopper", ["fixed:0", "fixed:x", "magic", "classifier"])
    def test_bad_stopper(self, work, stopper, tmp_path):
        code = run(["separate", "--model", model(work), "--in", str(mix_wav(work)),
                    "--out-dir", str(tmp_path), "--stopper", stopper])
        assert code == EXIT_USAGE

    def test_oracle_needs_references(self, work, tmp_path):
        wav = mix_wav(work)
        code = run(["separate", "--model", model(work), "--in", str(wav), "--out-dir", str(tmp_path),
                    "--stopper", "oracle"])
        assert code == EXIT_USAGE

    def test_bad_counts(self, tmp_path):
        assert run(["synth-data", "--out-dir", str(tmp_path), "--counts", "2-10"]) == EXIT_USAGE


class TestDataErrors:
    def test_missing_model(self, work, tmp_path):
        wav = mix_wav(work)
        code = run(["separate", "--model", str(tmp_path / "none.orp"), "--in", str(wav),
                    "--out-dir", str(tmp_path), "--stopper", "fixed:1"])
        assert code == EXIT_DATA

    def test_corrupt_wav(self, work, tmp_path):
        bad = tmp_path / "bad.wav"
        bad.write_bytes(b"RIFF0000WAVEjunk")
        code = run(["separate", "--model", model(work), "--in", str(bad), "--out-dir", str(tmp_path / "o"),
                    "--stopper", "fixed:1"])
        assert code == EXIT_DATA

    def test_numeric_failure(self, work, tmp_path, monkeypatch):
        def boom(*a, **k):
            raise NumericError("non-finite")
        monkeypatch.setattr(cli, "separate_recursive", boom)
        wav = mix_wav(work)
        code = run(["separate", "--model", model(work), "--in", str(wav), "--out-dir", str(tmp_path),
                    "--stopper", "fixed:1"])
        assert code == EXIT_NUMERIC


class TestSeparate:
    def test_writes_stems_and_trace(self, work, tmp_path):
        wav = mix_wav(work)
        out = tmp_path / "stems"
        assert run(["separate", "--model", model(work), "--in", str(wav), "--out-dir", str(out),
                    "--stopper", "fixed:2"]) == EXIT_OK
        assert sorted(p.name for p in out.iterdir()) == ["stem_1.wav", "stem_2.wav", "trace.json"]
        trace = json.loads((out / "trace.json").read_text())
        assert trace["estimated_count"] == 2 and trace["stems"] == ["stem_1.wav", "stem_2.wav"]
        assert len(read_wav(out / "stem_1.wav")) == len(read_wav(wav))

    def test_no_overwrite_without_force(self, work, tmp_path):
        wav = mix_wav(work)
        args = ["separate", "--model", model(work), "--in", str(wav), "--out-dir", str(tmp_path),
                "--stopper", "fixed:1"]
        write_wav(tmp_path / "stem_1.wav", Waveform(np.zeros(10), 8000))
        before = (tmp_path / "stem_1.wav").read_bytes()
        assert run(args) == EXIT_USAGE
        assert (tmp_path / "stem_1.wav").read_bytes() == before
        assert run(args + ["--force"]) == EXIT_OK
        assert (tmp_path / "stem_1.wav").read_bytes() != before

    def test_loud_stems_rescaled(self, work, tmp_path, monkeypatch):
        from orpit.recursion import separate_recursive as real

        def loud(params, x, stopper):
            trace = real(params, x, stopper)
            step = trace.steps[0]
            step.source = step.source.with_samples(np.linspace(-40.0, 20.0, len(x)))
            return trace

        monkeypatch.setattr(cli, "separate_recursive", loud)
        assert run(["separate", "--model", model(work), "--in", str(mix_wav(work)), "--out-dir", str(tmp_path),
                    "--stopper", "fixed:1"]) == EXIT_OK
        stem = read_wav(tmp_path / "stem_1.wav").samples
        np.testing.assert_allclose(stem, np.linspace(-0.9, 0.45, len(stem)), atol=1e-4)

    def test_segment_len(self, work, tmp_path):
        wav = mix_wav(work)
        assert run(["separate", "--model", model(work), "--in", str(wav), "--out-dir", str(tmp_path),
                    "--stopper", "fixed:1", "--segment-len", "400"]) == EXIT_OK
        assert run(["separate", "--model", model(work), "--in", str(wav), "--out-dir", str(tmp_path),
                    "--stopper", "fixed:1", "--segment-len", "401", "--force"]) == EXIT_USAGE


class TestPipelines:
    def test_evaluate_oracle(self, work, tmp_path, capsys):
        report = tmp_path / "out.csv"
        assert run(["evaluate", "--model", model(work), "--manifest", manifest(work),
                    "--report", str(report), "--jobs", "2"]) == EXIT_OK
        rows = list(csv.DictReader(open(report)))
        assert len(rows) == 12 and {"si_snri_db", "sdri_db"} <= set(rows[0])
        summary = json.loads((tmp_path / "out.json").read_text())
        assert summary["count"] == 12 and set(summary["per_n"]) == {"1", "2", "3"}
        assert json.loads(capsys.readouterr().out.strip().splitlines()[-1]) == summary

    def test_evaluate_reproducible(self, work, tmp_path):
        for name in ("a", "b"):
            run(["evaluate", "--model", model(work), "--manifest", manifest(work),
                 "--stopper", "fixed:1", "--report", str(tmp_path / f"{name}.csv")])
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_dominant_eval(self, work, tmp_path):
        report = tmp_path / "dom.csv"
        assert run(["dominant-eval", "--model", model(work), "--interferers", "1,3", "--per-case", "2",
                    "--seed", "7", "--report", str(report)]) == EXIT_OK
        rows = list(csv.reader(open(report)))
        assert [r[0] for r in rows[1:]] == ["1", "3"]
        assert run(["dominant-eval", "--model", model(work), "--interferers", "1,x"]) == EXIT_USAGE

    def test_train_and_finetune(self, work, tmp_path):
        out = tmp_path / "t.orp"
        code = run(["train", "--manifest", manifest(work, "three"), "--out", str(out), "--epochs", "1",
                    "--n-basis", "8", "--mask-channels", "8", "--mask-layers", "2",
                    "--report", str(tmp_path / "log.csv")])
        assert code == EXIT_OK and out.exists()
        assert len(list(csv.reader(open(tmp_path / "log.csv")))) == 2
        assert run(["finetune", "--model", str(out), "--manifest", manifest(work, "three"),
                    "--out", str(tmp_path / "f.orp"), "--epochs", "1", "--stop-grad"]) == EXIT_OK
        assert run(["finetune", "--model", str(out), "--manifest", manifest(work),
                    "--out", str(tmp_path / "g.orp"), "--epochs", "1"]) == EXIT_DATA

    def test_stopper_and_count(self, work, tmp_path, capsys):
        clf = tmp_path / "c.orp"
        assert run(["train-stopper", "--model", model(work), "--manifest", manifest(work),
                    "--out", str(clf), "--epochs", "2"]) == EXIT_OK
        assert load_classifier(clf).head == "binary"
        wav = mix_wav(work)
        capsys.readouterr()
        assert run(["count", "--model", model(work), "--classifier", str(clf), "--in", str(wav)]) == EXIT_OK
        assert 1 <= int(capsys.readouterr().out.strip()) <= 8
        assert run(["count", "--model", model(work), "--classifier", str(clf),
                    "--manifest", manifest(work), "--report", str(tmp_path / "c.json")]) == EXIT_OK
        assert np.array(json.loads((tmp_path / "c.json").read_text())["confusion"]).sum() == 12
        assert run(["count", "--model", model(work), "--classifier", str(clf)]) == EXIT_USAGE
        out = tmp_path / "sep"
        assert run(["separate", "--model", model(work), "--in", str(wav), "--out-dir", str(out),
                    "--classifier", str(clf)]) == EXIT_OK
        trace = json.loads((out / "trace.json").read_text())
        assert all(s["probability"] is not None for s in trace["steps"])

    def test_train_counter(self, work, tmp_path):
        clf = tmp_path / "k.orp"
        assert run(["train-counter", "--manifest", manifest(work), "--out", str(clf), "--epochs", "2",
                    "--report", str(tmp_path / "k.json")]) == EXIT_OK
        assert load_classifier(clf).head == "multiclass"
        assert json.loads((tmp_path / "k.json").read_text())["confusion"]
        assert run(["separate", "--model", model(work), "--in", str(mix_wav(work)),
                    "--out-dir", str(tmp_path / "x"), "--classifier", str(clf)]) == EXIT_USAGE

    def test_synth_data_reproducible(self, tmp_path):
        for name in ("a", "b"):
            assert run(["synth-data", "--out-dir", str(tmp_path / name), "--counts", "2:2",
                        "--duration", "0.1", "--seed", "3"]) == EXIT_OK
        for f in (tmp_path / "a").iterdir():
            assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()
