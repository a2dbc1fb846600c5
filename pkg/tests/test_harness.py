import csv
import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, strategies as st

from msesc import harness
from msesc.audio import ClassSpec, SynthSpec
from msesc.cli import main
from msesc.config import RunConfig, dump_run_config, load_run_config
from msesc.features import read_features
from msesc.harness import (
    ABLATIONS,
    ManifestError,
    ablation_config,
    fold_split,
    load_manifest,
    lr_schedule,
    write_manifest,
)
from msesc.model import ModelConfig
from msesc.nn import TrainingError
from msesc.tensor import Tensor

TINY_MODEL = ModelConfig(
    num_classes=2, widths=(2, 2, 2, 2), wave_channels=(2, 2, 16), attention_width=2, hidden=4, freq_pool=32
)
TINY = RunConfig(model=TINY_MODEL, epochs=1, batch_size=4)
SPEC = SynthSpec([ClassSpec("tone", 4), ClassSpec("noise-band", 4)], seed=1, duration_s=4.0)


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    harness.write_synth(SPEC, out, n_folds=2)
    return out


@pytest.fixture(scope="module")
def manifest(synth_dir):
    return load_manifest(synth_dir / "manifest.csv")


@pytest.fixture(scope="module")
def tiny_ini(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "tiny.ini"
    p.write_text(dump_run_config(TINY))
    return p


class TestManifest:
    def test_esc50_shape(self, tmp_path):
        rows = [(f"audio/{i}.wav", f"class{i % 50:02d}", i % 5) for i in range(2000)]
        write_manifest(tmp_path / "m.csv", rows)
        m = load_manifest(tmp_path / "m.csv")
        assert len(m.classes) == 50 and m.folds == [0, 1, 2, 3, 4]
        assert m.classes == sorted(m.classes)
        assert m.entries[0].path == tmp_path / "audio/0.wav"

    @pytest.mark.parametrize(
        "text, match",
        [
            ("", "empty"),
            ("path,label,fold\n", "no entries"),
            ("path,label,split\na.wav,x,0\n", ":1:"),
            ("path,label,fold\na.wav,x,0\nb.wav,y,0\na.wav,x,1\n", "a.wav"),
            ("path,label,fold\na.wav,x,0\nb.wav,y,2\n", "contiguous"),
            ("path,label,fold\na.wav,x,zero\n", ":2:"),
            ("path,label,fold\na.wav,x\n", ":2:"),
        ],
    )
    def test_errors(self, tmp_path, text, match):
        (tmp_path / "m.csv").write_text(text)
        with pytest.raises(ManifestError, match=match):
            load_manifest(tmp_path / "m.csv")

    def test_duplicate_reports_line(self, tmp_path):
        (tmp_path / "m.csv").write_text("path,label,fold\na.wav,x,0\nb.wav,y,1\na.wav,x,1\n")
        with pytest.raises(ManifestError, match=r"m.csv:4: duplicate path 'a.wav'"):
            load_manifest(tmp_path / "m.csv")

    def test_synth_manifest(self, manifest):
        assert manifest.classes == ["noise-band", "tone"]
        assert manifest.folds == [0, 1]
        assert len(manifest.entries) == 8


class TestSchedule:
    @pytest.mark.parametrize("epoch, lr", [(0, 1e-3), (99, 1e-3), (100, 1e-4), (250, 1e-5)])
    def test_examples(self, epoch, lr):
        assert lr_schedule(epoch, 1e-3) == pytest.approx(lr, rel=1e-12)

    @given(st.integers(0, 10_000), st.integers(0, 10_000))
    def test_piecewise_constant_non_increasing(self, a, b):
        lo, hi = sorted((a, b))
        assert lr_schedule(hi) <= lr_schedule(lo)
        if lo // 100 == hi // 100:
            assert lr_schedule(hi) == lr_schedule(lo)

    def test_negative_epoch(self):
        with pytest.raises(ValueError):
            lr_schedule(-1)


def test_fold_split_detects_leak():
    clips, folds, _ = harness.synth_folds(SPEC, 2)
    clips[1].source_id = clips[0].source_id
    assert folds[0] != folds[1]
    with pytest.raises(RuntimeError, match="both train and test"):
        fold_split(clips, folds, folds[0])


def test_synth_folds_balanced():
    clips, folds, classes = harness.synth_folds(SPEC, 2)
    for label in range(len(classes)):
        per_fold = [sum(1 for c, f in zip(clips, folds) if c.label == label and f == k) for k in (0, 1)]
        assert per_fold == [2, 2]


@pytest.fixture(scope="module")
def report(manifest, tmp_path_factory):
    out = tmp_path_factory.mktemp("cv")
    return harness.cross_validate(manifest, TINY, out), out


class TestCrossValidation:
    def test_report_contract(self, report):
        rep, out = report
        assert len(rep.fold_accuracies) == 2 and rep.folds == [0, 1]
        assert rep.mean_accuracy == pytest.approx(np.mean(rep.fold_accuracies))
        conf = np.array(rep.confusion)
        assert conf.sum() == 8
        assert rep.mean_accuracy * 2 == pytest.approx(sum(rep.fold_accuracies))
        body = json.loads((out / "metrics.json").read_text())
        assert body["config_hash"] == TINY.hash() and "wall_clock_s" not in body
        assert (out / "fold0.ckpt").exists() and (out / "fold1.ckpt").exists()
        with open(out / "confusion.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["true\\pred", "noise-band", "tone"]

    def test_accuracy_matches_confusion(self, report, manifest):
        rep, out = report
        conf = np.array(rep.confusion)
        # pooled accuracy equals the fold mean when folds are equally sized
        assert np.trace(conf) / conf.sum() == pytest.approx(rep.mean_accuracy)

    def test_needs_two_folds(self):
        clips, folds, classes = harness.synth_folds(SPEC, 2)
        with pytest.raises(ValueError):
            harness.cross_validate_clips(clips, [0] * len(clips), TINY, classes)

    def test_checkpoint_evaluates_identically(self, report, manifest):
        rep, out = report
        ev = harness.evaluate_checkpoint(out / "fold0.ckpt", manifest, fold=0)
        assert ev.fold_accuracies[0] == rep.fold_accuracies[0]


def test_cv_is_deterministic(manifest, tmp_path):
    harness.cross_validate(manifest, TINY, tmp_path / "a")
    harness.cross_validate(manifest, TINY, tmp_path / "b")
    assert (tmp_path / "a" / "metrics.json").read_bytes() == (tmp_path / "b" / "metrics.json").read_bytes()


def test_cv_independent_of_worker_count(manifest, tmp_path, monkeypatch):
    harness.cross_validate(manifest, TINY, tmp_path / "serial")
    monkeypatch.setenv(harness.WORKERS_ENV, "2")
    harness.cross_validate(manifest, TINY, tmp_path / "pool")
    serial = (tmp_path / "serial" / "metrics.json").read_bytes()
    assert (tmp_path / "pool" / "metrics.json").read_bytes() == serial


def test_nan_loss_aborts_with_location(manifest, monkeypatch):
    monkeypatch.setattr(harness, "mae_loss", lambda pred, target: Tensor(np.array(np.nan)))
    with pytest.raises(TrainingError, match="epoch 0, step 0"):
        harness.train_fold(manifest, 0, TINY)


class TestAblation:
    def test_variant_configs(self):
        assert len(ABLATIONS) == 8
        assert ablation_config(TINY, "Without raw audio").model.streams == ("stft", "delta")
        assert ablation_config(TINY, "Without spectrogram").model.streams == ("waveform", "delta")
        assert ablation_config(TINY, "Without delta spectrogram").model.streams == ("waveform", "stft")
        assert ablation_config(TINY, "Without attention").model.attention is False
        assert ablation_config(TINY, "Without decision fusion").fusion is False
        assert ablation_config(TINY, "Without uncertainty").effective_noise_fraction == 0.0
        assert ablation_config(TINY, "Without data augmentation").augmentation is False
        assert ablation_config(TINY, "Complete Model") == TINY
        with pytest.raises(ValueError):
            ablation_config(TINY, "Without everything")

    def test_table(self, manifest, tmp_path):
        table = harness.ablate(manifest, TINY, tmp_path)
        assert list(table.rows) == list(ABLATIONS)
        md = (tmp_path / "ablation.md").read_text()
        assert all(name in md for name in ABLATIONS)
        assert set(json.loads((tmp_path / "ablation.json").read_text())) == set(ABLATIONS)


class TestCli:
    def test_synth_and_cv(self, tmp_path, tiny_ini):
        (tmp_path / "s.ini").write_text(
            "[synth]\nseed = 2\nclasses = tone, chirp\ncount = 4\nduration_s = 4.0\n"
        )
        assert main(["synth", "--config", str(tmp_path / "s.ini"), "--out", str(tmp_path / "data"), "--folds", "2"]) == 0
        man = tmp_path / "data" / "manifest.csv"
        assert man.exists()
        assert main(["cv", "--config", str(tiny_ini), "--manifest", str(man), "--out", str(tmp_path / "run")]) == 0
        assert (tmp_path / "run" / "metrics.json").exists()

    def test_train_eval_attention_extract(self, tmp_path, tiny_ini, synth_dir):
        man = str(synth_dir / "manifest.csv")
        run = tmp_path / "run"
        assert main(["train", "--config", str(tiny_ini), "--manifest", man, "--fold", "1", "--out", str(run)]) == 0
        ckpt = run / "fold1.ckpt"
        assert main(["eval", "--checkpoint", str(ckpt), "--manifest", man, "--fold", "1", "--out", str(tmp_path / "ev")]) == 0
        assert json.loads((tmp_path / "ev" / "metrics.json").read_text())["folds"] == [1]

        wav = next((synth_dir / "audio").glob("tone-*.wav"))
        out_csv = tmp_path / "att.csv"
        assert main(["attention", "--checkpoint", str(ckpt), "--audio", str(wav), "--out", str(out_csv)]) == 0
        with open(out_csv) as fh:
            rows = list(csv.DictReader(fh))
        assert list(rows[0]) == ["time_s"] + [f"attention_stage{s}" for s in range(5)] + ["waveform_envelope"]
        assert len(rows) == 384
        values = np.array([[float(r[f"attention_stage{s}"]) for s in range(5)] for r in rows])
        assert np.all((values > 0) & (values < 1))
        # stage s repeats each value 2**s times
        assert np.all(values[0::2, 1] == values[1::2, 1])

        feats = tmp_path / "f.bin"
        assert main(["extract", "--manifest", man, "--fold", "0", "--out", str(feats)]) == 0
        assert len(read_features(feats)) == 4

    def test_missing_flags(self):
        with pytest.raises(SystemExit):
            main(["train"])

    def test_bad_manifest_exit_code(self, tmp_path, capsys):
        (tmp_path / "m.csv").write_text("")
        assert main(["cv", "--manifest", str(tmp_path / "m.csv")]) == 2
        assert "empty" in capsys.readouterr().err


@pytest.mark.slow
def test_augmentation_disabled_fits_training_set_sooner():
    from msesc import experiments as ex

    cfg = load_run_config(Path(__file__).resolve().parents[1] / "configs" / "desk.ini").replace(epochs=60, batch_size=4)
    clips, _, _ = ex.acceptance_dataset()
    picked = [c for label in range(4) for c in [c for c in clips if c.label == label][:2]]
    plain = ex.epochs_to_fit(picked, cfg.replace(augmentation=False))
    mixed = ex.epochs_to_fit(picked, cfg.replace(augmentation=True))
    assert plain is not None
    assert mixed is None or plain < mixed
