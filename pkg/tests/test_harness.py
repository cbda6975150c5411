import csv
import json

import numpy as np
import pytest

import cmtm.tensor
from cmtm.checkpoint import Checkpoint, save_checkpoint
from cmtm.errors import ConfigError, LoadError
from cmtm.harness import ablation
from cmtm.harness.ablation import MASK_RATIOS, ROMAN, ratio_cells, run_ablation, stream_cells, write_csv
from cmtm.harness.cli import main
from cmtm.harness.config import RunConfig, save_config, tiny_config
from cmtm.harness.experiment import (
    ARCH_KEY,
    checkpoint_to_model,
    evaluate,
    model_to_checkpoint,
    train,
    train_corpus,
)
from cmtm.harness.gradcheck import gradcheck
from cmtm.params import state_dict
from cmtm.segnet import SegModel
from conftest import CountingRng


def small(**kw):
    base = dict(height=16, width=16, frames=2, train_sequences=2, eval_sequences=1, steps=3, batch_size=2)
    base.update(kw)
    return tiny_config(**base)


class TestTrain:
    def test_zero_steps_is_initialization(self):
        cfg = small(steps=0, seed=5)
        ckpt, log = train(cfg)
        assert log == []
        init = model_to_checkpoint(SegModel.init(cfg.segnet_config(), seed=5), cfg.segnet_config())
        assert ckpt == init

    def test_smoothed_loss_decreases(self):
        cfg = small(steps=200, train_sequences=4, frames=4)
        _, log = train(cfg)
        loss = np.array([r["loss"] for r in log])
        assert [r["step"] for r in log] == list(range(200))
        assert loss[-20:].mean() < loss[:20].mean()

    def test_same_seed_same_bytes(self, tmp_path):
        cfg = small(steps=4)
        a = save_checkpoint(train(cfg)[0], tmp_path / "a.cmtm").read_bytes()
        b = save_checkpoint(train(cfg)[0], tmp_path / "b.cmtm").read_bytes()
        c = save_checkpoint(train(cfg.replace(seed=1))[0], tmp_path / "c.cmtm").read_bytes()
        assert a == b and a != c


class TestEvaluate:
    def test_untrained_model_in_range(self):
        cfg = small(steps=0)
        report = evaluate(train(cfg)[0], train_corpus(cfg))
        for v in (report.j_mean, report.f_mean, report.g_mean):
            assert 0.0 <= v <= 1.0
        assert len(report.per_frame) == cfg.train_sequences * cfg.frames

    def test_deterministic_and_rng_free(self):
        cfg = small(steps=2)
        ckpt = train(cfg)[0]
        counting = CountingRng()
        a = evaluate(ckpt, train_corpus(cfg), rng=counting)
        b = evaluate(ckpt, train_corpus(cfg))
        assert counting.calls == 0
        assert a.as_dict() == b.as_dict()

    def test_reads_corpus_directory(self, tmp_path):
        from cmtm.synthvid import save_corpus

        cfg = small(steps=0)
        save_corpus(train_corpus(cfg), tmp_path)
        ckpt = train(cfg)[0]
        assert evaluate(ckpt, tmp_path).as_dict() == evaluate(ckpt, train_corpus(cfg)).as_dict()

    def test_mismatched_checkpoint_lists_names(self):
        cfg = small(steps=0)
        ckpt = train(cfg)[0]
        tensors = dict(ckpt.tensors)
        bad = next(k for k in tensors if k != ARCH_KEY)
        tensors[bad] = np.zeros((1, 2, 3), np.float32)
        del tensors[sorted(k for k in tensors if k != ARCH_KEY)[-1]]
        with pytest.raises(LoadError) as info:
            checkpoint_to_model(Checkpoint(tensors))
        assert bad in info.value.names and len(info.value.names) == 2

    def test_missing_arch(self):
        with pytest.raises(LoadError):
            checkpoint_to_model(Checkpoint({"x": np.zeros(1, np.float32)}))

    def test_checkpoint_model_round_trip(self):
        cfg = small(steps=1)
        ckpt = train(cfg)[0]
        model, netcfg = checkpoint_to_model(ckpt)
        assert netcfg == cfg.segnet_config().__class__(4, 4, 4, netcfg.cmtm)
        assert model_to_checkpoint(model, netcfg) == ckpt
        assert set(state_dict(model)) == set(ckpt.tensors) - {ARCH_KEY}


class TestAblation:
    def test_stream_grid_structure(self):
        cells = stream_cells(RunConfig())
        assert [c.version for c in cells] == list(ROMAN)
        pattern = [(c.knobs["app"], c.knobs["mo"], c.knobs["mask"]) for c in cells]
        assert pattern == [(1, 0, 0), (1, 0, 1), (0, 1, 0), (0, 1, 1), (1, 1, 0), (1, 1, 1)]
        for c in cells:
            assert (c.config.mask_ratio > 0) == bool(c.knobs["mask"])
            assert c.config.apply_to_app == bool(c.knobs["app"])
            assert c.config.apply_to_mo == bool(c.knobs["mo"])

    def test_ratio_grid_structure(self):
        cells = ratio_cells(RunConfig())
        assert [c.knobs["ratio"] for c in cells] == [0.0, 0.2, 0.4, 0.6, 0.8] == list(MASK_RATIOS)
        assert all(c.config.apply_to_app and c.config.apply_to_mo for c in cells)

    def test_zero_ratio_row_equals_variant_five(self):
        base = small(steps=3)
        assert ratio_cells(base)[0].config == stream_cells(base)[4].config
        result = run_ablation(base)
        v, zero = result[3][4], result[4][0]
        assert v.status == zero.status == "ok"
        assert (v.j, v.f, v.g, v.final_loss) == (zero.j, zero.f, zero.g, zero.final_loss)

    def test_csv_layout(self, tmp_path):
        result = run_ablation(small(steps=1), tables=(3, 4))
        with write_csv(result[3], tmp_path / "t3.csv").open() as fh:
            rows = list(csv.DictReader(fh))
        assert list(rows[0]) == ["version", "app", "mo", "mask", "J", "F", "G", "final_loss", "status"]
        assert [r["version"] for r in rows] == list(ROMAN)
        with write_csv(result[4], tmp_path / "t4.csv").open() as fh:
            rows = list(csv.DictReader(fh))
        assert [float(r["ratio"]) for r in rows] == list(MASK_RATIOS)

    def test_failed_cell_is_recorded(self, monkeypatch):
        real_train = ablation.train

        def flaky(cfg, data=None):
            if cfg.mask_ratio == 0.6:
                raise FloatingPointError("boom")
            return real_train(cfg, data)

        monkeypatch.setattr(ablation, "train", flaky)
        cells = run_ablation(small(steps=1), tables=(4,))[4]
        assert [c.status.startswith("failed") for c in cells] == [False, False, False, True, False]
        assert "boom" in cells[3].status and cells[3].g is None
        assert cells[4].g is not None


class TestGradcheck:
    def test_tiny_config_passes(self):
        report = gradcheck(tiny_config())
        assert report.passed, report.lines()
        assert {"encoder_app", "encoder_mo", "decoder", "cmtm.projection", "cmtm.ffn", "cmtm.norm",
                "cmtm.modality_embedding", "module.mask_token", "module_input"} <= set(report.groups)

    def test_corrupted_matmul_gradient_is_caught(self, monkeypatch):
        real = cmtm.tensor._matmul_backward

        def corrupted(g, a, b):
            ga, gb = real(g, a, b)
            return ga, gb * 1.1

        monkeypatch.setattr(cmtm.tensor, "_matmul_backward", corrupted)
        report = gradcheck(tiny_config(), max_entries=4)
        assert not report.passed
        assert "cmtm.projection" in report.failures

    def test_repeatable(self):
        a = gradcheck(tiny_config(), max_entries=3)
        b = gradcheck(tiny_config(), max_entries=3)
        assert a == b

    def test_refuses_large_inputs(self):
        with pytest.raises(ConfigError):
            gradcheck(tiny_config(height=16, width=16))


class TestCli:
    def test_full_pipeline(self, tmp_path, capsys):
        cfg_path = save_config(small(steps=2), tmp_path / "run.cfg")
        assert main(["gen-data", "--out", str(tmp_path / "data"), "--seed", "3", "--scenes", "2",
                     "--config", str(cfg_path)]) == 0
        assert (tmp_path / "data" / "seq_001" / "manifest.txt").exists()
        assert main(["train", "--config", str(cfg_path), "--out", str(tmp_path / "m.cmtm")]) == 0
        log = (tmp_path / "m.cmtm.log.jsonl").read_text().splitlines()
        assert [json.loads(line)["step"] for line in log] == [0, 1]
        assert main(["eval", "--ckpt", str(tmp_path / "m.cmtm"), "--data", str(tmp_path / "data"),
                     "--report", str(tmp_path / "r.json")]) == 0
        report = json.loads((tmp_path / "r.json").read_text())
        assert 0.0 <= report["g_mean"] <= 1.0
        assert "J=" in capsys.readouterr().out

    def test_ablate(self, tmp_path):
        cfg_path = save_config(small(steps=1), tmp_path / "run.cfg")
        assert main(["ablate", "--config", str(cfg_path), "--table", "4", "--out", str(tmp_path / "t.csv")]) == 0
        assert len((tmp_path / "t.csv").read_text().splitlines()) == 6

    def test_gradcheck_exit_codes(self, tmp_path, monkeypatch, capsys):
        cfg_path = save_config(tiny_config(), tmp_path / "g.cfg")
        assert main(["gradcheck", "--config", str(cfg_path), "--max-entries", "3"]) == 0
        assert "PASS overall" in capsys.readouterr().out
        real = cmtm.tensor._matmul_backward
        monkeypatch.setattr(cmtm.tensor, "_matmul_backward", lambda g, a, b: tuple(x * 2 for x in real(g, a, b)))
        assert main(["gradcheck", "--config", str(cfg_path), "--max-entries", "3"]) == 2

    def test_usage_errors(self, tmp_path, capsys):
        with pytest.raises(SystemExit) as info:
            main(["train"])
        assert info.value.code == 1
        with pytest.raises(SystemExit) as info:
            main(["ablate", "--config", "x", "--table", "5", "--out", "y"])
        assert info.value.code == 1
        (tmp_path / "bad.cfg").write_text("nonsense=1\n")
        assert main(["train", "--config", str(tmp_path / "bad.cfg"), "--out", str(tmp_path / "m")]) == 1
        assert main(["gen-data", "--out", str(tmp_path / "d"), "--scenes", "0"]) == 1

    def test_io_errors(self, tmp_path):
        (tmp_path / "junk.cmtm").write_bytes(b"not a checkpoint")
        args = ["eval", "--ckpt", str(tmp_path / "junk.cmtm"), "--data", str(tmp_path), "--report", str(tmp_path / "r")]
        assert main(args) == 3
        assert main(["train", "--config", str(tmp_path / "missing.cfg"), "--out", str(tmp_path / "m")]) == 3

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_numerical_failure_exit_code(self, tmp_path):
        cfg_path = save_config(small(steps=3, lr=1e30), tmp_path / "huge.cfg")
        assert main(["train", "--config", str(cfg_path), "--out", str(tmp_path / "m.cmtm")]) == 2
        assert not (tmp_path / "m.cmtm").exists()
