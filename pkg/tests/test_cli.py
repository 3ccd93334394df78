import numpy as np
import pytest
import torch

from semiuformer import cli, losses
from semiuformer.cli import (ABLATION_VARIANTS, EXIT_FAILURE, EXIT_OK, EXIT_USAGE,
                             run_ablation, variant_setup)
from semiuformer.core import NetConfig, RunConfig, save_checkpoint
from semiuformer.hazedata import load_png, save_png
from semiuformer.network import DehazeNet
from semiuformer.trainer import network_checkpoint


def run_cli(*argv):
    return cli.main(list(argv))


@pytest.fixture(scope="module")
def ckpt_path(tmp_path_factory):
    torch.manual_seed(0)
    net = DehazeNet(NetConfig())
    path = tmp_path_factory.mktemp("ckpt") / "teacher.sufc"
    save_checkpoint(network_checkpoint(net, "teacher"), str(path))
    return str(path)


class TestHelp:
    @pytest.mark.parametrize("cmd", ["hazegen", "train", "infer", "eval",
                                     "gradcheck", "ablate"])
    def test_subcommand_help_exits_zero(self, cmd, capsys):
        assert run_cli(cmd, "--help") == EXIT_OK
        assert cmd in capsys.readouterr().out

    def test_unknown_command_usage_error(self):
        assert run_cli("frobnicate") == EXIT_USAGE


class TestHazegen:
    def test_writes_expected_files(self, tmp_path):
        out = tmp_path / "data"
        code = run_cli("--seed", "3", "hazegen", "--out", str(out),
                       "--paired", "3", "--unpaired", "2", "--size", "32")
        assert code == EXIT_OK
        assert len(list(out.glob("*.png"))) == 3 * 2 + 2
        assert (out / "manifest.tsv").exists()

    def test_deterministic_across_runs(self, tmp_path):
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            run_cli("--seed", "7", "hazegen", "--out", str(out),
                    "--paired", "2", "--unpaired", "1", "--size", "32")
            outs.append(out)
        for f in sorted(outs[0].iterdir()):
            assert f.read_bytes() == (outs[1] / f.name).read_bytes()

    def test_indivisible_size_rejected(self, tmp_path):
        code = run_cli("hazegen", "--out", str(tmp_path / "x"),
                       "--paired", "1", "--unpaired", "1", "--size", "30")
        assert code == EXIT_USAGE


class TestTrain:
    def test_teacher_stage_produces_checkpoint_and_log(self, tmp_path):
        out = tmp_path / "run"
        code = run_cli("--seed", "1", "train", "--stage", "teacher",
                       "--out", str(out), "--paired", "4", "--unpaired", "4",
                       "--size", "32", "--steps", "6")
        assert code == EXIT_OK
        assert list(out.glob("teacher_e*.sufc"))
        assert len((out / "teacher_train.log").read_text().splitlines()) == 6

    def test_student_without_teacher_ckpt_is_usage_error(self, tmp_path):
        code = run_cli("train", "--stage", "student", "--out", str(tmp_path / "s"),
                       "--paired", "4", "--unpaired", "4", "--size", "32",
                       "--steps", "4")
        assert code == EXIT_USAGE

    def test_student_stage_with_checkpoint(self, tmp_path, ckpt_path):
        out = tmp_path / "s"
        code = run_cli("--seed", "1", "train", "--stage", "student",
                       "--out", str(out), "--teacher-ckpt", ckpt_path,
                       "--paired", "4", "--unpaired", "4", "--size", "32",
                       "--steps", "6")
        assert code == EXIT_OK
        assert list(out.glob("student_e*.sufc"))


class TestInfer:
    @pytest.fixture()
    def hazy_png(self, tmp_path):
        g = torch.Generator().manual_seed(9)
        img = torch.rand(3, 32, 32, generator=g).numpy()
        path = tmp_path / "hazy.png"
        save_png(str(path), img)
        return path

    def test_outputs_match_input_size(self, tmp_path, ckpt_path, hazy_png):
        out = tmp_path / "out"
        assert run_cli("infer", "--ckpt", ckpt_path, "--out", str(out),
                       str(hazy_png)) == EXIT_OK
        dehazed = load_png(str(out / "hazy_dehazed.png"))
        assert dehazed.shape == (3, 32, 32)
        assert dehazed.min() >= 0.0 and dehazed.max() <= 1.0

    def test_uncertainty_sidecar(self, tmp_path, ckpt_path, hazy_png):
        out = tmp_path / "out"
        run_cli("infer", "--ckpt", ckpt_path, "--out", str(out),
                "--uncertainty", str(hazy_png))
        assert (out / "hazy_theta.png").exists()
        sidecar = (out / "hazy_theta.txt").read_text()
        assert "log_theta_min=" in sidecar and "log_theta_max=" in sidecar

    def test_reruns_byte_identical(self, tmp_path, ckpt_path, hazy_png):
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            run_cli("infer", "--ckpt", ckpt_path, "--out", str(out),
                    "--uncertainty", str(hazy_png))
            outs.append(out)
        for f in sorted(outs[0].iterdir()):
            assert f.read_bytes() == (outs[1] / f.name).read_bytes()

    def test_indivisible_input_padded_with_warning(self, tmp_path, ckpt_path, capsys):
        g = torch.Generator().manual_seed(10)
        img = torch.rand(3, 40, 40, generator=g).numpy()
        path = tmp_path / "odd.png"
        save_png(str(path), img)
        out = tmp_path / "out"
        assert run_cli("infer", "--ckpt", ckpt_path, "--out", str(out),
                       str(path)) == EXIT_OK
        assert "padded" in capsys.readouterr().err
        assert load_png(str(out / "odd_dehazed.png")).shape == (3, 40, 40)

    def test_missing_checkpoint_usage_error(self, tmp_path, hazy_png):
        code = run_cli("infer", "--ckpt", str(tmp_path / "nope.sufc"),
                       "--out", str(tmp_path / "o"), str(hazy_png))
        assert code == EXIT_USAGE


class TestEval:
    def test_report_written(self, tmp_path, ckpt_path, capsys):
        out = tmp_path / "ev"
        code = run_cli("--seed", "2", "eval", "--ckpt", ckpt_path,
                       "--out", str(out), "--paired", "2", "--size", "32")
        assert code == EXIT_OK
        rows = (out / "eval_report.tsv").read_text().splitlines()
        assert len(rows) == 1 + 2 + 1
        assert "mean PSNR" in capsys.readouterr().out


class TestGradcheck:
    def test_clean_suite_exits_zero_with_report(self, capsys):
        assert run_cli("gradcheck") == EXIT_OK
        out = capsys.readouterr().out
        assert out.count("PASS") >= 8
        assert "FAIL" not in out

    def test_sign_mutation_is_caught_and_named(self, capsys, monkeypatch):
        true_tv = losses.loss_tv

        def broken_tv(img):
            correct = true_tv(img)
            # wrong-sign analytic path, same forward value
            return correct - 2.0 * (correct - correct.detach())

        monkeypatch.setattr(losses, "loss_tv", broken_tv)
        assert run_cli("gradcheck") == EXIT_FAILURE
        out = capsys.readouterr().out
        assert "FAIL\tloss_tv" in out


class TestAblation:
    def test_variant_flag_matrix(self):
        rows = [(v.use_mdb, v.use_uncertainty, v.use_kl) for v in ABLATION_VARIANTS]
        assert rows == [(False, False, False), (True, False, False),
                        (True, True, False), (True, True, True)]

    def test_variant_setup_disables_kl_weight(self):
        run = RunConfig()
        _, weights_v2, flags_v2 = variant_setup(ABLATION_VARIANTS[2], run)
        _, weights_v3, flags_v3 = variant_setup(ABLATION_VARIANTS[3], run)
        assert weights_v2.lambda6 == 0.0
        assert weights_v3.lambda6 > 0.0
        assert not flags_v2.use_kl and flags_v3.use_kl

    def test_report_has_four_rows(self, tmp_path):
        report_path, scores = run_ablation(str(tmp_path), seeds=[0],
                                           teacher_steps=6, student_steps=6,
                                           run=RunConfig(), n_paired=4,
                                           n_unpaired=4, n_eval=2, size=32)
        rows = open(report_path).read().splitlines()
        assert len(rows) == 5
        assert [r.split("\t")[0] for r in rows[1:]] == ["base", "v1", "v2", "v3"]
        assert all(len(scores[v.name]) == 1 for v in ABLATION_VARIANTS)
