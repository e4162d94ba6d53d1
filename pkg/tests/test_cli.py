import json
import re
from pathlib import Path

import numpy as np
import pytest

from graphsfda.cli import main
from graphsfda.graph_store import load_graph


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def kv(stdout, key):
    m = re.search(rf"^{key}=(.*)$", stdout, re.MULTILINE)
    assert m, f"missing {key}= line in output:\n{stdout}"
    return m.group(1)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Synthetic pair, pretrained checkpoint and a finished adaptation run."""
    root = tmp_path_factory.mktemp("cliws")
    assert main([
        "gen-synth", str(root / "pair"),
        "--nodes-per-class", "40", "--feature-dim", "8",
        "--separation", "3.0", "--seed", "4",
    ]) == 0
    config = {
        "source_graph": str(root / "pair_src"),
        "target_graph": str(root / "pair_tgt"),
        "checkpoint": str(root / "model.ckpt"),
        "output_dir": str(root / "out"),
        "hidden_dim": 8,
        "pretrain_epochs": 80,
        "epochs": 3,
        "seed": 4,
    }
    (root / "run.json").write_text(json.dumps(config))
    assert main(["pretrain", "--config", str(root / "run.json")]) == 0
    assert main(["adapt", "--config", str(root / "run.json")]) == 0
    return root


class TestGenSynth:
    def test_outputs_loadable(self, tmp_path, capsys):
        code, out, _ = run(capsys, "gen-synth", str(tmp_path / "p"), "--nodes-per-class", "10")
        assert code == 0
        src = load_graph(kv(out, "source"))
        tgt = load_graph(kv(out, "target"))
        assert src.n == tgt.n == 30

    def test_seed_reproducible_bytes(self, tmp_path, capsys):
        for name in ("a", "b"):
            assert run(capsys, "gen-synth", str(tmp_path / name), "--seed", "7",
                       "--nodes-per-class", "10")[0] == 0
        for suffix in (".meta", ".edges", ".feat", ".labels"):
            assert (tmp_path / f"a_src{suffix}").read_bytes() == (tmp_path / f"b_src{suffix}").read_bytes()
            assert (tmp_path / f"a_tgt{suffix}").read_bytes() == (tmp_path / f"b_tgt{suffix}").read_bytes()

    def test_bad_noise_is_usage_error(self, tmp_path, capsys):
        code, _, err = run(capsys, "gen-synth", str(tmp_path / "p"), "--edge-noise", "1.5")
        assert code == 2
        assert "edge_noise" in err


class TestPretrain:
    def test_metrics_and_quality(self, workspace, capsys):
        code, out, _ = run(capsys, "pretrain", "--config", str(workspace / "run.json"))
        assert code == 0
        assert float(kv(out, "val_acc")) >= 0.0
        assert float(kv(out, "test_acc")) >= 0.9

    def test_reproducible_checkpoint_bytes(self, workspace, capsys):
        first = Path(kv(run(capsys, "pretrain", "--config", str(workspace / "run.json"))[1], "checkpoint")).read_bytes()
        second = Path(kv(run(capsys, "pretrain", "--config", str(workspace / "run.json"))[1], "checkpoint")).read_bytes()
        assert first == second

    def test_missing_labels_exit_3(self, tmp_path, capsys):
        (tmp_path / "g.meta").write_text("2 1 2\n")
        (tmp_path / "g.edges").write_text("0 1\n")
        (tmp_path / "g.feat").write_text("1\n2\n")
        cfg = {"source_graph": str(tmp_path / "g"), "output_dir": str(tmp_path)}
        (tmp_path / "c.json").write_text(json.dumps(cfg))
        assert run(capsys, "pretrain", "--config", str(tmp_path / "c.json"))[0] == 3

    def test_unknown_config_key_rejected(self, tmp_path, capsys):
        (tmp_path / "c.json").write_text(json.dumps({"not_a_key": 1}))
        code, _, err = run(capsys, "pretrain", "--config", str(tmp_path / "c.json"))
        assert code == 3
        assert "not_a_key" in err


class TestAdapt:
    def test_artifacts_written(self, workspace):
        out = workspace / "out"
        for name in ("refined.meta", "refined.edges", "refined.feat", "refined.mask",
                     "adapted.ckpt", "report.json", "config.resolved.json"):
            assert (out / name).exists(), name
        report = json.loads((out / "report.json").read_text())
        assert len(report["loss_m"]) == 3
        refined = load_graph(out / "refined")
        mask_lines = (out / "refined.mask").read_text().strip().splitlines()
        assert len(mask_lines) == refined.num_edges

    def test_zero_step_override_matches_spm(self, workspace, capsys, tmp_path):
        outdir = tmp_path / "noop"
        code, out, _ = run(
            capsys, "adapt", "--config", str(workspace / "run.json"),
            "--tm", "0", "--tf", "0", "--ts", "0", "--out", str(outdir),
        )
        assert code == 0
        code2, out2, _ = run(
            capsys, "eval", "--checkpoint", str(workspace / "model.ckpt"),
            "--graph", str(workspace / "pair_tgt"),
        )
        assert code2 == 0
        assert abs(float(kv(out, "final_acc")) - float(kv(out2, "acc"))) <= 1e-9

    def test_absent_checkpoint_exit_4(self, workspace, capsys, tmp_path):
        cfg = json.loads((workspace / "run.json").read_text())
        cfg["checkpoint"] = str(tmp_path / "missing.ckpt")
        (tmp_path / "c.json").write_text(json.dumps(cfg))
        assert run(capsys, "adapt", "--config", str(tmp_path / "c.json"))[0] == 4


class TestEval:
    def test_adapted_on_refined_matches_report(self, workspace, capsys):
        report = json.loads((workspace / "out" / "report.json").read_text())
        code, out, _ = run(
            capsys, "eval",
            "--checkpoint", str(workspace / "out" / "adapted.ckpt"),
            "--graph", str(workspace / "out" / "refined"),
        )
        assert code == 0
        assert abs(float(kv(out, "acc")) - report["final_acc"]) <= 1e-9

    def test_random_checkpoint_near_chance(self, workspace, capsys, tmp_path):
        from graphsfda.gnn import init_model, save_checkpoint

        save_checkpoint(init_model(8, 8, 3, 2, seed=99), tmp_path / "rand.ckpt")
        code, out, _ = run(
            capsys, "eval", "--checkpoint", str(tmp_path / "rand.ckpt"),
            "--graph", str(workspace / "pair_tgt"),
        )
        assert code == 0
        assert abs(float(kv(out, "acc")) - 1.0 / 3.0) <= 0.1

    def test_missing_labels_exit_3(self, workspace, capsys, tmp_path):
        src = load_graph(workspace / "pair_tgt")
        from graphsfda.graph_store import TargetGraph, save_graph

        unlabelled = TargetGraph(src.n, src.edges, src.features, None, src.num_classes)
        save_graph(unlabelled, tmp_path / "nolab")
        code, _, _ = run(
            capsys, "eval", "--checkpoint", str(workspace / "model.ckpt"),
            "--graph", str(tmp_path / "nolab"),
        )
        assert code == 3

    def test_incompatible_checkpoint_exit_4(self, workspace, capsys, tmp_path):
        from graphsfda.gnn import init_model, save_checkpoint

        save_checkpoint(init_model(5, 8, 3, 2, seed=0), tmp_path / "wrong.ckpt")
        code, _, _ = run(
            capsys, "eval", "--checkpoint", str(tmp_path / "wrong.ckpt"),
            "--graph", str(workspace / "pair_tgt"),
        )
        assert code == 4

    def test_eval_with_mask(self, workspace, capsys):
        code, out, _ = run(
            capsys, "eval",
            "--checkpoint", str(workspace / "out" / "adapted.ckpt"),
            "--graph", str(workspace / "out" / "refined"),
            "--mask", str(workspace / "out" / "refined.mask"),
        )
        assert code == 0
        assert 0.0 <= float(kv(out, "acc")) <= 1.0


class TestExportEmbeddings:
    def test_writes_matrix(self, workspace, capsys, tmp_path):
        code, out, _ = run(
            capsys, "export-embeddings",
            "--checkpoint", str(workspace / "model.ckpt"),
            "--graph", str(workspace / "pair_tgt"),
            "--out-file", str(tmp_path / "z.txt"),
        )
        assert code == 0
        z = np.loadtxt(tmp_path / "z.txt")
        assert z.shape == (120, 8)


def test_usage_error_is_exit_2(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["adapt"])  # missing required --config
    assert exc.value.code == 2
