import numpy as np
import pytest

from zsih import cli, pipeline, retrieval
from zsih.data import load_split, save_split


def run_cli(*args):
    try:
        return cli.main([str(a) for a in args])
    except SystemExit as exc:
        return exc.code


TINY = ["--set", "M=8", "--set", "d_f=3", "--set", "gcn_hidden=5",
        "--set", "N_B=4", "--set", "max_iters=5", "--set", "t=0.5"]


@pytest.fixture
def workspace(tmp_path):
    paths = {
        "sketches": tmp_path / "sketches.zsft",
        "images": tmp_path / "images.zsft",
        "semantics": tmp_path / "semantics.txt",
        "split": tmp_path / "split.txt",
        "checkpoint": tmp_path / "model.zsih",
        "metrics": tmp_path / "metrics.tsv",
        "dir": tmp_path,
    }
    code = run_cli(
        "synth", "--classes", 6, "--per-class", 4, "--locations", 2,
        "--channels", 8, "--semantic-dim", 4, "--noise", 0.1, "--seed", 3,
        "--sketches", paths["sketches"], "--images", paths["images"],
        "--semantics", paths["semantics"],
    )
    assert code == 0
    code = run_cli("split", "--features", paths["sketches"], "--n-unseen", 2,
                   "--seed", 3, "--out", paths["split"])
    assert code == 0
    return paths


def train_workspace(paths, extra=()):
    return run_cli(
        "train", "--sketches", paths["sketches"], "--images", paths["images"],
        "--semantics", paths["semantics"], "--split", paths["split"],
        "--checkpoint", paths["checkpoint"], "--metrics", paths["metrics"],
        *TINY, *extra,
    )


class TestSynth:
    def test_creates_all_files(self, workspace):
        for key in ("sketches", "images", "semantics"):
            assert workspace[key].exists()
            assert workspace[key].stat().st_size > 0

    def test_seeded_outputs_byte_identical(self, tmp_path):
        outs = []
        for sub in ("a", "b"):
            d = tmp_path / sub
            d.mkdir()
            code = run_cli("synth", "--seed", 9, "--classes", 3, "--per-class", 2,
                           "--sketches", d / "s.zsft", "--images", d / "i.zsft",
                           "--semantics", d / "sem.txt")
            assert code == 0
            outs.append(tuple((d / n).read_bytes()
                              for n in ("s.zsft", "i.zsft", "sem.txt")))
        assert outs[0] == outs[1]

    def test_zero_classes_is_usage_error(self, tmp_path):
        code = run_cli("synth", "--seed", 1, "--classes", 0,
                       "--sketches", tmp_path / "s", "--images", tmp_path / "i",
                       "--semantics", tmp_path / "m")
        assert code == 2

    def test_missing_seed_is_usage_error(self, tmp_path):
        code = run_cli("synth", "--sketches", tmp_path / "s",
                       "--images", tmp_path / "i", "--semantics", tmp_path / "m")
        assert code == 2


class TestTrain:
    def test_zero_iterations_writes_initial_checkpoint(self, workspace):
        code = train_workspace(workspace, extra=["--set", "max_iters=0"])
        assert code == 0
        ckpt = pipeline.load_checkpoint(workspace["checkpoint"])
        assert ckpt.iteration == 0
        assert workspace["metrics"].read_text() == ""

    def test_metrics_line_count_equals_iterations(self, workspace):
        assert train_workspace(workspace) == 0
        lines = workspace["metrics"].read_text().strip().splitlines()
        ckpt = pipeline.load_checkpoint(workspace["checkpoint"])
        assert len(lines) == ckpt.iteration == 5

    def test_fusion_override_changes_checkpoint(self, workspace):
        assert train_workspace(workspace) == 0
        default_bytes = workspace["checkpoint"].read_bytes()
        assert train_workspace(workspace, extra=["--set", "fusion_mode=concat"]) == 0
        assert workspace["checkpoint"].read_bytes() != default_bytes

    def test_overlapping_split_is_runtime_error(self, workspace, capsys):
        split = load_split(workspace["split"])
        bad = type(split)(seen=split.seen | {next(iter(split.unseen))},
                          unseen=split.unseen, seed=split.seed)
        save_split(bad, workspace["split"])
        code = train_workspace(workspace)
        assert code == 1
        assert "zero-shot contract" in capsys.readouterr().err

    def test_unknown_config_key_is_runtime_error(self, workspace):
        code = train_workspace(workspace, extra=["--set", "bogus=1"])
        assert code == 1

    def test_resume_appends_metrics(self, workspace):
        assert train_workspace(workspace) == 0
        assert train_workspace(
            workspace,
            extra=["--set", "max_iters=8", "--resume", workspace["checkpoint"]],
        ) == 0
        lines = workspace["metrics"].read_text().strip().splitlines()
        assert [int(l.split("\t")[0]) for l in lines] == list(range(1, 9))


class TestEncode:
    def test_encode_requires_no_semantics(self, workspace):
        assert train_workspace(workspace) == 0
        out = workspace["dir"] / "codes.zscb"
        parser = cli._build_parser()
        args = parser.parse_args([
            "encode", "--checkpoint", str(workspace["checkpoint"]),
            "--features", str(workspace["sketches"]),
            "--modality", "sketch", "--out", str(out)])
        assert not hasattr(args, "semantics")
        assert run_cli("encode", "--checkpoint", workspace["checkpoint"],
                       "--features", workspace["sketches"],
                       "--modality", "sketch", "--out", out) == 0

    def test_deterministic_and_header_bits_match_config(self, workspace):
        assert train_workspace(workspace) == 0
        out1 = workspace["dir"] / "c1.zscb"
        out2 = workspace["dir"] / "c2.zscb"
        for out in (out1, out2):
            assert run_cli("encode", "--checkpoint", workspace["checkpoint"],
                           "--features", workspace["images"],
                           "--modality", "image", "--out", out) == 0
        assert out1.read_bytes() == out2.read_bytes()
        codes = retrieval.load_codes(out1)
        assert codes.n_bits == 8  # config M
        assert codes.modality == "image"

    def test_modality_mismatch_is_runtime_error(self, workspace, capsys):
        assert train_workspace(workspace) == 0
        code = run_cli("encode", "--checkpoint", workspace["checkpoint"],
                       "--features", workspace["sketches"],
                       "--modality", "image", "--out", workspace["dir"] / "x.zscb")
        assert code == 1
        assert "modality" in capsys.readouterr().err


class TestRetrieveAndEval:
    def _encode_both(self, workspace):
        assert train_workspace(workspace) == 0
        q = workspace["dir"] / "q.zscb"
        g = workspace["dir"] / "g.zscb"
        assert run_cli("encode", "--checkpoint", workspace["checkpoint"],
                       "--features", workspace["sketches"],
                       "--modality", "sketch", "--out", q) == 0
        assert run_cli("encode", "--checkpoint", workspace["checkpoint"],
                       "--features", workspace["images"],
                       "--modality", "image", "--out", g) == 0
        return q, g

    def test_retrieve_writes_ranked_rows(self, workspace):
        q, g = self._encode_both(workspace)
        out = workspace["dir"] / "ranked.tsv"
        assert run_cli("retrieve", "--queries", q, "--gallery", g,
                       "--top", 3, "--out", out) == 0
        lines = out.read_text().strip().splitlines()
        n_queries = len(retrieval.load_codes(q))
        assert lines[0] == "query\trank\tgallery_index\tdistance"
        assert len(lines) == 1 + 3 * n_queries

    def test_eval_identity_gallery_gives_unit_map(self, workspace):
        # distinct codes with unique labels: perfect self-retrieval
        bits = np.unpackbits(np.arange(16, dtype=np.uint8)[:, None],
                             axis=1, bitorder="little", count=8)
        labels = np.arange(16, dtype=np.uint32)
        g2 = workspace["dir"] / "unique.zscb"
        q2 = workspace["dir"] / "unique_q.zscb"
        retrieval.save_codes(
            retrieval.CodeMatrix(retrieval.pack_bits(bits), labels, 8, "image"), g2)
        retrieval.save_codes(
            retrieval.CodeMatrix(retrieval.pack_bits(bits), labels, 8, "sketch"), q2)
        report = workspace["dir"] / "report.txt"
        assert run_cli("eval", "--queries", q2, "--gallery", g2,
                       "--k", 100, "--out", report) == 0
        text = report.read_text()
        assert "mAP@all\t1.0" in text
        assert "precision@100\t" in text

    def test_eval_emits_pr_dump(self, workspace):
        q, g = self._encode_both(workspace)
        report = workspace["dir"] / "report.txt"
        dump = workspace["dir"] / "pr.tsv"
        assert run_cli("eval", "--queries", q, "--gallery", g,
                       "--out", report, "--pr-dump", dump) == 0
        assert dump.read_text().startswith("kind\trecall\tprecision")

    def test_eval_bit_width_mismatch_names_both(self, workspace, capsys):
        q, g = self._encode_both(workspace)
        other = retrieval.CodeMatrix(
            np.zeros((2, 2), dtype=np.uint8),
            np.array([0, 1], dtype=np.uint32), 16, "image")
        g16 = workspace["dir"] / "g16.zscb"
        retrieval.save_codes(other, g16)
        assert run_cli("eval", "--queries", q, "--gallery", g16,
                       "--out", workspace["dir"] / "r.txt") == 1
        err = capsys.readouterr().err
        assert "8" in err and "16" in err


class TestAblate:
    def test_sweep_emits_one_map_per_setting(self, workspace):
        out = workspace["dir"] / "ablation.tsv"
        code = run_cli(
            "ablate", "--sketches", workspace["sketches"],
            "--images", workspace["images"],
            "--semantics", workspace["semantics"],
            "--split", workspace["split"], "--out", out, *TINY,
        )
        assert code == 0
        lines = out.read_text().strip().splitlines()
        assert lines[0] == "setting\tmap_all"
        names = [l.split("\t")[0] for l in lines[1:]]
        assert names == ["full", "fusion=concat", "fusion=mfb", "no_gcn",
                         "t=1", "t=1e-6"]
        for line in lines[1:]:
            assert 0.0 <= float(line.split("\t")[1]) <= 1.0


class TestEnvironment:
    def test_bad_log_level_is_usage_error(self, monkeypatch):
        monkeypatch.setenv("ZSIH_LOG", "verbose")
        assert cli.main(["synth", "--seed", "1", "--classes", "1",
                         "--sketches", "s", "--images", "i",
                         "--semantics", "m"]) == 2

    def test_missing_input_file_is_runtime_error(self, tmp_path):
        assert run_cli("encode", "--checkpoint", tmp_path / "none.zsih",
                       "--features", tmp_path / "none.zsft",
                       "--modality", "sketch",
                       "--out", tmp_path / "codes.zscb") == 1
