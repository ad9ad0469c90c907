import csv
import filecmp
import io
import json

import numpy as np
import pytest

from commonrep import ops
from commonrep.autodiff import REGISTRY
from commonrep.cli import header_hash, main
from commonrep.data import read_kv
from commonrep.inspect_maps import MAP_FILES, read_pgm

FAST = ["--stage1-iters", "4", "--stage2-iters", "3", "--batch-size", "4", "--set", "feature_channels=6",
        "--set", "hidden_channels=3"]


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--out", str(root / "data"), "--count", "15", "--size", "16", "--seed", "2"]) == 0
    for setting in ("ss", "ssd"):
        assert main(["train", "--data", str(root / "data"), "--setting", setting, "--out", str(root / setting)] + FAST) == 0
    return root


class TestGenData:
    def test_count_and_summary(self, tmp_path, capsys):
        code, out, _ = run(capsys, "gen-data", "--out", str(tmp_path / "d"), "--count", "10", "--size", "16")
        assert code == 0 and "10" in out and "K=5" in out and "16x16" in out
        ids = [json.loads(l)["id"] for l in (tmp_path / "d" / "manifest.jsonl").read_text().splitlines()]
        assert len(ids) == 10 == len(set(ids))

    def test_byte_identical(self, tmp_path, monkeypatch):
        monkeypatch.setenv("SOURCE_DATE_EPOCH", "1700000000")
        for name in ("a", "b"):
            assert main(["gen-data", "--out", str(tmp_path / name), "--count", "4", "--size", "8", "--seed", "5"]) == 0
        cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")
        assert not cmp.left_only and not cmp.right_only
        _, mismatch, errors = filecmp.cmpfiles(tmp_path / "a", tmp_path / "b", cmp.common_files, shallow=False)
        assert mismatch == [] and errors == []

    def test_one_class_rejected(self, tmp_path, capsys):
        code, _, err = run(capsys, "gen-data", "--out", str(tmp_path / "d"), "--classes", "1")
        assert code == 2 and "classes" in err

    def test_bad_size(self, tmp_path, capsys):
        assert run(capsys, "gen-data", "--out", str(tmp_path / "d"), "--size", "10")[0] == 2
        with pytest.raises(SystemExit) as exc:
            main(["gen-data", "--out", str(tmp_path / "d"), "--size", "big"])
        assert exc.value.code == 2


class TestTrain:
    def test_missing_data_is_usage_error(self, tmp_path):
        with pytest.raises(SystemExit) as exc:
            main(["train", "--out", str(tmp_path)])
        assert exc.value.code == 2

    def test_outputs_and_manifest(self, workdir):
        out = workdir / "ss"
        for name in ("stage1_rgb.ckpt", "stage1_depth.ckpt", "stage2.ckpt", "loss.csv", "run_manifest.txt"):
            assert (out / name).exists()
        man = read_kv(out / "run_manifest.txt")
        assert man["command"] == "train"
        assert man["data_header_hash"] == header_hash(workdir / "data")
        assert man["config.feature_channels"] == "6"
        rows = list(csv.DictReader(io.StringIO((out / "loss.csv").read_text())))
        assert [r["stage"] for r in rows] == ["1"] * 4 + ["2"] * 3
        assert rows[0]["l_rec"] == "" and rows[-1]["l_rec"] != ""

    def test_header_hash_is_git_blob_hash(self, workdir):
        import hashlib

        raw = (workdir / "data" / "header.txt").read_bytes()
        assert header_hash(workdir / "data") == hashlib.sha1(b"blob %d\0" % len(raw) + raw).hexdigest()

    def test_ssd_uses_smooth_l1(self, workdir):
        assert read_kv(workdir / "ssd" / "run_manifest.txt")["config.depth_loss"] == "smooth-l1"

    def test_config_file_and_override(self, workdir, tmp_path):
        conf = tmp_path / "c.txt"
        conf.write_text("stage1_iters=2\nbase_lr=0.02\n")
        args = ["train", "--data", str(workdir / "data"), "--stage", "1", "--config", str(conf),
                "--out", str(tmp_path / "r"), "--set", "base_lr=0.05", "--set", "feature_channels=6"]
        assert main(args) == 0
        man = read_kv(tmp_path / "r" / "run_manifest.txt")
        assert man["config.stage1_iters"] == "2" and man["config.base_lr"] == "0.05"

    def test_bad_override(self, workdir, tmp_path):
        assert main(["train", "--data", str(workdir / "data"), "--out", str(tmp_path), "--set", "nope=1"]) == 2
        assert main(["train", "--data", str(workdir / "data"), "--out", str(tmp_path), "--set", "novalue"]) == 2

    def test_stage2_from_init_dir(self, workdir, tmp_path):
        args = ["train", "--data", str(workdir / "data"), "--stage", "2", "--init", str(workdir / "ss"),
                "--out", str(tmp_path / "s2")] + FAST
        assert main(args) == 0
        assert (tmp_path / "s2" / "stage2.ckpt").exists()

    def test_missing_dataset_is_runtime_error(self, tmp_path, capsys):
        code, _, err = run(capsys, "train", "--data", str(tmp_path / "nothing"), "--out", str(tmp_path / "o"))
        assert code == 1 and "header.txt" in err


class TestEval:
    def rows(self, capsys, workdir, setting, views):
        code, out, _ = run(capsys, "eval", "--checkpoint", str(workdir / setting / "stage2.ckpt"),
                           "--data", str(workdir / "data"), "--views", views)
        assert code == 0
        return list(csv.reader(io.StringIO(out)))

    def test_schema_identical_across_grid(self, capsys, workdir):
        headers, cells = set(), {}
        for setting in ("ss", "ssd"):
            for views in ("rgb", "depth", "both"):
                head, row = self.rows(capsys, workdir, setting, views)
                headers.add(tuple(head))
                assert len(row) == len(head)
                cells[setting, views] = dict(zip(head, row))
        assert len(headers) == 1
        assert all(c["mean_iou"] != "" for c in cells.values())
        assert cells["ss", "both"]["rmse"] == ""
        assert cells["ssd", "rgb"]["rmse"] != "" and float(cells["ssd", "rgb"]["rmse"]) > 0

    def test_stage1_pair_and_out_file(self, workdir, tmp_path):
        ck = workdir / "ssd"
        out = tmp_path / "m.csv"
        for _ in range(2):
            assert main(["eval", "--checkpoint", str(ck / "stage1_rgb.ckpt"), "--checkpoint",
                         str(ck / "stage1_depth.ckpt"), "--data", str(workdir / "data"), "--out", str(out)]) == 0
        lines = out.read_text().splitlines()
        assert len(lines) == 3 and lines[0].startswith("setting,views")

    def test_bad_checkpoint(self, workdir, tmp_path, capsys):
        bad = tmp_path / "x.ckpt"
        bad.write_bytes(b"nope")
        code, _, err = run(capsys, "eval", "--checkpoint", str(bad), "--data", str(workdir / "data"))
        assert code == 1 and "magic" in err


class TestInspect:
    def test_both_views(self, workdir, tmp_path, capsys):
        code, out, _ = run(capsys, "inspect", "--checkpoint", str(workdir / "ssd" / "stage2.ckpt"),
                           "--data", str(workdir / "data"), "--sample-id", "s00003", "--out", str(tmp_path))
        assert code == 0
        names = out.split()
        assert len(names) >= 8 and set(names) <= set(MAP_FILES)
        assert set(names) == set(MAP_FILES)
        for n in names:
            raw = (tmp_path / n).read_bytes()
            assert raw.startswith(b"P5\n")
            img = read_pgm(tmp_path / n)
            assert img.shape in ((16, 16), (4, 4))
        assert (tmp_path / "run_manifest.txt").exists()

    def test_single_view_keeps_both_reconstructions(self, workdir, tmp_path, capsys):
        code, out, _ = run(capsys, "inspect", "--checkpoint", str(workdir / "ss" / "stage2.ckpt"),
                           "--data", str(workdir / "data"), "--sample-id", "s00001", "--out", str(tmp_path),
                           "--views", "depth")
        names = set(out.split())
        assert code == 0
        assert {"recon_rgb.pgm", "recon_depth.pgm", "input_hha.pgm", "hidden_depth.pgm"} <= names
        assert not names & {"input_rgb.pgm", "feat_rgb.pgm", "hidden_rgb.pgm", "hidden_joint.pgm"}
        assert "pred_depth.pgm" not in names

    def test_unknown_sample(self, workdir, tmp_path):
        assert main(["inspect", "--checkpoint", str(workdir / "ss" / "stage2.ckpt"), "--data",
                     str(workdir / "data"), "--sample-id", "zz", "--out", str(tmp_path)]) == 1


def test_predict_writes_tensors(workdir, tmp_path, capsys):
    from commonrep import tensorio

    code, out, _ = run(capsys, "predict", "--checkpoint", str(workdir / "ssd" / "stage2.ckpt"), "--data",
                       str(workdir / "data"), "--sample-id", "s00002", "--out", str(tmp_path), "--views", "rgb")
    assert code == 0
    depth = tensorio.load(tmp_path / "s00002.depth.crtf")
    labels = tensorio.load(tmp_path / "s00002.labels.crtf")
    assert depth.shape == labels.shape == (16, 16) and (depth > 0).all()
    assert set(np.unique(labels)) <= {1.0, 2.0, 3.0, 4.0, 5.0}


class TestGradcheck:
    def test_all_pass(self, capsys):
        code, out, _ = run(capsys, "gradcheck", "--points", "2")
        assert code == 0
        lines = out.splitlines()
        listed = [l.split()[0] for l in lines[:-1]]
        assert sorted(n for n in listed if not n.startswith("loss:")) == sorted(REGISTRY)
        assert len(listed) == len(set(listed))
        assert all(l.endswith("PASS") for l in lines[:-1])

    def test_corrupted_rule_fails(self, capsys, monkeypatch):
        monkeypatch.setattr(ops.Exp, "backward", lambda self, g: (g,))
        code, out, _ = run(capsys, "gradcheck", "--points", "2")
        assert code != 0
        assert any(l.startswith("exp") and l.endswith("FAIL") for l in out.splitlines())
