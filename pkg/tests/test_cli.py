import csv
import filecmp
import math
from pathlib import Path

import numpy as np
import pytest
import torch

from drfuse.checkpoints import load_codec, load_fusion, save_codec
from drfuse.cli import ablation_label, main
from drfuse.config import RunConfig
from drfuse.io import read_manifest
from drfuse.scenes import load_bundle
from drfuse.training import SyntheticCorpus, train_codec

TINY = ["--set", "codec_hidden=8", "--set", "width=16", "--set", "heads=2", "--set", "blocks=1", "--set", "stage1_batch=4", "--set", "prior_batch=4", "--set", "stage2_batch=2", "--set", "lr=0.001"]


def run(*argv):
    return main([str(a) for a in argv])


def tree_equal(a: Path, b: Path) -> bool:
    fa = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    fb = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    return fa == fb and all(filecmp.cmp(a / f, b / f, shallow=False) for f in fa)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("generate", "--out", root / "data", "--sequences", 2, "--length", 4, "--seed", 1) == 0
    assert run("train-stage1", "--data", root / "data", "--out", root / "s1", "--stage1-steps", 30, *TINY) == 0
    assert run("train-stage2", "--data", root / "data", "--stage1", root / "s1", "--out", root / "s2", "--prior-steps", 20, "--stage2-steps", 4, *TINY) == 0
    return root


def fuse(root, out, *extra):
    seq = root / "data" / "seq_0000" / "manifest.txt"
    return run("fuse", "--ir", seq, "--ckpt", root / "s2", "--out", out, "--steps", 3, "--seed", 2, *extra)


# -- generate -------------------------------------------------------------------------


def test_generate_deterministic(tmp_path):
    assert run("generate", "--out", tmp_path / "a", "--sequences", 2, "--length", 3, "--seed", 1) == 0
    assert run("generate", "--out", tmp_path / "b", "--sequences", 2, "--length", 3, "--seed", 1) == 0
    assert tree_equal(tmp_path / "a", tmp_path / "b")
    run("generate", "--out", tmp_path / "c", "--sequences", 2, "--length", 3, "--seed", 2)
    assert not tree_equal(tmp_path / "a", tmp_path / "c")


def test_generate_single_frame(tmp_path):
    assert run("generate", "--out", tmp_path, "--length", 1) == 0
    seq = tmp_path / "seq_0000"
    assert not list(seq.glob("flow_*"))
    assert load_bundle(seq / "manifest.txt").length == 1


def test_generate_records_flicker(tmp_path):
    assert run("generate", "--out", tmp_path, "--length", 3, "--flicker", 0.2, "--scene", "static") == 0
    _, meta = read_manifest(tmp_path / "seq_0000" / "manifest.txt")
    assert float(meta["flicker"]) == 0.2
    assert RunConfig.__dataclass_fields__ and (tmp_path / "config.txt").exists()
    from drfuse.config import load_config

    assert load_config(tmp_path / "config.txt").flicker == 0.2


def test_generate_bad_config(tmp_path):
    assert run("generate", "--out", tmp_path, "--set", "nonsense=1") == 2
    assert run("generate", "--out", tmp_path, "--set", "flicker=0.9") == 2


# -- training ------------------------------------------------------------------------------


def test_stage1_outputs(pipeline):
    rows = read_csv(pipeline / "s1" / "loss.csv")
    assert list(rows[0]) == ["step", "total", "rec", "vq", "freq", "temp"]
    assert float(rows[-1]["total"]) < float(rows[0]["total"])
    codec, scale, cfg = load_codec(pipeline / "s1")
    assert cfg.codec_hidden == 8 and scale > 0


def test_stage1_without_temporal_term(tmp_path, pipeline):
    assert run("train-stage1", "--data", pipeline / "data", "--out", tmp_path, "--stage1-steps", 3, "--lambda-temp", 0, *TINY) == 0
    assert all(float(r["temp"]) == 0 for r in read_csv(tmp_path / "loss.csv"))


def test_stage2_outputs(pipeline):
    assert read_csv(pipeline / "s2" / "prior_loss.csv") and read_csv(pipeline / "s2" / "loss.csv")
    models, cfg = load_fusion(pipeline / "s2")
    assert models.adapter is not None and cfg.width == 16


def test_stage2_needs_stage1(tmp_path, pipeline):
    assert run("train-stage2", "--data", pipeline / "data", "--stage1", tmp_path / "missing", "--out", tmp_path / "o") == 2


def test_stage2_rejects_mismatched_codec(tmp_path, pipeline):
    assert run("train-stage2", "--data", pipeline / "data", "--stage1", pipeline / "s1", "--out", tmp_path, "--set", "codec_hidden=16") == 2


def test_codec_checkpoint_roundtrip_bit_exact(tmp_path):
    corpus = SyntheticCorpus.generate(2, seed=0, length=3)
    from drfuse.codec import VQCodec

    torch.manual_seed(0)
    codec, _ = train_codec(corpus, 2, seed=0, batch=2, codec=VQCodec(hidden=8))
    save_codec(tmp_path, codec, RunConfig(codec_hidden=8), 1.25)
    back, scale, _ = load_codec(tmp_path)
    x = corpus.stream(0, "vi")[:, None].float()
    with torch.no_grad():
        assert torch.equal(back.decode(back.encode(x)), codec.decode(codec.encode(x)))
    assert scale == 1.25


def test_missing_data(tmp_path):
    assert run("train-stage1", "--data", tmp_path / "nothing", "--out", tmp_path / "o") == 2


# -- fuse / eval / report --------------------------------------------------------------------


def test_fuse_outputs_and_determinism(pipeline, tmp_path):
    assert fuse(pipeline, tmp_path / "a", "--diffmaps") == 0
    assert fuse(pipeline, tmp_path / "b", "--diffmaps") == 0
    assert tree_equal(tmp_path / "a", tmp_path / "b")
    a = tmp_path / "a"
    assert len(list(a.glob("fused_*.ppm"))) == 4 and len(list(a.glob("diff_*.ppm"))) == 3
    rows = read_csv(a / "report.csv")
    assert list(rows[0]) == ["frame", "cc", "en", "ssim", "diff_energy", "warped_residual"] and len(rows) == 4
    assert "ssim_target" in read_csv(a / "metrics.csv")[0]
    assert read_csv(a / "drift.csv")[-1]["frame"] == "slope"
    assert read_manifest(a / "manifest.txt")[1]["label"] == "full"


def test_fuse_threads_identical(pipeline, tmp_path, monkeypatch):
    fuse(pipeline, tmp_path / "a")
    monkeypatch.setenv("DRFUSE_THREADS", "3")
    fuse(pipeline, tmp_path / "b")
    assert tree_equal(tmp_path / "a", tmp_path / "b")


def test_scale_zero_equals_ablate_guidance(pipeline, tmp_path):
    assert fuse(pipeline, tmp_path / "a", "--scale", 0) == 0
    assert fuse(pipeline, tmp_path / "b", "--ablate-guidance") == 0
    for i in range(4):
        assert filecmp.cmp(tmp_path / "a" / f"fused_{i:04d}.ppm", tmp_path / "b" / f"fused_{i:04d}.ppm", shallow=False)
    assert filecmp.cmp(tmp_path / "a" / "report.csv", tmp_path / "b" / "report.csv", shallow=False)


def test_ablation_matrix_and_report(pipeline, tmp_path, capsys):
    dirs = []
    for flag in (None, "hg", "adapter", "refine", "h2"):
        d = tmp_path / (flag or "full")
        assert fuse(pipeline, d, *(["--ablate", flag] if flag else [])) == 0
        dirs.append(d)
    labels = [read_manifest(d / "manifest.txt")[1]["label"] for d in dirs]
    assert labels == ["full", "no_hg", "no_adapter", "no_refine", "no_h2"]
    out = tmp_path / "table.csv"
    capsys.readouterr()
    assert run("report", *dirs, "--out", out) == 0
    text = capsys.readouterr().out
    rows = read_csv(out)
    assert [r["run"] for r in rows] == labels and "no_refine" in text
    reports = [(d / "report.csv").read_bytes() for d in dirs]
    assert len(set(reports)) == 5


def test_report_single_run_equals_means(pipeline, tmp_path):
    fuse(pipeline, tmp_path / "a")
    run("report", tmp_path / "a", "--out", tmp_path / "t.csv")
    row = read_csv(tmp_path / "t.csv")[0]
    metrics = read_csv(tmp_path / "a" / "metrics.csv")
    vals = [float(r["diff_energy"]) for r in metrics]
    expect = np.mean([v for v in vals if math.isfinite(v)])
    assert math.isclose(float(row["diff_energy"]), expect, rel_tol=1e-8)


def test_report_identical_runs(pipeline, tmp_path):
    fuse(pipeline, tmp_path / "a")
    fuse(pipeline, tmp_path / "b")
    run("report", tmp_path / "a", tmp_path / "b", "--out", tmp_path / "t.csv")
    rows = read_csv(tmp_path / "t.csv")
    assert list(rows[0].values())[1:] == list(rows[1].values())[1:]


def test_eval_recomputes(pipeline, tmp_path):
    fuse(pipeline, tmp_path / "a")
    seq = pipeline / "data" / "seq_0000" / "manifest.txt"
    assert run("eval", "--run", tmp_path / "a", "--data", seq) == 0
    ev = read_csv(tmp_path / "a" / "eval.csv")
    assert len(ev) == 4 and list(ev[0]) == ["frame", "cc", "en", "ssim", "diff_energy", "warped_residual"]


def test_fuse_errors(pipeline, tmp_path):
    seq = pipeline / "data" / "seq_0000" / "manifest.txt"
    other = tmp_path / "short"
    run("generate", "--out", other, "--length", 2)
    assert run("fuse", "--ir", seq, "--vi", other / "seq_0000" / "manifest.txt", "--ckpt", pipeline / "s2", "--out", tmp_path / "x") == 2
    assert run("fuse", "--ir", seq, "--ckpt", tmp_path / "nockpt", "--out", tmp_path / "y") == 2
    assert run("report") == 2
    assert run("report", tmp_path / "empty") == 2
    assert run("eval", "--run", tmp_path / "none", "--data", seq) == 2


def test_error_line_is_one_line(pipeline, tmp_path, capsys):
    run("fuse", "--ir", pipeline / "data" / "seq_0000" / "manifest.txt", "--ckpt", tmp_path, "--out", tmp_path / "z")
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("drfuse: error:")


def test_ablation_label():
    assert ablation_label([]) == "full"
    assert ablation_label(["refine", "hg", "hg"]) == "no_hg+no_refine"
