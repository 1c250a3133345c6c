import io
import json
import shutil
import sys

import numpy as np
import pytest

from valvefdd import cli, container, data, pipeline, sim
from valvefdd.config import ROOT_ENV, ConfigError, PipelineConfig


def test_defaults_validate():
    cfg = PipelineConfig.from_dict()
    assert cfg.T == 100 and cfg.step == 10
    assert cfg.tcae_config.L == 3
    assert cfg.raw["cusum"] == {"T_fp": 0.75, "T_cs": 4.0, "kappa": 0.02}
    assert cfg.raw["ood"]["alpha"] == 0.01 and cfg.raw["ood"]["thr_ood_cs"] == 100


@pytest.mark.parametrize("override", [
    "window.inference_step=5",
    "detector.calibration=beta",
    "detector.imbalance=magic",
    "cusum.T_fp=1.5",
    "ood.alpha=0",
    "tcae.s=3",
    "corpus.types=[T4]",
    "split.train=0.9",
])
def test_invalid_configs_rejected(override):
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({}, [override])


def test_unknown_keys_and_malformed_overrides():
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({"nonsense": 1})
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({}, ["tcae.nonsense=1"])
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({}, ["no-equals-sign"])


def test_override_parsing():
    cfg = PipelineConfig.from_dict({}, ["tcae_train.max_epochs=5", "corpus.types=[T2, T3]", "seed=9"])
    assert cfg.train_config.max_epochs == 5 and cfg.seed == 9
    assert cfg.raw["corpus"]["types"] == ["T2", "T3"]


def test_stage_hashes_track_dependencies():
    a = PipelineConfig.from_dict()
    b = PipelineConfig.from_dict({}, ["cusum.T_cs=2"])
    c = PipelineConfig.from_dict({}, ["tcae.k=5"])
    for stage in ("corpus", "split", "tcae", "detector", "calibration", "ood"):
        assert a.stage_hash(stage) == b.stage_hash(stage)
    assert a.stage_hash("evaluate") != b.stage_hash("evaluate")
    assert a.stage_hash("split") == c.stage_hash("split")
    assert a.stage_hash("tcae") != c.stage_hash("tcae")


def test_root_precedence(monkeypatch, tmp_path):
    cfg = PipelineConfig.from_dict({"root": str(tmp_path / "cfg")})
    monkeypatch.setenv(ROOT_ENV, str(tmp_path / "env"))
    assert cfg.root(str(tmp_path / "arg")) == tmp_path / "arg"
    assert cfg.root() == tmp_path / "env"
    monkeypatch.delenv(ROOT_ENV)
    assert cfg.root() == tmp_path / "cfg"
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict().root()


def test_usage_and_config_exit_codes(tmp_path, capsys):
    assert cli.main(["bogus"]) == cli.EXIT_USAGE
    assert cli.main([]) == cli.EXIT_USAGE
    assert cli.main(["simulate", "--root", str(tmp_path), "--set", "window.step=3"]) == cli.EXIT_CONFIG
    bad = tmp_path / "bad.yaml"
    bad.write_text("corpus: [unclosed")
    assert cli.main(["simulate", "--config", str(bad), "--root", str(tmp_path)]) == cli.EXIT_CONFIG
    assert cli.main(["show-config", "--set", "seed=4"]) == cli.EXIT_OK
    assert json.loads(capsys.readouterr().out)["seed"] == 4


def test_missing_artifact_exit_code(tmp_path):
    assert cli.main(["train-tcae", "--root", str(tmp_path / "empty")]) == cli.EXIT_MISSING


@pytest.fixture()
def run_copy(tiny_run, tmp_path):
    """Private copy of the tiny pipeline root so tests may modify it."""
    cfg_path, root = tiny_run
    dst = tmp_path / "root"
    shutil.copytree(root, dst)
    return cfg_path, dst


def test_config_hash_mismatch_exit_code(run_copy):
    cfg_path, root = run_copy
    code = cli.main(["evaluate", "--config", str(cfg_path), "--root", str(root), "--set", "tcae.dropout=0.2"])
    assert code == cli.EXIT_ARTIFACT


def test_version_mismatch_exit_code(run_copy):
    cfg_path, root = run_copy
    p = root / "detector.vfdd"
    buf = bytearray(p.read_bytes())
    buf[4] = container.FORMAT_VERSION + 1
    p.write_bytes(bytes(buf))
    assert cli.main(["evaluate", "--config", str(cfg_path), "--root", str(root)]) == cli.EXIT_ARTIFACT


def test_acceptance_violation_exit_code(run_copy):
    cfg_path, root = run_copy
    args = ["evaluate", "--config", str(cfg_path), "--root", str(root), "--set", "eval.min_detection_recall=1.01"]
    assert cli.main(args) == cli.EXIT_ACCEPTANCE


def test_rerun_is_idempotent_and_leaves_upstream_untouched(run_copy):
    cfg_path, root = run_copy
    before = {p.name: container.file_sha256(p) for p in root.glob("*.vfdd")}
    split_before = (root / "split.json").read_bytes()
    for stage in ("train-tcae", "extract", "train-detector", "calibrate"):
        assert cli.main([stage, "--config", str(cfg_path), "--root", str(root)]) == cli.EXIT_OK
    after = {p.name: container.file_sha256(p) for p in root.glob("*.vfdd")}
    assert before == after
    assert (root / "split.json").read_bytes() == split_before


def _stream(args, monkeypatch, capsys, stdin: bytes | None = None):
    if stdin is not None:
        monkeypatch.setattr(sys, "stdin", io.TextIOWrapper(io.BytesIO(stdin)))
    code = cli.main(args)
    out = capsys.readouterr().out
    return code, [json.loads(line) for line in out.splitlines() if line.strip()]


def test_stream_quiet_detector_emits_no_fault(tiny_run, tmp_path, monkeypatch, capsys):
    cfg_path, root = tiny_run
    cfg = PipelineConfig.load(cfg_path)
    nominal = next(t for t in pipeline.load_split(cfg, root).trajectories("test") if t.label == 0)
    path = tmp_path / "nominal.vfdd"
    sim.save_trajectory(nominal, path)
    code, events = _stream(["stream", "--config", str(cfg_path), "--root", str(root),
                            "--set", "cusum.T_cs=1000000", str(path)], monkeypatch, capsys)
    assert code == 0
    assert not [e for e in events if e["event"] == "fault"]


def test_stream_from_pipe_reports_ood_warning(tiny_run, monkeypatch, capsys):
    cfg_path, root = tiny_run
    cfg = PipelineConfig.load(cfg_path)
    sd = pipeline.load_split(cfg, root)
    src = sd.trajectories("test")[0]
    bad = sim.make_ood(src, -1.0, 5.0, 0.0)
    code, events = _stream(["stream", "--config", str(cfg_path), "--root", str(root), "-"], monkeypatch, capsys,
                           stdin=container.encode("trajectory", {
                               "channels": list(bad.channels), "sample_rate": bad.sample_rate,
                               "label": bad.label, "traj_type": bad.traj_type, "id": bad.id},
                               {"data": bad.data}))
    assert code == 0
    warn = [e for e in events if e["event"] == "ood_warning"]
    assert len(warn) == 1 and warn[0]["n_ood"] == cfg.raw["ood"]["thr_ood_cs"] + 1


def test_stream_window_container_matches_trajectory(tiny_run, tmp_path, monkeypatch, capsys):
    cfg_path, root = tiny_run
    cfg = PipelineConfig.load(cfg_path)
    sd = pipeline.load_split(cfg, root)
    trajs = [t for t in sd.trajectories("test") if t.label in (128, 511)][:2]
    paths = []
    for t in trajs:
        p = tmp_path / f"t{t.id}.vfdd"
        sim.save_trajectory(t, p)
        paths.append(str(p))
    ws = data.windows_many(trajs, sd.scaler, cfg.T, cfg.step)
    wpath = tmp_path / "w.vfdd"
    data.save_windows(ws, wpath)
    base = ["stream", "--config", str(cfg_path), "--root", str(root)]
    _, from_traj = _stream(base + paths, monkeypatch, capsys)
    _, from_win = _stream(base + [str(wpath)], monkeypatch, capsys)
    assert from_traj == from_win
    assert any(e["event"] == "fault" for e in from_traj)
    for e in from_traj:
        assert e["time_s"] >= cfg.T / sim.SAMPLE_RATE
        if e["event"] == "fault":
            assert set(e) >= {"traj_id", "time_s", "p_fail", "diagnosis", "confidence"}


def test_stream_rejects_foreign_container(tiny_run, monkeypatch, capsys):
    cfg_path, root = tiny_run
    code, _ = _stream(["stream", "--config", str(cfg_path), "--root", str(root), str(root / "detector.vfdd")],
                      monkeypatch, capsys)
    assert code == cli.EXIT_ARTIFACT


def test_bench_imbalance_command(run_copy):
    cfg_path, root = run_copy
    assert cli.main(["bench-imbalance", "--config", str(cfg_path), "--root", str(root)]) == 0
    rows = (root / "reports" / "bench_imbalance.csv").read_text().splitlines()
    assert len(rows) == 1 + 3 * 6
    base = (root / "reports" / "reliability_imbalance_base_base.csv").read_bytes()
    assert base == (root / "reports" / "reliability_imbalance_threshold-moving_base.csv").read_bytes()


def test_bench_arch_command(run_copy):
    cfg_path, root = run_copy
    args = ["bench-arch", "--config", str(cfg_path), "--root", str(root), "--set", "bench.rows=[4]",
            "--set", "bench.max_epochs=1", "--set", "bench.timing_windows=5"]
    assert cli.main(args) == 0
    lines = (root / "reports" / "bench_arch.csv").read_text().splitlines()
    assert lines[0].split(",")[:4] == ["c_latent", "L", "k", "n_1x1"]
    row = dict(zip(lines[0].split(","), lines[1].split(",")))
    assert (row["c_latent"], row["L"], row["k"]) == ("16", "3", "9")
    assert float(row["inference_ms"]) > 0 and 0 <= float(row["auroc_e"]) <= 1


def test_artifacts_record_config_hash(tiny_run):
    cfg_path, root = tiny_run
    cfg = PipelineConfig.load(cfg_path)
    for name, stage in (("tcae.vfdd", "tcae"), ("detector.vfdd", "detector"), ("diagnoser.vfdd", "diagnoser"),
                        ("calibration.vfdd", "calibration"), ("ood.vfdd", "ood"), ("features.vfdd", "features")):
        meta, _ = container.read(root / name)
        assert meta["config_hash"] == cfg.stage_hash(stage), name
    assert np.all(np.isfinite(pipeline.load_features(cfg, root)["test"].e))
