import os
from dataclasses import dataclass

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from valvefdd import data, sim, tcae
from valvefdd.pipeline import FeatureSet, extract_features

settings.register_profile("repo", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "repo"))

# small end-to-end configuration shared by the CLI and determinism tests
TINY_CONFIG = {
    "seed": 3,
    "corpus": {"n_trajectories": 40, "duration_scale": 0.4, "types": ["T2", "T3"]},
    "tcae_train": {"max_epochs": 2, "batch_size": 256},
    "ood": {"alpha": 0.05, "thr_ood_cs": 10},
    "detector": {"gbt": {"max_iter": 20}},
    "diagnoser": {"gbt": {"max_iter": 20}},
}


@dataclass
class Desk:
    """Desk-scale corpus with a trained autoencoder and extracted features."""

    splits: dict
    scaler: data.Scaler
    model: tcae.TcaeModel
    windows: dict
    features: dict


def build_desk() -> Desk:
    spec = sim.DatasetSpec.from_ratios(48, sim.DEV_RATIOS, duration_scale=0.5)
    trajs = sim.generate_dataset(spec, seed=1)
    splits = data.split_trajectories(trajs, seed=0)
    scaler = data.fit_scaler(splits["train"])
    win = {k: data.windows_many(splits[k], scaler, 100, 10) for k in ("train", "val", "calibration", "test")}
    nominal = lambda ws: ws[ws.labels == 0]  # noqa: E731
    model = tcae.train(nominal(win["train"]), nominal(win["val"]), tcae.TcaeConfig(),
                       tcae.TrainConfig(batch_size=256, max_epochs=15, seed=0))
    feats = {k: FeatureSet(**extract_features(model, win[k])) for k in ("train", "calibration", "test")}
    return Desk(splits, scaler, model, win, feats)


@pytest.fixture(scope="session")
def desk() -> Desk:
    return build_desk()


@pytest.fixture(scope="session")
def tiny_run(tmp_path_factory):
    """Full CLI pipeline on the tiny configuration; returns (config path, root)."""
    import yaml

    from valvefdd import cli

    base = tmp_path_factory.mktemp("tiny")
    cfg_path = base / "config.yaml"
    cfg_path.write_text(yaml.safe_dump(TINY_CONFIG))
    root = base / "root"
    code = cli.main(["run-all", "--config", str(cfg_path), "--root", str(root)])
    assert code == 0
    return cfg_path, root


def nominal_only(ws):
    return ws[np.asarray(ws.labels) == 0]


def pytest_terminal_summary(terminalreporter):
    """One pass/fail line per acceptance criterion."""
    lines = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            if "test_acceptance.py" not in getattr(rep, "nodeid", "") or rep.when not in ("call", "setup"):
                continue
            if rep.when == "setup" and outcome == "passed":
                continue
            props = dict(getattr(rep, "user_properties", []))
            crit = props.get("criterion")
            if crit is None:
                continue
            status = "PASS" if outcome == "passed" else "FAIL"
            lines.append((int(crit), f"criterion {crit:>2}: {status}  {props.get('detail', '')}"))
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
