import csv
import io
import json

import pytest

from gpucrsim.api import DATAFLOW_KINDS, ApiKind, dump_trace
from gpucrsim.cli import main, parse_bandwidth, UsageError
from gpucrsim.config import SimConfig, transfer_ns
from gpucrsim.harness.runner import checkpoint_run, direct_run
from gpucrsim.harness.scenario import (CSV_FIELDS, Scenario, ScenarioKind, csv_row, migrate,
                                       run_scenario, sweep, to_csv)
from gpucrsim.harness.workload import (PROFILES, WorkloadProfile, fuzz_profile, gen_workload,
                                       sync_points)
from gpucrsim.image import FLAG_DEDUP, read_image

LAUNCHES = (ApiKind.LAUNCH_KNOWN, ApiKind.LAUNCH_OPAQUE)


# workloads

def test_gpt2_train_profile_counts():
    prof = PROFILES["gpt2-train-desk"]
    trace = gen_workload(prof)
    assert sum(c.kind is ApiKind.MALLOC for c in trace) == 1044
    # memory moves are dataflow nodes too and count toward the kernel total
    assert sum(c.kind in DATAFLOW_KINDS for c in trace) == 12548
    assert prof.total_bytes == 30_800_000


def test_generation_is_seeded():
    prof = fuzz_profile(3)
    assert gen_workload(prof) == gen_workload(prof)
    assert gen_workload(prof) != gen_workload(prof.with_(seed=4))


@pytest.mark.parametrize("field", ["opaque_fraction", "adversarial_rate", "write_locality"])
def test_fractions_are_validated(field):
    with pytest.raises(ValueError):
        WorkloadProfile("x", 4, 4096, 10, **{field: 1.5})


def test_default_profiles_keep_opaque_share_low():
    for name in ("resnet-infer-desk", "bert-train-desk", "gpt2-infer-desk"):
        trace = gen_workload(PROFILES[name])
        launches = [c for c in trace if c.kind in LAUNCHES]
        share = sum(c.kind is ApiKind.LAUNCH_OPAQUE for c in launches) / len(launches)
        assert share <= 0.2


@pytest.mark.parametrize("seed", range(8))
def test_no_adversarial_kernels_means_validation_never_fails(seed):
    trace = gen_workload(fuzz_profile(seed, adversarial_rate=0.0))
    at = sync_points(trace)[0]
    for mode in ("cow", "dirty"):
        _, sess = checkpoint_run(trace, SimConfig(), at, mode)
        assert sess.metrics.validation_failures == 0


def test_adversarial_kernels_trip_validation():
    failures = 0
    for seed in range(6):
        trace = gen_workload(fuzz_profile(seed, adversarial_rate=1.0))
        _, sess = checkpoint_run(trace, SimConfig(), sync_points(trace)[0], "dirty")
        failures += sess.metrics.validation_failures
    assert failures > 0


# scenarios

def _small_profile(**kw):
    return fuzz_profile(21).with_(**kw)


def test_fault_tolerance_scenario():
    sc = Scenario(ScenarioKind.FAULT_TOLERANCE, _small_profile(iterations=4), interval=1)
    res = run_scenario(sc)
    assert res.checkpoints >= 3
    assert res.baseline is not None and res.baseline.stall_ns >= res.report.stall_ns


def test_migration_scenario_accounts_downtime():
    trace = gen_workload(_small_profile())
    cfg = SimConfig().with_overrides(network_bw=10**9)
    sc = Scenario(ScenarioKind.MIGRATION, None, cfg, mode="dirty")
    res = run_scenario(sc, trace)
    slack = transfer_ns(cfg.chunk_size, cfg.network_bw)
    assert abs(res.report.downtime_ns - transfer_ns(res.final_bytes, cfg.network_bw)) <= slack
    assert res.report.downtime_ns < res.baseline.downtime_ns


def test_migrate_helper_verifies_state():
    trace = gen_workload(_small_profile())
    direct = direct_run(trace, SimConfig())
    sess, rs, peer = migrate(trace, SimConfig(), sync_points(trace)[0], "cow", direct)
    assert sess.done and rs.done and peer.finished()


def test_startup_scenario_excludes_creation_latency():
    sc = Scenario(ScenarioKind.STARTUP, _small_profile(), mode="stw", pool_size=1)
    res = run_scenario(sc)
    creation = SimConfig().context_creation_ns
    assert res.report.restore_first_kernel_ns < creation
    assert res.baseline.restore_first_kernel_ns - res.report.restore_first_kernel_ns >= creation


def test_scenario_from_dict():
    sc = Scenario.from_dict({"kind": "migration", "profile": "resnet-infer-desk",
                             "profile_overrides": {"iterations": 2},
                             "config": {"network_bw": "1e9"}, "mode": "cow"})
    assert sc.kind is ScenarioKind.MIGRATION and sc.profile.iterations == 2
    assert sc.config.network_bw == 10**9 and sc.profile_name == "resnet-infer-desk"
    with pytest.raises(ValueError):
        Scenario.from_dict({"kind": "startup", "profile": "nope"})
    with pytest.raises(ValueError):
        Scenario.from_dict({"kind": "startup", "colour": "red"})
    with pytest.raises(ValueError):
        Scenario(ScenarioKind.FAULT_TOLERANCE, mode="fast")


def test_sweep_rows():
    sc = Scenario(ScenarioKind.MIGRATION, _small_profile())
    values = ["0.1", "0.25", "0.5"]
    results = sweep(sc, "dirty_threshold", values)
    rows = [csv_row(r, "dirty_threshold", v) for r, v in zip(results, values)]
    parsed = list(csv.DictReader(io.StringIO(to_csv(rows))))
    assert [r["sweep_value"] for r in parsed] == values
    assert tuple(parsed[0]) == CSV_FIELDS
    with pytest.raises(ValueError):
        sweep(sc, "not_a_knob", ["1"])


# cli

@pytest.mark.parametrize("text,value", [("25e9", 25 * 10**9), ("25G", 25 * 10**9),
                                        ("25GB/s", 25 * 10**9), ("1.5m", 1_500_000)])
def test_parse_bandwidth(text, value):
    assert parse_bandwidth(text) == value


@pytest.mark.parametrize("text", ["fast", "-3G", "0"])
def test_parse_bandwidth_rejects(text):
    with pytest.raises(UsageError):
        parse_bandwidth(text)


def _run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture
def small_trace(tmp_path):
    path = tmp_path / "t.jsonl"
    dump_trace(gen_workload(_small_profile()), path)
    return path


def test_ckpt_then_restore_full_downtime(capsys, tmp_path, small_trace):
    img = tmp_path / "a.img"
    code, out, _ = _run(capsys, "ckpt", "--trace", str(small_trace), "--mode", "stw",
                        "--out", str(img))
    assert code == 0
    ck = json.loads(out)
    code, out, err = _run(capsys, "restore", "--image", str(img), "--mode", "full",
                          "--pool", "1", "--trace", str(small_trace))
    assert code == 0 and "restoring" in err
    res = json.loads(out)
    loaded = read_image(img.read_bytes())
    nbytes = sum(a.size for a in loaded.allocations)
    slack = transfer_ns(SimConfig().chunk_size, SimConfig().pcie_bw)
    assert abs(res["metrics"]["downtime_ns"] - transfer_ns(nbytes, SimConfig().pcie_bw)) <= slack
    assert ck["cursor"] == loaded.cursor


def test_cli_output_is_reproducible(capsys, tmp_path, small_trace):
    outs = []
    for name in ("x.img", "y.img"):
        _, out, _ = _run(capsys, "ckpt", "--trace", str(small_trace), "--out", str(tmp_path / name))
        outs.append(json.loads(out).pop("metrics"))
    assert outs[0] == outs[1]
    assert (tmp_path / "x.img").read_bytes() == (tmp_path / "y.img").read_bytes()


def test_inspect_reports_dedup_share(capsys, tmp_path):
    img = tmp_path / "g.img"
    assert _run(capsys, "ckpt", "--profile", "gpt2-infer-desk", "--mode", "dirty",
                "--out", str(img))[0] == 0
    code, out, _ = _run(capsys, "inspect", "--image", str(img))
    info = json.loads(out)
    assert code == 0 and info["flags"] & FLAG_DEDUP
    assert info["dedup_fraction"] == pytest.approx(1 - 709.0 / 6244.0, abs=0.05)
    assert sum(info["records"].values()) == info["buffers"]


def test_bench_sweep_writes_one_row_per_cell(capsys, tmp_path, small_trace):
    scen = tmp_path / "s.json"
    scen.write_text(json.dumps({"kind": "migration", "trace": small_trace.name}))
    out_csv = tmp_path / "out.csv"
    code, out, _ = _run(capsys, "bench", "--scenario", str(scen),
                        "--sweep", "dirty_threshold=0.1,0.25,0.5", "--csv", str(out_csv))
    assert code == 0
    rows = list(csv.DictReader(out_csv.open()))
    assert len(rows) == 3 and len(json.loads(out)) == 3


def test_migrate_command(capsys, small_trace):
    code, out, _ = _run(capsys, "migrate", "--trace", str(small_trace), "--net-bw", "10GB/s")
    res = json.loads(out)
    assert code == 0 and res["scenario"] == "migration" and res["profile"] == "t.jsonl"


@pytest.mark.parametrize("argv", [
    [], ["ckpt", "--out", "x"], ["ckpt", "--profile", "nope", "--out", "x"],
    ["migrate", "--profile", "resnet-infer-desk", "--net-bw", "fast"],
    ["restore", "--image", "/nonexistent/img"], ["bench", "--scenario", "/nonexistent", "--csv", "x"],
])
def test_usage_errors_exit_1(capsys, argv):
    assert _run(capsys, *argv)[0] == 1


def test_corrupt_image_exits_2(capsys, tmp_path):
    bad = tmp_path / "bad.img"
    bad.write_bytes(b"POSI" + bytes(40))
    code, _, err = _run(capsys, "inspect", "--image", str(bad))
    assert code == 2 and "corrupt image" in err


def test_oracle_mismatch_exits_3(capsys, small_trace, monkeypatch):
    import gpucrsim.harness.scenario as scenario
    monkeypatch.setattr(scenario, "states_equal", lambda a, b: False)
    assert _run(capsys, "migrate", "--trace", str(small_trace))[0] == 3


def test_config_from_environment(capsys, tmp_path, small_trace, monkeypatch):
    conf = tmp_path / "c.json"
    conf.write_text(json.dumps({"pcie_bw": 10**9}))
    monkeypatch.setenv("GPUCRSIM_CONFIG", str(conf))
    _, out_slow, _ = _run(capsys, "ckpt", "--trace", str(small_trace), "--mode", "stw",
                          "--out", str(tmp_path / "s.img"))
    monkeypatch.delenv("GPUCRSIM_CONFIG")
    _, out_fast, _ = _run(capsys, "ckpt", "--trace", str(small_trace), "--mode", "stw",
                          "--out", str(tmp_path / "f.img"))
    slow, fast = json.loads(out_slow), json.loads(out_fast)
    assert slow["metrics"]["downtime_ns"] > fast["metrics"]["downtime_ns"]
