import csv
import dataclasses
import io
import json
import struct
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deskdrive import decision as D
from deskdrive.harness import checkpoint as ck
from deskdrive.harness import pipelines as P
from deskdrive.harness.bench import LatencyStats, benchmark
from deskdrive.harness.cli import main
from deskdrive.harness.config import (ConfigError, ExperimentConfig, format_config, load_config, parse_config,
                                      with_overrides)
from deskdrive.harness.report import (COLUMNS, ROWS, MetricsReport, ReportRow, build_report, emit_table,
                                      format_ms, read_metrics, read_timing, write_metrics, write_timing)
from deskdrive.harness.rng import indexed_seed, stream, stream_ints

FIXTURES = Path(__file__).parent / "fixtures"


# ----------------------------------------------------------------------
# config
# ----------------------------------------------------------------------

def test_empty_config_is_defaults():
    assert parse_config("") == ExperimentConfig()
    assert parse_config("# only a comment\n\n") == ExperimentConfig()


def test_parse_nested_keys():
    cfg = parse_config("""
        seed = 9
        module = planner
        decision.gamma = 0.95     # trailing comment
        perception.train.epochs = 3
        env.obstacle_size = (1.0, 2)
        decision.lr_end = 1e-3
    """)
    assert cfg.seed == 9 and cfg.module == "planner"
    assert cfg.decision.gamma == 0.95
    assert cfg.perception.train.epochs == 3
    assert cfg.env.obstacle_size == (1.0, 2.0)
    assert cfg.decision.lr_end == 1e-3
    assert cfg.decision.hidden == ExperimentConfig().decision.hidden


def test_int_field_accepts_int_float_field_accepts_int():
    cfg = parse_config("decision.learning_rate = 1")
    assert cfg.decision.learning_rate == 1.0 and isinstance(cfg.decision.learning_rate, float)


@pytest.mark.parametrize("text, key", [
    ("decision.gama = 0.9", "decision.gama"),
    ("nosuch = 1", "nosuch"),
    ("decision = 3", "decision"),
    ("seed.x = 3", "seed.x"),
    ("decision.hidden = 2.5", "decision.hidden"),
    ("decision.gamma = fast", "decision.gamma"),
    ("decision.gamma = 1.5", "decision.gamma"),
    ("module = everything", "module"),
    ("decision.double_dqn = 1", "decision.double_dqn"),
    ("eval.detection_scenes = 0", "eval.detection_scenes"),
    ("bench.iterations = 50", "bench.iterations"),
])
def test_bad_config_names_field(text, key):
    with pytest.raises(ConfigError) as exc:
        parse_config(text)
    assert exc.value.key == key
    assert exc.value.reason


def test_duplicate_and_malformed_lines():
    with pytest.raises(ConfigError, match="set twice"):
        parse_config("seed = 1\nseed = 2")
    with pytest.raises(ConfigError, match="line 2"):
        parse_config("seed = 1\njust words")


def test_format_round_trip(tmp_path):
    cfg = parse_config("seed = 5\ndecision.gamma = 0.5\nenv.n_moving = 1\nplanner.eta = 1.5")
    path = tmp_path / "c.txt"
    path.write_text(format_config(cfg))
    assert load_config(path) == cfg


def test_overrides_skip_none():
    cfg = with_overrides(ExperimentConfig(), seed=4, out=None, module="decision")
    assert (cfg.seed, cfg.out, cfg.module) == (4, "out", "decision")
    with pytest.raises(ConfigError):
        with_overrides(ExperimentConfig(), seed=-1)


# ----------------------------------------------------------------------
# seeded streams
# ----------------------------------------------------------------------

def test_streams_reproducible_and_distinct():
    a = stream(1, "decision.agent").random(5)
    assert np.array_equal(a, stream(1, "decision.agent").random(5))
    assert not np.array_equal(a, stream(1, "decision.eval").random(5))
    assert not np.array_equal(a, stream(2, "decision.agent").random(5))


def test_new_stream_does_not_shift_existing():
    before = stream_ints(3, "perception.eval", 10)
    stream(3, "something.new").random(1000)
    assert stream_ints(3, "perception.eval", 10) == before


def test_indexed_seed_random_access():
    seeds = [indexed_seed(1, "decision.episodes", i) for i in range(200)]
    assert len(set(seeds)) == 200
    assert all(0 <= s < 2**63 for s in seeds)
    assert indexed_seed(1, "decision.episodes", 57) == seeds[57]
    assert indexed_seed(2, "decision.episodes", 57) != seeds[57]


# ----------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------

BLOCKS = {
    "q.w0": np.arange(12, dtype=float).reshape(3, 4) / 7,
    "scalar": np.array(3.5),
    "empty": np.zeros((0, 5)),
    "special": np.array([np.inf, -0.0, 5e-324, 1.7976931348623157e308]),
}


def test_checkpoint_round_trip(tmp_path):
    path = ck.save_checkpoint(BLOCKS, tmp_path / "a.ckpt")
    back = ck.load_checkpoint(path)
    assert list(back) == list(BLOCKS)
    for k, v in BLOCKS.items():
        assert back[k].shape == v.shape
        assert back[k].tobytes() == v.tobytes()
    assert not (tmp_path / "a.ckpt.tmp").exists()


@settings(max_examples=50, deadline=None)
@given(st.dictionaries(st.text(min_size=1, max_size=12),
                       st.lists(st.floats(allow_nan=False, width=64), max_size=20), max_size=6))
def test_checkpoint_round_trip_property(blocks):
    arrays = {k: np.array(v, dtype=float) for k, v in blocks.items()}
    back = ck.decode_checkpoint(ck.encode_checkpoint(arrays))
    assert {k: v.tobytes() for k, v in back.items()} == {k: v.tobytes() for k, v in arrays.items()}


def test_checkpoint_header_layout():
    raw = ck.encode_checkpoint({"x": np.array([1.0])})
    assert raw[:6] == b"DDCKPT"
    magic, version, length = struct.unpack_from("<6sHQ", raw)
    assert version == ck.VERSION and len(raw) == 16 + length + 8


@pytest.mark.parametrize("cut", [0, 5, 15, 16, 30, -9, -1])
def test_truncated_checkpoint(cut):
    raw = ck.encode_checkpoint(BLOCKS)
    with pytest.raises(ck.TruncatedCheckpoint):
        ck.decode_checkpoint(raw[:cut])


def test_corrupted_checkpoint():
    raw = bytearray(ck.encode_checkpoint(BLOCKS))
    raw[40] ^= 0x01
    with pytest.raises(ck.ChecksumMismatch):
        ck.decode_checkpoint(bytes(raw))
    with pytest.raises(ck.ChecksumMismatch):
        ck.decode_checkpoint(ck.encode_checkpoint(BLOCKS) + b"\0")


def test_version_and_magic_errors():
    raw = bytearray(ck.encode_checkpoint(BLOCKS))
    raw[6:8] = struct.pack("<H", ck.VERSION + 1)
    with pytest.raises(ck.VersionMismatch):
        ck.decode_checkpoint(bytes(raw))
    with pytest.raises(ck.BadMagic):
        ck.decode_checkpoint(b"NOTCKP" + bytes(raw[6:]))


# ----------------------------------------------------------------------
# decision resume
# ----------------------------------------------------------------------

SMALL = ExperimentConfig(decision=D.AgentConfig(hidden=16, batch_size=16, eps_decay_steps=300,
                                                 target_sync=25, replay_capacity=400))


def _episodes(agent, cfg, first, last):
    trace = []
    for i in range(first, last):
        D.train_episode(agent, indexed_seed(cfg.seed, "decision.episodes", i), trace=trace)
    return trace


def test_resume_from_checkpoint_matches_uninterrupted(tmp_path):
    whole = P.make_agent(SMALL)
    _episodes(whole, SMALL, 0, 4)
    expected = _episodes(whole, SMALL, 4, 8)

    first = P.make_agent(SMALL)
    _episodes(first, SMALL, 0, 4)
    ck.save_checkpoint(first.state_blocks(), tmp_path / "d.ckpt")
    assert len(first.replay) > 0

    # a fresh agent on another seed: everything that matters must come from the file
    resumed = P.make_agent(dataclasses.replace(SMALL, seed=99))
    resumed.load_state_blocks(ck.load_checkpoint(tmp_path / "d.ckpt"))
    assert resumed.steps == first.steps and resumed.episodes == 4
    assert _episodes(resumed, SMALL, 4, 8) == expected


def test_planner_checkpoint_restores_heuristic(tmp_path):
    cfg = dataclasses.replace(ExperimentConfig(), planner=dataclasses.replace(
        ExperimentConfig().planner, epochs=2, train_graphs=4, val_graphs=2))
    trainer = P.make_trainer(cfg)
    model = trainer.fit()
    ck.save_checkpoint(trainer.state_blocks(), tmp_path / "planner.ckpt")
    back = P.load_heuristic(tmp_path)
    g = trainer.train[0].graph
    assert np.array_equal(back.estimate_costs(g, 0), model.estimate_costs(g, 0))


# ----------------------------------------------------------------------
# report
# ----------------------------------------------------------------------

def test_empty_report_is_header_only():
    text, csv_text = emit_table(MetricsReport())
    body = [line for line in text.splitlines() if not line.startswith("#")]
    assert body[0].split(" | ")[0].strip() == "Functional Module"
    assert len(body) == 2   # header and rule
    assert csv_text == ",".join(COLUMNS) + "\n"


def _sample_report():
    return MetricsReport([
        ReportRow("Image Identification", 98.5, 45.0, 48.2),
        ReportRow("Real-time Target Tracking and Classification", 98.2, 30.0, 31.75),
        ReportRow("Environmental Perception and Decision Support", 97.8, 0.0148, 0.017),
        ReportRow("Route Planning and Navigation", 98.0, 0.612, 0.65849),
    ])


def test_table_golden(tmp_path):
    text, csv_text = emit_table(_sample_report(), tmp_path / "r.txt", tmp_path / "r.csv")
    assert text == (FIXTURES / "report_golden.txt").read_text()
    assert csv_text == (FIXTURES / "report_golden.csv").read_text()
    assert (tmp_path / "r.txt").read_text() == text


def test_first_row_layout():
    text, csv_text = emit_table(MetricsReport([ReportRow("Image Identification", 98.5, 45.0, 45.0)]))
    row = [c.strip() for c in text.splitlines()[-1].split("|")]
    assert row == ["Image Identification", "98.5", "45", "45"]
    assert list(csv.reader(io.StringIO(csv_text)))[1] == ["Image Identification", "98.5", "45", "45"]


def test_text_and_csv_carry_same_cells():
    text, csv_text = emit_table(_sample_report())
    body = [line for line in text.splitlines() if not line.startswith("#")]
    rows_text = [[c.strip() for c in line.split("|")] for line in body[2:]]
    assert rows_text == list(csv.reader(io.StringIO(csv_text)))[1:]


def test_header_says_synthetic():
    text, _ = emit_table(MetricsReport())
    assert "synthetic" in text.splitlines()[0]


@pytest.mark.parametrize("v, s", [(45, "45"), (0.0123, "0.0123"), (1.5, "1.5"), (0.0, "0"), (123.4, "123"),
                                  (9.999, "10"), (0.1, "0.1")])
def test_format_ms(v, s):
    assert format_ms(v) == s


def test_report_row_validation():
    with pytest.raises(ValueError):
        ReportRow("x", 101.0, 1.0, 1.0)
    with pytest.raises(ValueError):
        ReportRow("x", 50.0, -1.0, 1.0)


def test_build_report_order_and_join(tmp_path):
    metrics = {"planner.within_bound": 0.99, "perception.detection_accuracy": 0.985, "other": 3.0}
    timing = {"planner.replan": LatencyStats(0.5, 0.4, 0.9, 1.0, 100)}
    write_metrics(metrics, tmp_path / "m.csv")
    write_timing(timing, tmp_path / "t.csv")
    assert read_metrics(tmp_path / "m.csv") == metrics
    assert read_timing(tmp_path / "t.csv") == timing
    rep = build_report(read_metrics(tmp_path / "m.csv"), read_timing(tmp_path / "t.csv"))
    assert [r.name for r in rep.rows] == ["Image Identification", "Route Planning and Navigation"]
    assert rep.rows[1] == ReportRow("Route Planning and Navigation", 99.0, 0.5, 0.9)
    assert rep.rows[0].mean_ms == 0.0


def test_row_names_follow_module_order():
    assert [v[0] for v in ROWS.values()] == [
        "Image Identification", "Real-time Target Tracking and Classification",
        "Environmental Perception and Decision Support", "Route Planning and Navigation"]


# ----------------------------------------------------------------------
# benchmark
# ----------------------------------------------------------------------

def test_noop_benchmark_under_a_microsecond():
    stats = benchmark(lambda: None, iterations=1000, warmup=100)
    assert stats.iterations == 1000
    assert stats.mean_ms < 0.001


def test_benchmark_excludes_warmup():
    calls = []
    stats = benchmark(lambda: calls.append(1), iterations=100, warmup=7)
    assert len(calls) == 107 and stats.iterations == 100


def test_latency_stats_order():
    s = LatencyStats.from_samples(np.arange(1, 101, dtype=float))
    assert s.p50_ms <= s.p95_ms <= s.max_ms == 100.0
    assert s.mean_ms == 50.5


# ----------------------------------------------------------------------
# CLI
# ----------------------------------------------------------------------

def _error(capsys):
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1
    return json.loads(err[0])


def test_cli_unknown_config_key(tmp_path, capsys):
    (tmp_path / "c.txt").write_text("decision.gama = 0.9\n")
    code = main(["run", "--config", str(tmp_path / "c.txt"), "--out", str(tmp_path / "o")])
    assert code != 0
    err = _error(capsys)
    assert err["error"] == "config" and err["key"] == "decision.gama"


def test_cli_usage_error(capsys):
    assert main(["fly"]) != 0
    assert _error(capsys)["error"] == "usage"
    assert main(["run", "--module", "everything"]) != 0
    assert _error(capsys)["error"] == "usage"


def test_cli_missing_config_file(tmp_path, capsys):
    assert main(["report", "--config", str(tmp_path / "missing.txt")]) != 0
    assert _error(capsys)["error"] == "io"


def test_cli_report_without_metrics(tmp_path, capsys):
    assert main(["report", "--out", str(tmp_path)]) != 0
    assert _error(capsys)["error"] == "io"


def test_cli_corrupted_checkpoint_aborts(tmp_path, capsys):
    (tmp_path / "decision.ckpt").write_bytes(b"DDCKPT" + b"\0" * 40)
    assert main(["simulate", "--out", str(tmp_path)]) != 0
    err = _error(capsys)
    assert err["error"] == "checkpoint"


FAST = """
planner.epochs = 3
planner.train_graphs = 6
planner.val_graphs = 4
eval.planner_graphs = 10
bench.iterations = 100
bench.warmup = 5
"""


def _deterministic_files(out: Path) -> dict[str, bytes]:
    skip = {"timing.csv", "report.txt", "report.csv"}
    return {str(p.relative_to(out)): p.read_bytes() for p in sorted(out.rglob("*"))
            if p.is_file() and p.name not in skip}


def _table_without_latency(out: Path) -> list[list[str]]:
    rows = list(csv.reader(io.StringIO((out / "report.csv").read_text())))
    return [r[:2] for r in rows]


def test_cli_planner_run_is_reproducible(tmp_path, capsys):
    (tmp_path / "c.txt").write_text(FAST)
    outs = [tmp_path / "a", tmp_path / "b"]
    for out in outs:
        assert main(["run", "--module", "planner", "--seed", "1", "--config", str(tmp_path / "c.txt"),
                     "--out", str(out)]) == 0
    a, b = (_deterministic_files(o) for o in outs)
    assert set(a) == {"config.txt", "metrics.csv", "planner.ckpt", "traces/planner_queries.txt"}
    assert a == b
    assert _table_without_latency(outs[0]) == _table_without_latency(outs[1])
    assert "Route Planning and Navigation" in capsys.readouterr().out


def test_cli_train_then_report(tmp_path, capsys):
    (tmp_path / "c.txt").write_text(FAST)
    base = ["--config", str(tmp_path / "c.txt"), "--out", str(tmp_path)]
    assert main(["train-planner", *base]) == 0
    assert main(["benchmark", "--module", "planner", *base]) == 0
    capsys.readouterr()
    assert main(["report", *base]) == 0
    text = capsys.readouterr().out
    row = [line for line in text.splitlines() if line.startswith("Route Planning")]
    assert len(row) == 1
    cells = [c.strip() for c in row[0].split("|")]
    assert float(cells[2]) > 0 and float(cells[3]) > 0
    assert "planner.replan" in read_timing(tmp_path / "timing.csv")
