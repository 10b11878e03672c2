import csv
import gzip
import json
import struct
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cpcl.cli import (
    KEYS,
    METRICS_HEADER,
    REPORT_HEADER,
    DatasetError,
    emit_config,
    load_config,
    load_dataset,
    main,
    parse_config,
    read_idx,
    report,
    run_experiment,
)
from cpcl.cli.runner import OUT_ENV, output_dir

ROOT = Path(__file__).resolve().parents[1]
MNIST = ROOT / "data" / "mnist10k"


def idx_bytes(array: np.ndarray, code: int = 0x08) -> bytes:
    header = bytes([0, 0, code, array.ndim]) + b"".join(struct.pack(">I", d) for d in array.shape)
    return header + array.astype(">u1" if code == 0x08 else ">i4").tobytes()


@pytest.fixture
def csv_toy(tmp_path):
    rng = np.random.default_rng(0)
    x = rng.random((90, 4))
    y = (x[:, 0] > x[:, 1]).astype(int) + (x[:, 2] > 0.5)
    path = tmp_path / "toy.csv"
    path.write_text("".join(",".join(f"{v:.5f}" for v in row) + f",{c}\n" for row, c in zip(x, y)))
    return path


def toy_config(csv_path, name="toy", **extra):
    lines = [
        "paradigm.name = FL_server_perturb",
        "topology.n = 6",
        "noise.sampling = centralized_cnoise",
        "noise.multiplier = 1.0",
        "train.epochs = 2",
        f"dataset.path = {csv_path}",
        "dataset.format = csv_labels_last",
        f"run.name = {name}",
    ] + [f"{k} = {v}" for k, v in extra.items()]
    return "\n".join(lines) + "\n"


# -- config ---------------------------------------------------------------------


def test_parse_defaults_and_comments():
    cfg = parse_config("# header\ntopology.n = 30   # inline\n\nprivacy.epsilon = 8\n")
    assert cfg["topology.n"] == 30 and cfg["privacy.epsilon"] == 8.0
    assert cfg["topology.pool"] is None
    assert cfg.run_config().n == 30
    assert cfg.run_name == "FL_server_perturb-centralized_cnoise-eps8"


@pytest.mark.parametrize("text,match", [
    ("topology.colour = 3\n", "unknown config key"),
    ("topology.n = 3\ntopology.n = 4\n", "duplicate"),
    ("topology.n = many\n", "expects int"),
    ("topology.n\n", "key = value"),
    ("run.debug = maybe\n", "expects bool"),
    ("paradigm.output = clients+helper\n", "obliviousness"),
    ("run.repetitions = 0\n", "repetitions"),
])
def test_parse_errors(text, match):
    with pytest.raises(ValueError, match=match):
        parse_config(text)


def test_emit_is_a_fixed_point():
    cfg = parse_config("topology.pool = 1000\nnoise.multiplier = 0.73\nrun.debug = true\n")
    text = emit_config(cfg)
    assert len(text.splitlines()) == len(KEYS)
    assert emit_config(parse_config(text)) == text


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 500), st.floats(0.01, 50, allow_nan=False), st.one_of(st.none(), st.floats(0.1, 5)),
       st.booleans())
def test_config_round_trip_property(n, eps, mult, debug):
    cfg = parse_config(f"topology.n = {n}\nprivacy.epsilon = {eps!r}\nnoise.multiplier = {mult}\nrun.debug = {debug}\n")
    once = parse_config(emit_config(cfg))
    assert once.values == cfg.values
    assert emit_config(once) == emit_config(cfg)


def test_relative_paths_resolve_against_config(tmp_path, csv_toy):
    sub = tmp_path / "configs"
    sub.mkdir()
    (sub / "a.conf").write_text(toy_config("../toy.csv"))
    cfg = load_config(sub / "a.conf")
    assert Path(cfg.resolve("dataset.path")).resolve() == csv_toy.resolve()


# -- datasets ----------------------------------------------------------------


def test_mnist_subset_shape():
    data = load_dataset(MNIST / "images-idx3-ubyte.gz", "idx_pair", MNIST / "labels-idx1-ubyte.gz")
    assert data.shape == (10_000, 784)
    assert set(np.unique(data.y)) == set(range(10))
    assert 0.0 <= data.x.min() and data.x.max() <= 1.0


def test_idx_round_trip_plain_and_gzip(tmp_path):
    img = np.arange(2 * 3 * 4, dtype=np.uint8).reshape(2, 3, 4)
    (tmp_path / "a.idx").write_bytes(idx_bytes(img))
    (tmp_path / "a.idx.gz").write_bytes(gzip.compress(idx_bytes(img)))
    np.testing.assert_array_equal(read_idx(tmp_path / "a.idx"), img)
    np.testing.assert_array_equal(read_idx(tmp_path / "a.idx.gz"), img)


def test_idx_errors_name_the_offset(tmp_path):
    img = np.zeros((4, 2, 2), dtype=np.uint8)
    blob = idx_bytes(img)
    (tmp_path / "short").write_bytes(blob[:-3])
    with pytest.raises(DatasetError, match="truncated data at byte offset 29"):
        read_idx(tmp_path / "short")
    (tmp_path / "head").write_bytes(blob[:6])
    with pytest.raises(DatasetError, match="truncated header at byte offset 6"):
        read_idx(tmp_path / "head")
    (tmp_path / "magic").write_bytes(b"\x01\x02" + blob[2:])
    with pytest.raises(DatasetError, match="bad idx magic"):
        read_idx(tmp_path / "magic")
    (tmp_path / "tail").write_bytes(blob + b"\x00\x00")
    with pytest.raises(DatasetError, match="2 trailing bytes"):
        read_idx(tmp_path / "tail")


def test_idx_pair_dimension_mismatch(tmp_path):
    (tmp_path / "x").write_bytes(idx_bytes(np.zeros((3, 2, 2), dtype=np.uint8)))
    (tmp_path / "y").write_bytes(idx_bytes(np.zeros(4, dtype=np.uint8)))
    with pytest.raises(DatasetError, match="dimension mismatch"):
        load_dataset(tmp_path / "x", "idx_pair", tmp_path / "y")
    with pytest.raises(DatasetError, match="labels file"):
        load_dataset(tmp_path / "x", "idx_pair")
    with pytest.raises(DatasetError, match="unknown dataset format"):
        load_dataset(tmp_path / "x", "parquet")


def test_csv_loading(tmp_path):
    (tmp_path / "t.csv").write_text("1,2,cat\n3,4,dog\n5,6,cat\n")
    data = load_dataset(tmp_path / "t.csv", "csv_labels_last")
    assert data.shape == (3, 2)
    assert data.label_names == ("cat", "dog")
    np.testing.assert_array_equal(data.y, [0, 1, 0])
    assert data.x.min() == 0.0 and data.x.max() == 1.0
    (tmp_path / "r.csv").write_text("1,2,0\n3,0\n")
    with pytest.raises(DatasetError, match="ragged csv, line 2"):
        load_dataset(tmp_path / "r.csv", "csv_labels_last")
    (tmp_path / "n.csv").write_text("1,x,0\n")
    with pytest.raises(DatasetError, match="non-numeric"):
        load_dataset(tmp_path / "n.csv", "csv_labels_last")


# -- runs and reports -----------------------------------------------------------


def test_run_experiment_writes_outputs(tmp_path, csv_toy):
    cfg = parse_config(toy_config(csv_toy, **{"run.repetitions": 2}))
    paths = run_experiment(cfg, out=tmp_path / "out")
    names = sorted(p.name for p in paths)
    assert names == sorted(f"toy-seed{s}.{ext}" for s in (0, 1) for ext in ("metrics.csv", "trace.csv", "config"))
    rows = list(csv.reader(open(tmp_path / "out" / "toy-seed1.metrics.csv")))
    assert tuple(rows[0]) == METRICS_HEADER and len(rows) == 3
    resolved = parse_config((tmp_path / "out" / "toy-seed1.config").read_text())
    assert resolved["run.seed"] == 1 and resolved["run.repetitions"] == 1


def test_same_seed_gives_identical_files(tmp_path, csv_toy):
    cfg = parse_config(toy_config(csv_toy))
    a = run_experiment(cfg, out=tmp_path / "a", seed=5)
    b = run_experiment(cfg, out=tmp_path / "b", seed=5)
    for pa, pb in zip(a, b):
        assert pa.read_bytes() == pb.read_bytes()


def test_output_dir_precedence(tmp_path, monkeypatch):
    cfg = parse_config(f"run.out = {tmp_path / 'conf'}\n")
    assert output_dir(cfg) == tmp_path / "conf"
    monkeypatch.setenv(OUT_ENV, str(tmp_path / "env"))
    assert output_dir(cfg) == tmp_path / "env"
    assert output_dir(cfg, tmp_path / "flag") == tmp_path / "flag"


def test_report_groups_and_flags(tmp_path, csv_toy):
    out = tmp_path / "runs"
    run_experiment(parse_config(toy_config(csv_toy, **{"run.repetitions": 3})), out=out)
    run_experiment(parse_config(toy_config(csv_toy, "toy8", **{"privacy.epsilon": 8})), out=out)
    rows = list(csv.reader(report(out).splitlines()))
    assert tuple(rows[0]) == REPORT_HEADER
    by_eps = {r[2]: r for r in rows[1:]}
    assert by_eps["3"][3] == "3" and by_eps["3"][5] != "" and by_eps["3"][6] == ""
    assert by_eps["8"][3] == "1" and by_eps["8"][5] == "" and by_eps["8"][6] == "single_run"


def test_report_errors(tmp_path):
    with pytest.raises(ValueError, match="no metrics files"):
        report(tmp_path)
    with pytest.raises(ValueError, match="not a directory"):
        report(tmp_path / "missing")


def test_main_run_and_report(tmp_path, csv_toy, capsys, monkeypatch):
    conf = tmp_path / "toy.conf"
    conf.write_text(toy_config(csv_toy))
    monkeypatch.setenv(OUT_ENV, str(tmp_path / "env_out"))
    assert main(["run", str(conf), "--seed", "3"]) == 0
    assert (tmp_path / "env_out" / "toy-seed3.metrics.csv").exists()
    assert main(["run", str(conf), "--out", str(tmp_path / "flag_out")]) == 0
    assert (tmp_path / "flag_out" / "toy-seed0.trace.csv").exists()
    capsys.readouterr()
    assert main(["report", str(tmp_path / "env_out")]) == 0
    assert capsys.readouterr().out.startswith(",".join(REPORT_HEADER))


def test_main_errors_are_json(tmp_path, capsys):
    bad = tmp_path / "bad.conf"
    bad.write_text("topology.n = 0\n")
    assert main(["run", str(bad)]) == 1
    record = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert record["error"] == "ValueError" and record["command"] == "run"
    assert main(["report", str(tmp_path)]) == 1
    assert "no metrics files" in json.loads(capsys.readouterr().err)["message"]


def test_shipped_config_parses():
    cfg = load_config(ROOT / "configs" / "fl_cnoise_mnist.conf")
    assert cfg.run_config().pool == 1000
    assert Path(cfg.resolve("dataset.path")).exists()


def test_epsilon_sweep_accuracy_nondecreasing(tmp_path):
    base = load_config(ROOT / "configs" / "fl_cnoise_mnist.conf").with_(run__repetitions=1)
    out = tmp_path / "sweep"
    for eps in (1.0, 3.0, 8.0):
        run_experiment(base.with_(privacy__epsilon=eps), out=out)
    rows = list(csv.DictReader(report(out).splitlines()))
    acc = {float(r["epsilon"]): float(r["accuracy_mean"]) for r in rows}
    assert acc[1.0] <= acc[3.0] <= acc[8.0]
