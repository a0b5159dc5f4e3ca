import json

import pytest
from conftest import ENGINEERED, engineered_params

from syrenets.cli import main, read_config_file
from syrenets.params import save_checkpoint

SMALL_ARCH = "n_layers=2\nn_heads=2\nlatent_dim=3\nselection_hidden=4\nae_hidden=6\n"


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    assert main(["gen-data", "--count", "200", "--test-count", "40", "--seed", "3", "--out", str(d)]) == 0
    return d


@pytest.fixture
def small_cfg(tmp_path):
    path = tmp_path / "small.cfg"
    path.write_text("# tiny network\n" + SMALL_ARCH + "mlp_hidden=8,8\n")
    return path


def engineered_checkpoint(path):
    header = {"kind": "syrenets", "mode": "indirect", "seed": 0,
              **{f"arch.{k}": v for k, v in ENGINEERED.as_dict().items()}}
    save_checkpoint(path, engineered_params(), header)
    return path


def test_gen_data_counts_and_determinism(data_dir, tmp_path, capsys):
    train = (data_dir / "train.csv").read_text().splitlines()
    assert len(train) == 201 and len((data_dir / "test.csv").read_text().splitlines()) == 41
    assert main(["gen-data", "--count", "200", "--test-count", "40", "--seed", "3", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "train.csv").read_bytes() == (data_dir / "train.csv").read_bytes()
    assert (tmp_path / "test.csv").read_bytes() == (data_dir / "test.csv").read_bytes()
    assert json.loads((tmp_path / "manifest.json").read_text())["config"]["count"] == "200"
    assert "train: 200 rows" in capsys.readouterr().out


def test_gen_data_unwritable_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["gen-data", "--count", "2", "--out", str(blocker / "sub")]) == 2


def test_config_file_parsing(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("# comment\nlr = 0.01  # inline\n\nsteps=5\n")
    assert read_config_file(path) == {"lr": "0.01", "steps": "5"}


def test_train_syrenets_writes_artifacts(data_dir, small_cfg, tmp_path):
    out = tmp_path / "run"
    args = ["train", "syrenets", "--mode", "indirect", "--steps", "10", "--seed", "1",
            "--config", str(small_cfg), "--data", str(data_dir), "--out", str(out)]
    assert main(args) == 0
    rows = (out / "metrics.csv").read_text().splitlines()
    assert rows[0] == "step,elapsed_s,lr,total,basic,ae,entropy,xent,best_total" and len(rows) == 11
    eq = (out / "equation.txt").read_text()
    assert eq.startswith("# argmax\n") and "# soft\n" in eq
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["n_heads"] == "2" and manifest["config"]["steps"] == "10"
    report = json.loads((out / "report.json").read_text())
    assert report["steps_run"] == 10
    assert main(["eval", str(out / "checkpoint.txt"), "--data", str(data_dir)]) == 0


def test_train_rerun_is_byte_identical(data_dir, small_cfg, tmp_path):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["train", "nn", "--mode", "direct", "--steps", "15", "--config", str(small_cfg),
                     "--data", str(data_dir), "--out", str(out)]) == 0
        outs.append(out)
    for f in ("metrics.csv", "checkpoint.txt", "report.json"):
        assert (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes()


def test_flags_override_config_file(data_dir, tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("steps=50\nseed=9\n")
    out = tmp_path / "run"
    assert main(["train", "sysid", "--config", str(cfg), "--steps", "4", "--data", str(data_dir),
                 "--out", str(out)]) == 0
    resolved = json.loads((out / "manifest.json").read_text())["config"]
    assert resolved["steps"] == "4" and resolved["seed"] == "9"
    assert len((out / "metrics.csv").read_text().splitlines()) == 5


@pytest.mark.parametrize("argv", [
    ["train", "perceptron"],
    ["train", "nn", "--mode", "sideways"],
    ["frobnicate"],
])
def test_usage_errors_exit_2(argv, data_dir):
    assert main(argv + ["--data", str(data_dir)] if argv[0] == "train" else argv) == 2


def test_bad_config_value_exit_2(data_dir, tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("lambda2=-1\n")
    assert main(["train", "syrenets", "--config", str(cfg), "--data", str(data_dir), "--out", str(tmp_path)]) == 2
    cfg.write_text("steps=many\n")
    assert main(["train", "sysid", "--config", str(cfg), "--data", str(data_dir), "--out", str(tmp_path)]) == 2


def test_missing_dataset_exit_2(tmp_path):
    assert main(["train", "sysid", "--steps", "1", "--data", str(tmp_path / "nope"), "--out", str(tmp_path)]) == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_blow_up_exits_3(data_dir, tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("lr=1e200\nmlp_hidden=4,4\n")
    out = tmp_path / "run"
    code = main(["train", "nn", "--mode", "direct", "--steps", "400", "--config", str(cfg),
                 "--data", str(data_dir), "--out", str(out)])
    assert code == 3
    assert (out / "checkpoint.txt").exists()


def test_extract_engineered_checkpoint(tmp_path, capsys):
    path = engineered_checkpoint(tmp_path / "ckpt.txt")
    assert main(["extract", str(path)]) == 0
    assert capsys.readouterr().out.strip() == "0.5*qd1*qd1"
    assert main(["extract", str(path), "--form", "layered"]) == 0
    assert capsys.readouterr().out.splitlines()[-1] == "f = h1_1"


def test_corrupt_checkpoint_names_block(tmp_path, capsys):
    path = engineered_checkpoint(tmp_path / "ckpt.txt")
    lines = path.read_text().splitlines()
    idx = next(i for i, line in enumerate(lines) if line.startswith("block layer0.scale"))
    lines[idx + 1] = lines[idx + 1].split(" ", 1)[1]
    path.write_text("\n".join(lines) + "\n")
    assert main(["extract", str(path)]) == 2
    assert "layer0.scale" in capsys.readouterr().err


def test_gradcheck_exit_0(small_cfg, capsys):
    assert main(["gradcheck", "syrenets", "--config", str(small_cfg), "--coords", "10"]) == 0
    assert "ok" in capsys.readouterr().out.splitlines()[-1]


def test_gradcheck_failure_exits_3(small_cfg):
    assert main(["gradcheck", "sysid", "--coords", "5", "--tol", "1e-300"]) == 3


def test_sweep_with_one_seed(data_dir, tmp_path):
    out = tmp_path / "sweep"
    assert main(["sweep", "sysid", "--seeds", "1", "--steps", "5", "--data", str(data_dir), "--out", str(out)]) == 0
    rows = (out / "summary.csv").read_text().splitlines()
    assert rows[0] == "method,group,split,mean,std,n"
    train_rows = [r.split(",") for r in rows[1:] if r.split(",")[2] == "train"]
    assert [r[1] for r in train_rows] == ["best", "5best", "all", "5worst"]
    assert len({tuple(r[3:]) for r in train_rows}) == 1
    assert (out / "seed0" / "metrics.csv").exists()
