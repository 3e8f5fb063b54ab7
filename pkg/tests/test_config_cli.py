import dataclasses
import math

import pytest

from crsfl.cli import main
from crsfl.config import HELP, ConfigError, ExperimentConfig, parse_config, parse_text

MINIMAL = """\
seed = 1
rounds = 4
clients = 3
dataset = synthetic
model = logreg
sampler = identity
"""


def write_cfg(tmp_path, text, name="exp.cfg"):
    path = tmp_path / name
    path.write_text(text)
    return path


def test_minimal_config_gets_defaults(tmp_path):
    cfg = parse_config(write_cfg(tmp_path, MINIMAL))
    assert (cfg.seed, cfg.rounds, cfg.clients) == (1, 4, 3)
    assert cfg.lr == 0.01 and cfg.lr_decay == 1e-4
    assert cfg.partition == "shards" and cfg.update_mode == "delta"


def test_table_hyperparameters_accepted():
    cfg = parse_text(MINIMAL + "lr = 0.01\nlr_decay = 1e-4\n")
    assert cfg.lr == 0.01 and cfg.lr_decay == 1e-4


def test_comments_and_blank_lines():
    cfg = parse_text("# header\n\n" + MINIMAL.replace("seed = 1", "seed = 1   # trailing"))
    assert cfg.seed == 1


@pytest.mark.parametrize("text, fragment", [
    (MINIMAL.replace("sampler = identity", "sampler = crs\nK = 2"), "epsilon"),
    (MINIMAL + "learning_rate = 0.1\n", "unknown key 'learning_rate'"),
    (MINIMAL + "lr = fast\n", "'lr'"),
    (MINIMAL.replace("rounds = 4\n", ""), "'rounds'"),
    (MINIMAL + "seed = 2\n", "duplicate"),
    (MINIMAL + "this line has no equals\n", "key = value"),
    (MINIMAL.replace("logreg", "resnet"), "model"),
    (MINIMAL + "rounds_typo = 3\n", "rounds_typo"),
])
def test_config_errors_name_the_problem(text, fragment):
    with pytest.raises(ConfigError, match=fragment):
        parse_text(text, "exp.cfg")


def test_error_carries_line_number():
    with pytest.raises(ConfigError, match=r"exp.cfg:7"):
        parse_text(MINIMAL + "bogus = 1\n", "exp.cfg")


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        parse_config(tmp_path / "nope.cfg")


def test_every_documented_key_round_trips():
    fields = {f.name for f in dataclasses.fields(ExperimentConfig)}
    assert set(HELP) == fields
    cfg = ExperimentConfig(
        seed=2**63 - 1, rounds=7, clients=5, dataset="idx", model="mlp", sampler="crs",
        n_samples=123, n_features=9, n_classes=3, class_sep=0.1 + 0.2,
        idx_images="/data/img.idx", idx_labels="/data/lab.idx", test_fraction=0.25,
        partition="dirichlet", shards_per_client=3, dirichlet_beta=0.3, min_samples=4,
        hidden=11, K=13, sampling_ratio=0.07, p=0.5, epsilon=math.pi / 3, feedback=False,
        crs_scaling="fixed", laplace_scale=1e-5, lr=0.02, lr_decay=3e-4, local_batch=16,
        local_steps=2, update_mode="plain", eval_every=3, output="out.csv",
    )
    assert parse_text(cfg.to_text()) == cfg
    assert set(line.split(" = ")[0] for line in cfg.to_text().splitlines()) == fields


# -- command line ------------------------------------------------------------

def crs_config(tmp_path, extra=""):
    text = MINIMAL.replace("sampler = identity", "sampler = crs\nepsilon = 1.0\nK = 3") + "lr = 0.5\n" + extra
    return write_cfg(tmp_path, text)


def test_run_writes_csv_and_summary(tmp_path, capsys):
    out = tmp_path / "o" / "run.csv"
    assert main(["run", str(crs_config(tmp_path)), "--out", str(out)]) == 0
    assert out.exists() and len(out.read_text().splitlines()) == 5
    line = capsys.readouterr().out.strip()
    assert "final_accuracy=" in line and "OT=" in line and "acc_per_ot=" in line


def test_run_twice_is_byte_identical(tmp_path):
    cfg = crs_config(tmp_path)
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main(["run", str(cfg), "--out", str(a)]) == 0
    assert main(["run", str(cfg), "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_run_uses_output_key(tmp_path):
    out = tmp_path / "from_cfg.csv"
    assert main(["run", str(write_cfg(tmp_path, MINIMAL + f"output = {out}\n"))]) == 0
    assert out.exists()


def test_run_without_output_path_is_refused(tmp_path):
    assert main(["run", str(write_cfg(tmp_path, MINIMAL))]) == 1


@pytest.mark.parametrize("extra", ["p = 0.7\n", "K = 60\n"])
def test_run_refused_certificate_writes_nothing(tmp_path, capsys, extra):
    cfg = crs_config(tmp_path, extra).read_text()
    if extra.startswith("K"):
        cfg = cfg.replace("K = 3\n", "")
    path = write_cfg(tmp_path, cfg, "bad.cfg")
    out = tmp_path / "bad.csv"
    assert main(["run", str(path), "--out", str(out)]) == 1
    assert not out.exists()
    assert not list(tmp_path.glob("*.part"))
    assert "refused" in capsys.readouterr().err


def test_run_bad_config_exit_code(tmp_path):
    assert main(["run", str(write_cfg(tmp_path, MINIMAL + "bogus = 1\n")), "--out", str(tmp_path / "x.csv")]) == 1


def test_run_divergence_exit_code(tmp_path, capsys):
    path = write_cfg(tmp_path, MINIMAL.replace("logreg", "mlp").replace("rounds = 4", "rounds = 30")
                     + "lr = 2000\nclass_sep = 5\nn_samples = 400\n")
    out = tmp_path / "div.csv"
    assert main(["run", str(path), "--out", str(out)]) == 2
    assert not out.exists()
    assert "round" in capsys.readouterr().err


def test_run_help_lists_every_key(capsys):
    with pytest.raises(SystemExit) as info:
        main(["run", "--help"])
    assert info.value.code == 0
    text = capsys.readouterr().out
    for key in HELP:
        assert key in text


def test_privacy_p_max(capsys):
    assert main(["privacy", "--epsilon", "1.0", "--d", "1000"]) == 0
    out = capsys.readouterr().out
    assert "p_max     = 0.6321205588" in out


def test_privacy_k_max(capsys):
    assert main(["privacy", "--epsilon", "1.0", "--p", "0.5", "--d", "1000"]) == 0
    assert "K_max     = 816" in capsys.readouterr().out


def test_privacy_issued(capsys):
    assert main(["privacy", "--epsilon", "1.0", "--p", "0.5", "--K", "50", "--d", "1000"]) == 0
    out = capsys.readouterr().out
    delta = float(out.split("delta     = ")[1].split()[0])
    assert delta < 1e-3
    assert "certificate: issued" in out and "delta < 1/d: yes" in out


def test_privacy_refusals(capsys):
    assert main(["privacy", "--epsilon", "1.0", "--p", "0.7", "--d", "1000"]) == 1
    assert main(["privacy", "--epsilon", "1.0", "--p", "0.5", "--K", "900", "--d", "1000"]) == 1
    assert "K_max=816" in capsys.readouterr().out
    assert main(["privacy", "--epsilon", "-1", "--d", "10"]) == 1
    assert main(["privacy", "--epsilon", "1", "--d", "0"]) == 1


def test_privacy_missing_flag_is_usage_error():
    with pytest.raises(SystemExit) as info:
        main(["privacy", "--d", "10"])
    assert info.value.code == 1


def test_sweep_k_ratios(tmp_path):
    cfg = crs_config(tmp_path)
    out = tmp_path / "sweep"
    assert main(["sweep", str(cfg), "--key", "K", "--values", "0.07%,0.7%,7%,43%", "--out-dir", str(out)]) == 0
    assert len(list(out.glob("run_K=*.csv"))) == 4
    rows = (out / "summary.csv").read_text().splitlines()
    assert rows[0] == "K,status,final_accuracy,ot,acc_per_ot,error"
    assert len(rows) == 5 and all(",ok," in r for r in rows[1:])


def test_sweep_clients_records_failures_and_continues(tmp_path):
    cfg = write_cfg(tmp_path, MINIMAL.replace("sampler = identity", "sampler = topk\nK = 2")
                    + "n_samples = 200\n")
    out = tmp_path / "sw"
    # 500 clients cannot each get two shards of a 160-sample training set
    code = main(["sweep", str(cfg), "--key", "clients", "--values", "2,500,4", "--out-dir", str(out)])
    assert code != 0
    rows = (out / "summary.csv").read_text().splitlines()[1:]
    assert [r.split(",")[1] for r in rows] == ["ok", "failed", "ok"]


def test_sweep_epsilon(tmp_path):
    out = tmp_path / "eps"
    assert main(["sweep", str(crs_config(tmp_path)), "--key", "epsilon", "--values", "0.5,1.0",
                 "--out-dir", str(out)]) == 0
    assert (out / "run_epsilon=0.5.csv").exists()


def test_sweep_empty_values(tmp_path):
    assert main(["sweep", str(crs_config(tmp_path)), "--key", "K", "--values", "",
                 "--out-dir", str(tmp_path / "e")]) == 1


def test_sweep_rejects_unknown_key(tmp_path):
    with pytest.raises(SystemExit):
        main(["sweep", str(crs_config(tmp_path)), "--key", "lr", "--values", "1", "--out-dir", str(tmp_path)])
