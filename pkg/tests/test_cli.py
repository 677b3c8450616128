import pytest

from dmsanet.cli import DmsaCommandLine, main


@pytest.fixture(autouse=True)
def single_thread():
    yield
    from dmsanet.tensor import set_num_threads
    set_num_threads(1)


def test_help_lists_every_command(capsys):
    with pytest.raises(SystemExit) as info:
        main(["--help"])
    assert info.value.code == 0
    out = capsys.readouterr().out
    for name in ("describe", "forward", "gradcheck", "train-toy", "bench", "save-weights", "load-weights",
                 "inspect-weights"):
        assert name in out


def test_describe(config_dir, capsys):
    assert main(["describe", str(config_dir / "resnet50.json"), "--summary"]) == 0
    assert "total params: 25,557,032" in capsys.readouterr().out


def test_malformed_config_exits_with_config_code(write_config, capsys):
    path = write_config('{\n  "depht": 50\n}')
    assert main(["describe", path]) == 2
    err = capsys.readouterr().err
    assert "line 2" in err and "depht" in err


def test_forward_output_is_reproducible(toy_config, capsys):
    assert main(["forward", toy_config, "--seed", "7", "--stats"]) == 0
    first = capsys.readouterr().out
    assert main(["forward", toy_config, "--seed", "7", "--stats"]) == 0
    assert capsys.readouterr().out == first
    assert "logits: 1x2" in first


def test_forward_reproducible_across_thread_counts(toy_config, capsys):
    assert main(["--threads", "1", "forward", toy_config, "--seed", "3"]) == 0
    serial = capsys.readouterr().out
    assert main(["--threads", "4", "forward", toy_config, "--seed", "3"]) == 0
    assert capsys.readouterr().out == serial


def test_invalid_thread_count(toy_config):
    assert main(["--threads", "0", "forward", toy_config]) == 2


def test_gradcheck_exit_codes(capsys):
    assert main(["--quiet", "gradcheck", "--scope", "op"]) == 0
    assert "PASS" in capsys.readouterr().out
    assert main(["--quiet", "gradcheck", "--scope", "op", "--corrupt", "softmax.x"]) == 1
    captured = capsys.readouterr()
    assert "softmax.x" in captured.err
    assert "FAIL" in captured.out


def test_gradcheck_seeds_and_variants(toy_config):
    assert main(["--quiet", "gradcheck", "--config", toy_config, "--scope", "block",
                 "--seeds", "0", "1", "--variants", "origin", "wo_fc"]) == 0


def test_bench_single_iteration(toy_config, capsys):
    assert main(["bench", toy_config, "--iters", "1", "--warmup", "0"]) == 0
    out = capsys.readouterr().out
    assert out.count("iter ") == 1
    assert "median" in out


def test_train_toy_unwritable_out(toy_config, tmp_path):
    assert main(["train-toy", toy_config, "--out", str(tmp_path / "nope" / "c.csv"), "--epochs", "1"]) == 4


def test_weight_commands(toy_config, write_config, tmp_path, capsys):
    path = str(tmp_path / "toy.dmsw")
    assert main(["save-weights", toy_config, path, "--seed", "2"]) == 0
    assert main(["load-weights", toy_config, path]) == 0
    capsys.readouterr()
    assert main(["inspect-weights", path]) == 0
    assert "stem.conv.weight" in capsys.readouterr().out

    other = write_config({"depth": "toy", "width": 24, "dmsa": {"splits": 2, "sa_groups": 2, "reduction": 4}})
    assert main(["load-weights", other, path]) == 3


def test_unknown_tool_is_reported():
    result = DmsaCommandLine()._execute_tool("nope", {})
    assert result["exit_code"] == 2
