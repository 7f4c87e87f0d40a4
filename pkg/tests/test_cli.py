import numpy as np
import pytest

from sepgnet.cli import main
from sepgnet.data import load_dataset


@pytest.fixture()
def data_file(tmp_path):
    path = tmp_path / "toy.bin"
    code = main(
        [
            "gen-data",
            "--set", "gen_modalities=a:3:spectral_smooth:0.0,b:3:elevation_like:0.0",
            "--set", "gen_classes=3",
            "--set", "gen_size=32",
            "--set", "gen_region=8",
            "--set", "gen_seed=13",
            "--set", "gen_fusion=separable",
            "-o", str(path),
        ]
    )
    assert code == 0
    return path


@pytest.fixture()
def fast_config(tmp_path):
    cfg = tmp_path / "fast.cfg"
    cfg.write_text(
        "\n".join(
            [
                "family=resnet18",
                "width_scale=1/8",
                "strategy=dgconv",
                "epochs=1",
                "batch_size=32",
                "seeds=42",
                "patch_size=5",
                "max_train_per_class=8",
                "max_test_per_class=8",
                "figures=false",
            ]
        )
        + "\n"
    )
    return cfg


def test_gen_data_round_trip(data_file):
    ds = load_dataset(data_file)
    assert ds.num_classes == 3
    assert ds.channels == 6
    assert data_file.with_suffix(".manifest").exists()


def test_train_layout_and_summary(tmp_path, data_file, fast_config):
    out = tmp_path / "run"
    code = main(["train", "-c", str(fast_config), "--data", str(data_file), "-o", str(out)])
    assert code == 0
    assert (out / "summary.csv").exists()
    assert (out / "metadata.txt").exists()
    cell = out / "model" / "42"
    assert (cell / "log.csv").exists()
    assert (cell / "checkpoint.bin").exists()
    assert (cell / "masks").is_dir()
    lines = (out / "summary.csv").read_text().splitlines()
    assert lines[0] == "seed,oa,aa,kappa"
    assert lines[1].startswith("42,")
    assert lines[-2].startswith("mean,")
    assert lines[-1].startswith("std,")


def test_train_renders_figures_by_default(tmp_path, data_file, fast_config):
    text = fast_config.read_text().replace("figures=false", "figures=true")
    cfg = tmp_path / "fig.cfg"
    cfg.write_text(text)
    out = tmp_path / "run_fig"
    assert main(["train", "-c", str(cfg), "--data", str(data_file), "-o", str(out)]) == 0
    assert (out / "training_curves.png").exists()


def test_evaluate_checkpoint(tmp_path, data_file, fast_config):
    run_dir = tmp_path / "run"
    main(["train", "-c", str(fast_config), "--data", str(data_file), "-o", str(run_dir)])
    out = tmp_path / "eval"
    code = main(
        [
            "evaluate",
            "-c", str(fast_config),
            "--data", str(data_file),
            "--checkpoint", str(run_dir / "model" / "42" / "checkpoint.bin"),
            "-o", str(out),
        ]
    )
    assert code == 0
    lines = (out / "metrics.csv").read_text().splitlines()
    assert lines[0] == "metric,value"
    assert any(ln.startswith("oa,") for ln in lines)
    assert any(ln.startswith("kappa,") for ln in lines)


def test_report_groups_matches_library(tmp_path, data_file, fast_config):
    run_dir = tmp_path / "run"
    main(["train", "-c", str(fast_config), "--data", str(data_file), "-o", str(run_dir)])
    out = tmp_path / "groups"
    code = main(
        [
            "report-groups",
            "-c", str(fast_config),
            "--data", str(data_file),
            "--checkpoint", str(run_dir / "model" / "42" / "checkpoint.bin"),
            "-o", str(out),
        ]
    )
    assert code == 0
    lines = (out / "groups.csv").read_text().splitlines()
    assert lines[0] == "block,layer,groups,sparsity"
    assert len(lines) > 1
    assert list((out / "masks").glob("*.txt"))

    from sepgnet.architectures import build, group_structure_report
    from sepgnet.data import load_dataset
    from sepgnet.harness import load_checkpoint, resolve_setup
    from sepgnet.configfile import read_config

    setup = resolve_setup(read_config(fast_config), load_dataset(data_file))
    net = build(setup.arch_spec())
    load_checkpoint(net, run_dir / "model" / "42" / "checkpoint.bin")
    records = group_structure_report(net)
    assert len(lines) - 1 == len(records)
    for line, record in zip(lines[1:], records):
        block, layer, groups, sparsity = line.split(",")
        assert block == record.block
        assert int(layer) == record.layer_index
        assert int(groups) == record.groups
        assert float(sparsity) == pytest.approx(record.sparsity)


def test_report_groups_warns_on_unmasked(tmp_path, data_file, capsys):
    out = tmp_path / "nogroups"
    code = main(
        [
            "report-groups",
            "--set", "strategy=regular",
            "--set", "width_scale=1/8",
            "--data", str(data_file),
            "-o", str(out),
        ]
    )
    assert code == 0
    assert "no masked layers" in capsys.readouterr().err


def test_ablate_both_directions(tmp_path, data_file, fast_config):
    text = fast_config.read_text().replace("epochs=1", "epochs=0")
    cfg = tmp_path / "abl.cfg"
    cfg.write_text(text)
    out = tmp_path / "ablation"
    code = main(
        [
            "ablate",
            "-c", str(cfg),
            "--data", str(data_file),
            "--direction", "both",
            "-o", str(out),
        ]
    )
    assert code == 0
    lines = (out / "summary.csv").read_text().splitlines()
    assert lines[0].startswith("direction,steps,block,mean_oa,std_oa,params_")
    directions = [ln.split(",")[0] for ln in lines[1:]]
    assert directions.count("forward") == 5
    assert directions.count("backward") == 5


def test_compare_requires_strategies(tmp_path, data_file, fast_config):
    out = tmp_path / "cmp"
    code = main(
        ["compare", "-c", str(fast_config), "--data", str(data_file), "-o", str(out)]
    )
    assert code == 2


def test_compare_runs_strategies(tmp_path, data_file, fast_config):
    text = fast_config.read_text().replace("epochs=1", "epochs=0")
    cfg = tmp_path / "cmp.cfg"
    cfg.write_text(text)
    out = tmp_path / "cmp"
    code = main(
        [
            "compare",
            "-c", str(cfg),
            "--data", str(data_file),
            "--strategies", "baseline,sepdgconv",
            "-o", str(out),
        ]
    )
    assert code == 0
    lines = (out / "summary.csv").read_text().splitlines()
    assert lines[0] == "strategy,mean_oa,std_oa,detail"
    assert lines[1].startswith("baseline,")
    assert lines[2].startswith("sepdgconv,")


def test_unknown_config_key_is_usage_error(tmp_path, data_file):
    out = tmp_path / "x"
    code = main(
        [
            "train",
            "--set", "learning_rate=0.1",
            "--data", str(data_file),
            "-o", str(out),
        ]
    )
    assert code == 2


def test_unknown_flag_is_usage_error(data_file):
    with pytest.raises(SystemExit) as err:
        main(["train", "--data", str(data_file), "--bogus", "-o", "x"])
    assert err.value.code == 2


def test_missing_data_file_is_runtime_error(tmp_path, fast_config):
    code = main(
        [
            "train",
            "-c", str(fast_config),
            "--data", str(tmp_path / "missing.bin"),
            "-o", str(tmp_path / "out"),
        ]
    )
    assert code == 1
