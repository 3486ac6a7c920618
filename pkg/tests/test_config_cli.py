import json
import time

import pytest

from smolrgpt.cli import main
from smolrgpt.config import RunConfig, dump_config, load_config
from smolrgpt.data_ingest import load_dataset
from smolrgpt.errors import ConfigError


def write_cfg(path, **overrides):
    d = RunConfig().to_dict()
    for key, value in overrides.items():
        node = d
        *parents, leaf = key.split(".")
        for p in parents:
            node = node[p]
        node[leaf] = value
    path.write_text(json.dumps(d))
    return path


BROKEN = {
    "patch does not divide image": {"model.encoder.patch": 5},
    "shuffle does not divide grid": {"model.shuffle_factor": 3},
    "heads do not divide width": {"model.lm.n_heads": 5},
    "refiner overshoots masks": {"model.refiner_layers": 4},
    "too many image tokens": {"model.lm.max_seq": 8},
    "unknown dtype": {"model.dtype": "float16"},
    "canvas differs from image": {"synth.canvas": [16, 16]},
    "unknown category": {"synth.categories": ["colour"]},
    "zero steps": {"stages": [{"steps": 0}, {}, {}]},
    "two stages": {"stages": [{}, {}]},
    "negative lr": {"stages": [{"base_lr": -1.0}, {}, {}]},
    "warmup out of range": {"stages": [{"warmup_frac": 1.0}, {}, {}]},
    "unknown stage key": {"stages": [{"momentum": 0.9}, {}, {}]},
    "wrong schema": {"schema_version": 99},
    "unknown model key": {"model.width": 3},
    "zero synth samples": {"synth.n_samples": 0},
}


@pytest.mark.parametrize("overrides", BROKEN.values(), ids=BROKEN.keys())
def test_broken_config_matrix(tmp_path, overrides, capsys):
    path = write_cfg(tmp_path / "c.json", **overrides)
    with pytest.raises(ConfigError):
        load_config(path)
    assert main(["synth", "--config", str(path), "--out", str(tmp_path / "d.jsonl")]) == 1
    assert "error:" in capsys.readouterr().err


def test_unknown_top_level_key(tmp_path):
    d = RunConfig().to_dict()
    d["extra"] = 1
    (tmp_path / "c.json").write_text(json.dumps(d))
    with pytest.raises(ConfigError):
        load_config(tmp_path / "c.json")


def test_config_round_trip(tmp_path):
    cfg = RunConfig().with_seed(3).with_steps((4, 5, 6))
    (tmp_path / "c.json").write_text(dump_config(cfg))
    assert load_config(tmp_path / "c.json") == cfg


def test_shipped_configs_load():
    from pathlib import Path

    root = Path(__file__).resolve().parents[1] / "configs"
    for path in sorted(root.glob("*.json")):
        load_config(path)


class TestSynth:
    def test_deterministic_bytes(self, tmp_path, capsys):
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        assert main(["synth", "--n", "10", "--seed", "7", "--out", str(a)]) == 0
        assert main(["synth", "--n", "10", "--seed", "7", "--out", str(b)]) == 0
        assert a.read_bytes() == b.read_bytes()
        assert len(load_dataset(a)) == 10
        assert "left_right" in capsys.readouterr().out

    def test_zero_samples_is_usage_error(self, tmp_path):
        assert main(["synth", "--n", "0", "--out", str(tmp_path / "x.jsonl")]) == 1

    def test_category_filter(self, tmp_path):
        out = tmp_path / "c.jsonl"
        assert main(["synth", "--n", "5", "--categories", "count", "--out", str(out)]) == 0
        assert {s.category.value for s in load_dataset(out)} == {"count"}

    def test_bad_flag(self):
        assert main(["synth", "--bogus"]) == 1


@pytest.fixture(scope="module")
def setup(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    data = root / "train.jsonl"
    assert main(["synth", "--n", "8", "--out", str(data)]) == 0
    cfg = write_cfg(root / "c.json", **{"data.train": "train.jsonl", "data.eval": "train.jsonl", "out_dir": str(root / "out")})
    return root, cfg, data


class TestTrain:
    def test_smoke_under_a_minute(self, setup, tmp_path, capsys):
        _, cfg, _ = setup
        t0 = time.perf_counter()
        assert main(["train", "--config", str(cfg), "--steps", "1,1,1", "--out", str(tmp_path)]) == 0
        assert time.perf_counter() - t0 < 60
        for name in ("stage1.ckpt", "stage2.ckpt", "stage3.ckpt", "train_report.json", "loss_curve.csv", "config.json"):
            assert (tmp_path / name).exists(), name
        rows = (tmp_path / "loss_curve.csv").read_text().splitlines()
        assert rows[0] == "global_step,stage,step,loss,lr" and len(rows) == 4
        assert "stage 3" in capsys.readouterr().out

    def test_same_seed_identical_checkpoints(self, setup, tmp_path):
        _, cfg, _ = setup
        for name in ("a", "b"):
            assert main(["train", "--config", str(cfg), "--steps", "2", "--seed", "5", "--out", str(tmp_path / name)]) == 0
        assert (tmp_path / "a" / "stage3.ckpt").read_bytes() == (tmp_path / "b" / "stage3.ckpt").read_bytes()

    def test_missing_dataset_names_stage(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path / "c.json", **{"data.train": ["nope1.jsonl", "nope2.jsonl", "nope3.jsonl"]})
        assert main(["train", "--config", str(cfg), "--steps", "1", "--out", str(tmp_path)]) == 2
        assert "stage 1" in capsys.readouterr().err

    def test_single_stage_from_checkpoint(self, setup, tmp_path):
        _, cfg, _ = setup
        assert main(["train", "--config", str(cfg), "--steps", "1", "--stage", "1", "--out", str(tmp_path / "s1")]) == 0
        ckpt = tmp_path / "s1" / "stage1.ckpt"
        assert main(["train", "--config", str(cfg), "--steps", "1", "--stage", "2", "--checkpoint", str(ckpt), "--out", str(tmp_path / "s2")]) == 0
        assert (tmp_path / "s2" / "stage2.ckpt").exists()


@pytest.fixture(scope="module")
def ckpt(setup, tmp_path_factory):
    _, cfg, _ = setup
    out = tmp_path_factory.mktemp("ck")
    assert main(["train", "--config", str(cfg), "--steps", "1", "--out", str(out)]) == 0
    return out / "stage3.ckpt"


class TestEvalGenerate:
    def test_untrained_eval_completes_and_report_rebuilds(self, setup, ckpt, tmp_path, capsys):
        from smolrgpt.evaluator import read_trace, report_from_trace, write_report

        _, cfg, data = setup
        assert main(["eval", "--config", str(cfg), "--checkpoint", str(ckpt), "--data", str(data), "--out", str(tmp_path)]) == 0
        assert "aggregate" in capsys.readouterr().out
        rebuilt = report_from_trace(read_trace(tmp_path / "trace.jsonl"))
        write_report(rebuilt, tmp_path, stem="rebuilt")
        assert (tmp_path / "rebuilt.txt").read_bytes() == (tmp_path / "report.txt").read_bytes()
        assert (tmp_path / "rebuilt.json").read_bytes() == (tmp_path / "report.json").read_bytes()

    def test_corrupt_checkpoint(self, setup, tmp_path):
        _, cfg, data = setup
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"not a zip")
        assert main(["eval", "--config", str(cfg), "--checkpoint", str(bad), "--data", str(data), "--out", str(tmp_path)]) == 2

    def test_generate_one_sample(self, setup, ckpt, tmp_path, capsys):
        _, _, data = setup
        one = tmp_path / "one.jsonl"
        one.write_text(data.read_text().splitlines()[0] + "\n")
        outs = []
        for _ in range(2):
            assert main(["generate", "--checkpoint", str(ckpt), "--data", str(one)]) == 0
            outs.append(capsys.readouterr().out)
        assert len(outs[0].splitlines()) == 2 and outs[0] == outs[1]

    def test_generate_missing_depth(self, setup, ckpt, tmp_path, capsys):
        _, _, data = setup
        rec = json.loads(data.read_text().splitlines()[0])
        rec["depth"] = None
        rec["id"] = "no-depth-7"
        path = tmp_path / "nd.jsonl"
        path.write_text(json.dumps(rec) + "\n")
        assert main(["generate", "--checkpoint", str(ckpt), "--data", str(path)]) == 2
        assert "no-depth-7" in capsys.readouterr().err
