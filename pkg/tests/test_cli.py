import json
import os

import pytest

from recflow import cli
from recflow import corpus as cp
from recflow import synthetic as syn
from recflow.config import ConfigError, RunConfig


@pytest.fixture(scope="session")
def world_files(tmp_path_factory):
    root = tmp_path_factory.mktemp("world")
    world = syn.make_world(seed=5, num_clusters=2, items_per_cluster=6,
                           actors_per_cluster=4, directors_per_cluster=2,
                           num_dialogues=60)
    return syn.write_world(world, str(root))


def fast_config(world_files, out_dir, **extra):
    cfg = {
        "kg_path": world_files["kg"],
        "types_path": world_files["types"],
        "dialogues_path": world_files["train"],
        "val_path": world_files["val"],
        "test_path": world_files["test"],
        "out_dir": str(out_dir),
        "d_e": 16, "rgcn_bases": 4,
        "flm_d_model": 16, "flm_layers": 1, "flm_heads": 2, "flm_ff_mult": 2,
        "min_support": 2, "rec_steps": 120, "rec_batch": 32,
        "flm_epochs": 1, "flm_batch": 8, "pseudo_ratio": 1, "clf_steps": 50,
        "courses": 2, "rollouts": 2, "edit_steps": 1, "pairs_per_course": 2,
        "sims_per_pair": 1, "course_rec_steps": 10, "n_simulate": 5,
        "sweep_rho": [0.1], "sweep_delta": [0.9], "sweep_mix": [1.0],
        "seed": 11,
    }
    cfg.update(extra)
    return cfg


def write_config(tmp_path, cfg, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return str(path)


def read_manifest(out_dir):
    with open(os.path.join(out_dir, "manifest.json")) as fh:
        return json.load(fh)


def test_config_rejects_unknown_keys():
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"not_a_real_field": 1})


def test_config_validates_ranges():
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"delta": 1.5})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"rollouts": 0})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"precision": "f16"})


def test_cli_unknown_key_exits_2(tmp_path, world_files):
    cfg_path = write_config(tmp_path,
                            fast_config(world_files, tmp_path / "out"))
    code = cli.main(["mine-schemas", "--config", cfg_path,
                     "--set", "bogus_key=1"])
    assert code == 2


def test_cli_missing_file_exits_3(tmp_path, world_files):
    cfg = fast_config(world_files, tmp_path / "out",
                      kg_path=str(tmp_path / "missing.tsv"))
    code = cli.main(["mine-schemas", "--config",
                     write_config(tmp_path, cfg)])
    assert code == 3


def test_mine_schemas_single_flow_fixture(tmp_path, world_files):
    # one-dialogue corpus -> catalog with exactly its schema
    d = cp.load_dialogues_file(world_files["train"])[0]
    solo = tmp_path / "solo.jsonl"
    cp.save_dialogues(solo, [d])
    cfg = fast_config(world_files, tmp_path / "out",
                      dialogues_path=str(solo), min_support=1)
    assert cli.main(["mine-schemas", "--config",
                     write_config(tmp_path, cfg)]) == 0
    with open(tmp_path / "out" / "catalog.json") as fh:
        catalog = json.load(fh)
    assert len(catalog) == 1
    assert catalog[0]["support"] == 1


def test_ingest_writes_expected_artifacts(tmp_path, world_files):
    cfg = fast_config(world_files, tmp_path / "out")
    assert cli.main(["ingest", "--config", write_config(tmp_path, cfg)]) == 0
    out = tmp_path / "out"
    for name in ("flows.jsonl", "templates.jsonl", "interactions.json",
                 "corpus_stats.json", "manifest.json",
                 "config_resolved.json"):
        assert (out / name).exists(), name
    manifest = read_manifest(out)
    assert manifest["command"] == "ingest"


def test_manifest_lists_every_output_no_orphans(tmp_path, world_files):
    cfg = fast_config(world_files, tmp_path / "out")
    assert cli.main(["ingest", "--config", write_config(tmp_path, cfg)]) == 0
    out = str(tmp_path / "out")
    manifest = read_manifest(out)
    listed = set(manifest["outputs"]) | {"config_resolved.json"}
    on_disk = set(os.listdir(out))
    assert on_disk == listed | {"manifest.json"} | (listed & on_disk)
    assert on_disk <= listed | {"manifest.json"}


def test_train_zero_courses_keeps_pretrained_checkpoint(tmp_path,
                                                        world_files):
    out = tmp_path / "out"
    cfg = fast_config(world_files, out, courses=0)
    assert cli.main(["train", "--config", write_config(tmp_path, cfg)]) == 0
    base = (out / "rec.ckpt").read_bytes()
    final = (out / "rec_final.ckpt").read_bytes()
    assert base == final
    manifest = read_manifest(out)
    assert "rec.ckpt" in manifest["outputs"]
    assert "rec_final.ckpt" in manifest["outputs"]


def test_train_pipeline_and_artifacts(tmp_path, world_files):
    out = tmp_path / "out"
    cfg = fast_config(world_files, out)
    assert cli.main(["train", "--config", write_config(tmp_path, cfg)]) == 0
    for name in ("rec.ckpt", "flm.ckpt", "clf.ckpt", "catalog.json",
                 "rec_final.ckpt", "train_log.jsonl", "simulated.jsonl",
                 "metrics_test.json"):
        assert (out / name).exists(), name
    log = [json.loads(line)
           for line in (out / "train_log.jsonl").read_text().splitlines()]
    assert len(log) == 2
    assert {"course", "lambda", "mean_reward", "edit_norm",
            "val_recall@10", "val_recall@50"} <= set(log[0])
    simulated = cp.load_dialogues_file(out / "simulated.jsonl")
    assert len(simulated) == 4  # courses * pairs_per_course * sims_per_pair


def test_simulate_emits_corpus_format(tmp_path, world_files):
    out = tmp_path / "out"
    cfg = fast_config(world_files, out)
    assert cli.main(["simulate", "--config",
                     write_config(tmp_path, cfg)]) == 0
    sims = cp.load_dialogues_file(out / "simulated.jsonl")
    assert len(sims) == 5
    log_lines = (out / "simulate_log.jsonl").read_text().splitlines()
    first = json.loads(log_lines[0])
    assert "request" in first and "response" in first
    assert first["response"]["dialogue"]["dialogue_id"] == "sim-00000"


def test_evaluate_uses_checkpoint_and_prints_table(tmp_path, world_files,
                                                   capsys):
    out = tmp_path / "out"
    cfg = fast_config(world_files, out)
    assert cli.main(["pretrain-rec", "--config",
                     write_config(tmp_path, cfg)]) == 0
    assert cli.main(["evaluate", "--config",
                     write_config(tmp_path, cfg)]) == 0
    captured = capsys.readouterr().out
    assert "Recall@10" in captured
    with open(out / "metrics_test.json") as fh:
        metrics = json.load(fh)
    assert 0.0 <= metrics["recall@10"] <= 1.0
    assert metrics["recall@10"] <= metrics["recall@50"]


def test_evaluate_without_checkpoint_exits_3(tmp_path, world_files):
    cfg = fast_config(world_files, tmp_path / "empty")
    assert cli.main(["evaluate", "--config",
                     write_config(tmp_path, cfg)]) == 3


def test_eda_baseline_runs(tmp_path, world_files):
    out = tmp_path / "out"
    cfg = fast_config(world_files, out)
    assert cli.main(["eda-baseline", "--config",
                     write_config(tmp_path, cfg)]) == 0
    assert (out / "rec_eda.ckpt").exists()


def test_sweep_writes_grid_results(tmp_path, world_files):
    out = tmp_path / "out"
    cfg = fast_config(world_files, out, courses=1)
    assert cli.main(["sweep", "--config", write_config(tmp_path, cfg)]) == 0
    with open(out / "sweep.json") as fh:
        rows = json.load(fh)
    assert len(rows) == 1
    assert rows[0]["rho"] == 0.1 and "recall@10" in rows[0]


def test_flag_overrides_config_field(tmp_path, world_files):
    out = tmp_path / "out"
    cfg = fast_config(world_files, out, min_support=999)
    code = cli.main(["mine-schemas", "--config", write_config(tmp_path, cfg),
                     "--set", "min_support=2"])
    assert code == 0
    with open(out / "config_resolved.json") as fh:
        resolved = json.load(fh)
    assert resolved["min_support"] == 2
    with open(out / "catalog.json") as fh:
        assert len(json.load(fh)) > 0


def test_precision_flag_stores_f32_checkpoints(tmp_path, world_files):
    from recflow import autodiff as ad
    out = tmp_path / "out"
    cfg = fast_config(world_files, out, precision="f32", rec_steps=20)
    try:
        assert cli.main(["pretrain-rec", "--config",
                         write_config(tmp_path, cfg)]) == 0
    finally:
        ad.set_param_dtype("float64")
    loaded = ad.load_checkpoint(out / "rec.ckpt")
    assert all(arr.dtype == "float32" for arr in loaded.values())


def test_full_pipeline_deterministic_across_runs(tmp_path, world_files):
    digests = []
    for run in ("a", "b"):
        out = tmp_path / f"out_{run}"
        cfg = fast_config(world_files, out)
        assert cli.main(["train", "--config",
                         write_config(tmp_path, cfg, f"c{run}.json")]) == 0
        digests.append({
            name: (out / name).read_bytes()
            for name in ("rec.ckpt", "flm.ckpt", "clf.ckpt",
                         "rec_final.ckpt", "metrics_test.json",
                         "train_log.jsonl", "simulated.jsonl")
        })
    for name, blob in digests[0].items():
        assert blob == digests[1][name], f"{name} differs between runs"
