import json

import pytest

from qaa.aggregator import QaaConfig, QaaParams
from qaa.cli import CHANNEL_PAIRS, main
from qaa.formats import write_checkpoint

CONFIG = {
    "world": {"num_places": 30},
    "model": {"n_q": 4, "c_o": 64, "c_f": 4, "c_r": 4},
    "plan": {"n": 3, "k": 3, "m": 2},
    "optimizer": {"lr": 0.003, "warmup": 5, "max_epochs": 2},
    "iters_per_epoch": 2,
    "queries_per_place": 2,
}


def run(*argv):
    return main([str(a) for a in argv])


def last_error(capsys):
    line = capsys.readouterr().err.strip().splitlines()[-1]
    return json.loads(line)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps(CONFIG))
    assert run("gen-world", "--out", root / "gw", "--config", cfg, "--seed", 0) == 0
    assert run("train", "--out", root / "tr", "--config", cfg, "--seed", 1) == 0
    return root


def test_gen_world_outputs(workspace):
    gw = workspace / "gw"
    assert json.loads((gw / "world.json").read_text())["num_places"] == 30
    for d in range(3):
        assert (gw / f"domain{d}_database.csv").exists() and (gw / f"domain{d}_queries.csv").exists()
    manifest = json.loads((gw / "run_manifest.json").read_text())
    assert manifest["command"] == "gen-world" and manifest["seed"] == 0 and manifest["version"]


def test_train_outputs_and_determinism(workspace):
    tr = workspace / "tr"
    assert (tr / "metrics.csv").read_text().splitlines()[0] == "epoch,loss,recall1"
    assert (tr / "model.cqsp").read_bytes()[:4] == b"CQSP"
    assert run("train", "--out", workspace / "tr2", "--config", workspace / "cfg.json", "--seed", 1) == 0
    for name in ("metrics.csv", "val_recall.csv"):
        assert (workspace / "tr2" / name).read_bytes() == (tr / name).read_bytes()


def test_encode_and_eval(workspace):
    gw, ck = workspace / "gw", workspace / "tr" / "model.cqsp"
    before = sorted(p.name for p in gw.iterdir())
    assert run("encode", "--out", workspace / "enc", "--checkpoint", ck, "--manifest", gw / "domain0_database.csv") == 0
    assert run("encode", "--out", workspace / "encq", "--checkpoint", ck, "--manifest", gw / "domain0_queries.csv",
               "--workers", 2) == 0
    assert (workspace / "enc" / "descriptors.cqsa").read_bytes()[:4] == b"CQSA"
    assert run("eval", "--out", workspace / "ev", "--checkpoint", ck, "--database", gw / "domain0_database.csv",
               "--queries", gw / "domain0_queries.csv") == 0
    assert run("eval", "--out", workspace / "ev2", "--database", gw / "domain0_database.csv",
               "--queries", gw / "domain0_queries.csv",
               "--database-descriptors", workspace / "enc" / "descriptors.cqsa",
               "--queries-descriptors", workspace / "encq" / "descriptors.cqsa") == 0
    report = (workspace / "ev" / "report.csv").read_text().splitlines()
    assert report[0] == "dataset,k,criterion,recall,excluded_queries"
    recalls = [float(line.split(",")[3]) for line in report[1:]]
    assert [int(line.split(",")[1]) for line in report[1:]] == [1, 5, 10]
    assert recalls == sorted(recalls)
    # precomputed float32 descriptors give the same report
    assert (workspace / "ev2" / "report.csv").read_text() == "\n".join(report) + "\n"
    assert sorted(p.name for p in gw.iterdir()) == before


def test_coding_rate_and_attn(workspace):
    gw, ck = workspace / "gw", workspace / "tr" / "model.cqsp"
    assert run("coding-rate", "--out", workspace / "cr", "--checkpoint", ck, "--checkpoint", ck,
               "--manifest", gw / "domain1_queries.csv", "--bins", 4) == 0
    rates = (workspace / "cr" / "rates.csv").read_text().splitlines()
    assert rates[0] == "paradigm,image_id,rate" and len(rates) == 1 + 2 * 8
    summary = (workspace / "cr" / "rate_summary.csv").read_text().splitlines()
    assert summary[1] == summary[2]
    assert run("attn", "--out", workspace / "at", "--checkpoint", ck, "--manifest", gw / "domain0_database.csv",
               "--ids", "d0_p3_db", "--queries", "0,2") == 0
    assert sorted(p.name for p in (workspace / "at").iterdir() if p.suffix != ".json") == [
        "d0_p3_db_q0.csv", "d0_p3_db_q0.pgm", "d0_p3_db_q2.csv", "d0_p3_db_q2.pgm"]


def test_flops_five_increasing_totals(tmp_path, capsys):
    assert run("flops", "--out", tmp_path) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    g = [float(line.split(",")[6]) for line in lines[1:]]
    assert len(g) == 5 and all(a < b for a, b in zip(g, g[1:]))
    assert (tmp_path / "flops.csv").read_text().strip().splitlines() == lines


def test_ablate_cfcr_covers_channel_pairs(tmp_path):
    cfg = dict(CONFIG, optimizer={"lr": 0.003, "warmup": 1, "max_epochs": 1}, iters_per_epoch=1)
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    assert run("ablate", "--out", tmp_path / "ab", "--config", tmp_path / "cfg.json", "--seed", 0,
               "--grid", "cfcr") == 0
    rows = (tmp_path / "ab" / "ablation_cfcr.csv").read_text().splitlines()[1:]
    pairs = [(int(r.split(",")[3]), int(r.split(",")[4])) for r in rows]
    assert pairs == list(CHANNEL_PAIRS)
    assert [int(r.split(",")[5]) for r in rows] == [cf * cr for cf, cr in CHANNEL_PAIRS]


def test_sequence_world_frame_criteria(tmp_path, workspace):
    assert run("gen-world", "--out", tmp_path / "seq", "--sequence", 30, "--seed", 2) == 0
    ck = workspace / "tr" / "model.cqsp"
    out = {}
    for thr in (1, 10):
        assert run("eval", "--out", tmp_path / f"e{thr}", "--checkpoint", ck,
                   "--database", tmp_path / "seq" / "sequence_database.csv",
                   "--queries", tmp_path / "seq" / "sequence_queries.csv",
                   "--criterion", f"frames:{thr}", "--k", "1") == 0
        out[thr] = float((tmp_path / f"e{thr}" / "report.csv").read_text().splitlines()[1].split(",")[3])
    assert out[1] <= out[10]


def test_missing_file_error_line(tmp_path, capsys):
    code = run("eval", "--out", tmp_path, "--database", tmp_path / "nope.csv", "--queries", tmp_path / "q.csv")
    assert code == 2
    assert last_error(capsys)["error"] == "missing_file"
    assert (tmp_path / "run_manifest.json").exists()


def test_bad_config_field_is_named(tmp_path, capsys):
    (tmp_path / "cfg.json").write_text(json.dumps({"model": {"bogus_width": 3}}))
    assert run("train", "--out", tmp_path / "o", "--config", tmp_path / "cfg.json", "--seed", 0) == 2
    err = last_error(capsys)
    assert err["error"] == "config" and "bogus_width" in err["message"]


def test_version_mismatched_checkpoint(tmp_path, capsys, workspace):
    ck = tmp_path / "old.cqsp"
    write_checkpoint(ck, QaaParams.init(QaaConfig(n_q=2, c_o=64, c_f=2, c_r=2), 0))
    raw = bytearray(ck.read_bytes())
    raw[4] = 7
    ck.write_bytes(bytes(raw))
    assert run("encode", "--out", tmp_path / "o", "--checkpoint", ck,
               "--manifest", workspace / "gw" / "domain0_database.csv") == 2
    err = last_error(capsys)
    assert err["error"] == "format" and "version 7" in err["message"]


def test_seed_required_for_train(tmp_path):
    with pytest.raises(SystemExit) as info:
        run("train", "--out", tmp_path)
    assert info.value.code == 2
