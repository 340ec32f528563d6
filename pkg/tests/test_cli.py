import json
import subprocess
import sys

import pytest

from reviewbench.cli import EXIT_DATA, EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, build_parser, run

SUBCOMMANDS = ["ingest", "stats", "split", "pairs", "sequences", "train", "embed", "index", "eval-search",
               "eval-seqrec", "gen-queries", "ablate", "synth"]


def _reviews_file(path, n=10, domain="Video_Games"):
    with open(path / f"{domain}.jsonl", "w") as fh:
        for t in range(1, n + 1):
            fh.write(json.dumps({"user_id": f"U{t % 3}", "parent_asin": f"I{t % 4}", "rating": 5.0, "title": "t",
                                 "text": f"review text number {t} " * 6, "timestamp": t}) + "\n")
    return path / f"{domain}.jsonl"


def test_split_fixture(tmp_path, capsys):
    reviews = _reviews_file(tmp_path)
    assert run(["split", "--reviews", str(reviews), "--ratio", "8:1:1"]) == EXIT_OK
    assert capsys.readouterr().out.startswith("t1=9 t2=10")


def test_unknown_subcommand_is_usage_error(capsys):
    assert run(["frobnicate"]) == EXIT_USAGE
    assert "usage:" in capsys.readouterr().err


def test_missing_command_is_usage_error(capsys):
    assert run([]) == EXIT_USAGE


@pytest.mark.parametrize("cmd", SUBCOMMANDS)
def test_help_for_every_subcommand(cmd, capsys):
    assert run([cmd, "--help"]) == EXIT_OK
    assert "usage:" in capsys.readouterr().out


def test_parser_lists_all_subcommands():
    text = build_parser().format_help()
    assert all(c in text for c in SUBCOMMANDS)


def test_unknown_config_keys_rejected(tmp_path):
    reviews = _reviews_file(tmp_path)
    (tmp_path / "c.json").write_text(json.dumps({"sed": 1}))
    assert run(["--config", str(tmp_path / "c.json"), "split", "--reviews", str(reviews)]) == EXIT_USAGE
    (tmp_path / "c.json").write_text(json.dumps({"train": {"temperature": 1}}))
    assert run(["split", "--config", str(tmp_path / "c.json"), "--reviews", str(reviews)]) == EXIT_USAGE


def test_flags_override_config(tmp_path, capsys):
    reviews = _reviews_file(tmp_path)
    (tmp_path / "c.json").write_text(json.dumps({"ratio": "1:1:1"}))
    run(["--config", str(tmp_path / "c.json"), "split", "--reviews", str(reviews)])
    assert capsys.readouterr().out.startswith("t1=4 t2=7 counts=3/3/4")
    run(["--config", str(tmp_path / "c.json"), "split", "--reviews", str(reviews), "--ratio", "8:1:1"])
    assert capsys.readouterr().out.startswith("t1=9 t2=10")


def test_data_error_exit_code(tmp_path):
    assert run(["split", "--reviews", str(tmp_path / "missing.jsonl")]) == EXIT_DATA
    (tmp_path / "Video_Games.jsonl").write_text('{"bad": 1}\n')
    assert run(["split", "--reviews", str(tmp_path / "Video_Games.jsonl")]) == EXIT_DATA


def test_runtime_error_exit_code(tmp_path):
    (tmp_path / "pairs.jsonl").write_text("")
    assert run(["train", "--pairs", str(tmp_path / "pairs.jsonl"), "--output", str(tmp_path / "ck")]) == EXIT_RUNTIME


def test_eval_search_bm25_oracle_fixture(tmp_path, capsys):
    meta = tmp_path / "meta_Video_Games.jsonl"
    titles = ["alpha widget", "bravo gadget", "charlie gizmo", "delta doohickey"]
    meta.write_text("".join(json.dumps({"parent_asin": f"I{i}", "title": t}) + "\n" for i, t in enumerate(titles)))
    queries = tmp_path / "q.jsonl"
    queries.write_text("".join(json.dumps({"qid": f"q{i}", "query": t.split()[0], "item_id": f"I{i}",
                                           "domain": "Video_Games"}) + "\n" for i, t in enumerate(titles)))
    out = tmp_path / "report.json"
    code = run(["eval-search", "--retriever", "bm25", "--k", "100", "--queries", str(queries),
                "--metadata", str(meta), "--output", str(out)])
    assert code == EXIT_OK
    report = json.loads(out.read_text())
    assert report["All"]["NDCG@100"] == 1.0
    manifest = json.loads((tmp_path / "report.json.manifest.json").read_text())
    assert set(manifest) >= {"inputs", "outputs", "config_hash"}
    assert str(queries) in manifest["inputs"]


def _pipeline(workdir, seed):
    data = workdir / "data"
    assert run(["--seed", str(seed), "synth", "--output-dir", str(data), "--n-items", "24", "--n-reviews", "300",
                "--n-pairs", "120"]) == 0
    reviews = sorted(str(p) for p in data.glob("[A-Z]*.jsonl"))
    metas = sorted(str(p) for p in data.glob("meta_*.jsonl"))
    assert run(["split", "--reviews", *reviews, "--output", str(workdir / "b.json")]) == 0
    assert run(["pairs", "--seed", str(seed), "--reviews", *reviews, "--metadata", *metas, "--boundaries",
                str(workdir / "b.json"), "--fraction", "0.5", "--output", str(workdir / "pairs.jsonl")]) == 0
    assert run(["train", "--seed", str(seed), "--pairs", str(data / "pairs_synthetic.jsonl"), "--epochs", "1",
                "--hidden-dim", "8", "--dim", "8", "--n-buckets", "512", "--output", str(workdir / "ck")]) == 0
    assert run(["embed", "--checkpoint", str(workdir / "ck"), "--metadata", *metas,
                "--output", str(workdir / "items.emb")]) == 0
    assert run(["eval-search", "--seed", str(seed), "--retriever", "dense", "--checkpoint", str(workdir / "ck"),
                "--queries", str(data / "queries_synthetic.jsonl"), "--metadata", *metas, "--pool-size", "5",
                "--k", "10", "--output", str(workdir / "dense.json"), "--pool-output", str(workdir / "pool")]) == 0
    return workdir


def _output_hashes(workdir):
    out = {}
    for m in sorted(workdir.rglob("*.manifest.json")):
        manifest = json.loads(m.read_text())
        out[m.name] = (manifest["config_hash"],
                       sorted(h for h in manifest["outputs"].values()))
    return out


def test_pipeline_reproducible_across_runs(tmp_path):
    a = _output_hashes(_pipeline(tmp_path / "a", 3))
    b = _output_hashes(_pipeline(tmp_path / "b", 3))
    assert a == b and len(a) == 6


def test_console_script_entry_point():
    proc = subprocess.run([sys.executable, "-m", "reviewbench.cli", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.strip()
