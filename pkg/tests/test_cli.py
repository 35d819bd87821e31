import json

import pytest

from subtune import cli

TINY = ["--set", "data.source_n=1500", "--set", "pretrain.epochs=2", "--set", "data.n_test=60",
        "--set", "data.m=40", "--set", "train.epochs=2", "--seeds", "0,1"]

GOLDEN = {
    "profile": "group_size,l_start,l_end,mean_acc,std_acc,seeds",
    "greedy": "step,candidate_block,cv_acc,chosen,accepted",
    "cost": "l_start,l_end,total,baseline,added",
    "al": "round,budget,strategy,seed,test_acc",
    "gap": "r_prime,delta,m,seed,train_acc,test_acc,gap",
}


def run(args, out):
    return cli.main(list(args) + ["--out", str(out)])


def lines(path):
    return path.read_text(encoding="utf-8").splitlines()


def test_cost_hand_profile(tmp_path):
    assert run(["cost", "--set", "cost.c=2,3,1,4", "--set", "cost.s=1,2,2,1"], tmp_path) == 0
    rows = [r for r in cli.read_csv(tmp_path / "cost.csv")]
    row = next(r for r in rows if (r["l_start"], r["l_end"]) == ("2", "3"))
    assert float(row["total"]) == 20 and float(row["baseline"]) == 11 and float(row["added"]) == 9
    assert len(rows) == 10


def test_greedy_lookup_oracle(tmp_path):
    assert run(["greedy", "--lookup-oracle"], tmp_path) == 0
    rows = cli.read_csv(tmp_path / "greedy.csv")
    assert rows[-1]["chosen"] == "2,1"
    assert [r["candidate_block"] for r in rows if r["accepted"] == "1"] == ["2", "1"]
    summary = json.loads((tmp_path / "greedy.json").read_text())
    assert summary["result"]["candidate_evaluations"] == 6


def test_greedy_lookup_file(tmp_path):
    table = tmp_path / "t.json"
    table.write_text(json.dumps({"": 0.1, "1": 0.3, "2": 0.2, "1,2": 0.31}))
    assert run(["greedy", "--set", f"greedy.lookup={table}", "--set", "greedy.n_blocks=2",
                "--set", "greedy.epsilon=0.05"], tmp_path) == 0
    assert cli.read_csv(tmp_path / "greedy.csv")[-1]["chosen"] == "1"


def test_profile_group_one_rows(tmp_path):
    assert run(["profile", "--group", "1"] + TINY, tmp_path) == 0
    rows = cli.read_csv(tmp_path / "profile.csv")
    assert len(rows) == 8
    assert [int(r["l_start"]) for r in rows] == list(range(1, 9))
    assert rows[0]["seeds"] == "0;1"


def test_unknown_key_names_nearest(tmp_path, capsys):
    assert run(["cost", "--set", "train.lrr=0.1"], tmp_path) == 2
    err = capsys.readouterr().err
    assert "train.lrr" in err and "'train.lr'" in err


def test_config_file_and_bad_values(tmp_path, capsys):
    cfg = tmp_path / "exp.cfg"
    cfg.write_text("# comment\ncost.c = 1,2\ncost.s = 1,1  # trailing\n", encoding="utf-8")
    assert run(["cost", "--config", str(cfg)], tmp_path / "o") == 0
    cfg.write_text("greedy.epsilon = lots\n", encoding="utf-8")
    assert run(["greedy", "--config", str(cfg)], tmp_path / "o") == 2
    cfg.write_text("greedy.epsilonn = 1\n", encoding="utf-8")
    assert run(["greedy", "--config", str(cfg)], tmp_path / "o") == 2
    assert "greedy.epsilon'" in capsys.readouterr().err
    assert run(["cost", "--set", "cost.c=1,2"], tmp_path / "o") == 2
    assert run(["profile", "--group", "x"] + TINY, tmp_path / "o") == 2


def test_runtime_error_exit_code(tmp_path):
    bad = tmp_path / "bad.sbtn"
    bad.write_bytes(b"XXXXjunk")
    assert run(["subtune", "--set", f"run.checkpoint={bad}"] + TINY, tmp_path) == 3


def test_every_csv_header_matches_schema(tmp_path):
    for cmd in (["cost"], ["greedy", "--lookup-oracle"], ["profile"] + TINY,
                ["gap", "--set", "gap.sizes=0,1", "--set", "gap.m=40", "--set", "gap.epochs=2"] + TINY,
                ["al", "--set", "al.pool=200", "--set", "al.n_test=50"] + TINY):
        assert run(cmd, tmp_path) == 0
    for kind, header in GOLDEN.items():
        text = lines(tmp_path / f"{kind}.csv")
        assert text[0] == "# subtune-csv v1"
        assert text[1] == header
        assert ",".join(cli.SCHEMAS[kind]) == header


def test_subtune_siamese_prune_pretrain(tmp_path):
    assert run(["pretrain"] + TINY, tmp_path) == 0
    ckpt = tmp_path / "pretrained.sbtn"
    assert ckpt.exists()
    common = TINY + ["--set", f"run.checkpoint={ckpt}"]
    assert run(["subtune", "--set", "subtune.blocks=1,3", "--set", "subtune.reinit=true"] + common, tmp_path) == 0
    assert run(["siamese"] + common, tmp_path) == 0
    assert run(["prune"] + common, tmp_path) == 0
    rows = cli.read_csv(tmp_path / "prune.csv")
    assert all(float(r["kept_fraction"]) <= 0.10 for r in rows)
    assert cli.read_csv(tmp_path / "siamese.csv")[0]["head"] == "siamese"
    assert cli.read_csv(tmp_path / "subtune.csv")[0]["reinit"] == "1"


def test_byte_identical_reruns(tmp_path):
    for name in ("a", "b"):
        assert run(["profile", "--set", "profile.group=2"] + TINY, tmp_path / name) == 0
        assert run(["subtune"] + TINY, tmp_path / name) == 0
        assert run(["report"], tmp_path / name) == 0
    for f in ("profile.csv", "subtune.csv", "plot_data.json", "profile.json"):
        a, b = (tmp_path / "a" / f).read_bytes(), (tmp_path / "b" / f).read_bytes()
        if f.endswith(".json") and f != "plot_data.json":
            ja, jb = json.loads(a), json.loads(b)
            ja.pop("csv"), jb.pop("csv")
            assert ja == jb
        else:
            assert a == b


def test_config_hash_stable():
    a = cli.resolve({"train.lr": 0.5})
    b = cli.resolve({"train.lr": "0.5"})
    assert cli.config_hash(a) == cli.config_hash(b)
    assert cli.config_hash(a) != cli.config_hash(cli.resolve({}))


def test_report_series(tmp_path):
    assert run(["profile"] + TINY, tmp_path) == 0
    assert run(["cost"], tmp_path) == 0
    assert run(["report"], tmp_path) == 0
    data = json.loads((tmp_path / "plot_data.json").read_text())
    prof = [s for s in data["series"] if s["kind"] == "profile"]
    assert len(prof) == 1 and len(prof[0]["y"]) == len(cli.read_csv(tmp_path / "profile.csv"))
    cost = [s for s in data["series"] if s["kind"] == "acc_vs_cost"]
    assert len(cost[0]["x"]) == 8
    first = (tmp_path / "plot_data.json").read_bytes()
    assert run(["report"], tmp_path) == 0
    assert (tmp_path / "plot_data.json").read_bytes() == first


def test_report_empty_and_missing(tmp_path):
    assert run(["report"], tmp_path / "empty") == 0
    assert json.loads((tmp_path / "empty" / "plot_data.json").read_text()) == {"series": []}
    assert run(["report", "--set", f"report.inputs={tmp_path / 'nope.csv'}"], tmp_path / "m") == 3


def test_report_al_and_gap_series(tmp_path):
    (tmp_path / "al.csv").write_text("# subtune-csv v1\nround,budget,strategy,seed,test_acc\n"
                                     "0,10,margin,0,0.5\n0,10,margin,1,0.7\n1,20,margin,0,0.8\n"
                                     "0,10,random,0,0.5\n", encoding="utf-8")
    (tmp_path / "gap.csv").write_text("# subtune-csv v1\nr_prime,delta,m,seed,train_acc,test_acc,gap\n"
                                      "0,0.5,100,0,0.7,0.5,0.2\n4,0.5,100,0,0.9,0.5,0.4\n", encoding="utf-8")
    data = cli.emit_plot_data([tmp_path / "al.csv", tmp_path / "gap.csv"])
    al = {s["strategy"]: s for s in data["series"] if s["kind"] == "al"}
    assert al["margin"]["x"] == [10, 20] and al["margin"]["y"] == pytest.approx([0.6, 0.8])
    gap = next(s for s in data["series"] if s["kind"] == "gap")
    assert gap["x"] == [0, 4] and gap["sqrt_x"] == [0.0, 2.0]


def test_read_csv_rejects_unversioned(tmp_path):
    p = tmp_path / "x.csv"
    p.write_text("a,b\n1,2\n", encoding="utf-8")
    with pytest.raises(ValueError):
        cli.read_csv(p)


def test_print_schema_without_command(capsys):
    assert cli.main(["--print-schema"]) == 0
    out = capsys.readouterr().out
    assert "greedy.epsilon = 0.002" in out
    assert cli.main([]) == 2
