import csv
import subprocess
import sys

import numpy as np
import pytest

from nblpcfg import bench
from nblpcfg import cli
from nblpcfg import decode as D
from nblpcfg import grammar as g
from nblpcfg.inside import enumerate_lexicalized_trees

TINY = ["--embed-dim", "8", "--n-nt", "2", "--n-pt", "4", "--d-h", "3", "--batch-size", "4"]


def run(argv, capsys=None):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr() if capsys is not None else None
    return code, out


def usage_code(argv):
    with pytest.raises(SystemExit) as exc:
        cli.main([str(a) for a in argv])
    return exc.value.code


@pytest.fixture(scope="module")
def treebank(tmp_path_factory):
    out = tmp_path_factory.mktemp("syn")
    assert cli.main(["sample", "--out-dir", str(out), "--n-train", "30", "--n-dev", "8", "--n-test", "8",
                     "--vocab-size", "12", "--max-len", "8", "--punct-rate", "0", "--seed", "3"]) == 0
    return out


@pytest.fixture(scope="module")
def trained(treebank, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    code = cli.main(["train", "--train", str(treebank / "train.mrg"), "--dev", str(treebank / "dev.mrg"),
                     "--out-dir", str(out), "--epochs", "2", *TINY])
    assert code == 0
    return out


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class TestSample:
    def test_files(self, treebank):
        for split in ("train", "dev", "test"):
            assert (treebank / f"{split}.mrg").exists() and (treebank / f"{split}.conll").exists()
        assert len((treebank / "train.mrg").read_text().splitlines()) == 30

    def test_deterministic(self, treebank, tmp_path):
        cli.main(["sample", "--out-dir", str(tmp_path), "--n-train", "30", "--n-dev", "8", "--n-test", "8",
                  "--vocab-size", "12", "--max-len", "8", "--punct-rate", "0", "--seed", "3"])
        assert (tmp_path / "train.mrg").read_text() == (treebank / "train.mrg").read_text()


class TestTrain:
    def test_smoke(self, trained):
        assert (trained / "model-seed0.ckpt").exists()
        assert (trained / "model-seed0.ckpt.vocab").exists()
        hist = read_csv(trained / "history-seed0.csv")
        assert len(hist) == 2 and list(hist[0]) == ["epoch", "mean_nll", "dev_ppl", "seconds"]

    def test_missing_corpus(self, tmp_path):
        assert usage_code(["train", "--train", tmp_path / "nope.mrg"]) == 2

    def test_missing_required(self):
        assert usage_code(["train"]) == 2

    def test_four_seeds(self, treebank, tmp_path, capsys):
        code, out = run(["train", "--train", treebank / "train.mrg", "--dev", treebank / "dev.mrg",
                         "--out-dir", tmp_path, "--epochs", "1", "--seeds", "1,2,3,4", *TINY], capsys)
        assert code == 0
        assert sorted(p.name for p in tmp_path.glob("*.ckpt")) == [f"model-seed{s}.ckpt" for s in (1, 2, 3, 4)]
        rows = read_csv(tmp_path / "runs.csv")
        assert [r["seed"] for r in rows] == ["1", "2", "3", "4", "mean"]
        ppl = [float(r["dev_ppl"]) for r in rows[:4]]
        np.testing.assert_allclose(float(rows[4]["dev_ppl"]), np.mean(ppl), rtol=1e-5)
        assert "over 4 seed(s)" in out.out

    def test_sweep_rows(self, treebank, tmp_path):
        code, _ = run(["train", "--train", treebank / "train.mrg", "--out-dir", tmp_path, "--epochs", "1",
                       "--embed-dim", "8", "--n-nt", "2", "--n-pt", "4", "--d-h", "2,3"])
        assert code == 0
        rows = read_csv(tmp_path / "runs.csv")
        assert [(r["d_h"], r["seed"]) for r in rows] == [("2", "0"), ("2", "mean"), ("3", "0"), ("3", "mean")]

    def test_config_precedence(self, treebank, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text(f"# tiny run\ntrain = {treebank / 'train.mrg'}\nepochs = 3\nembed_dim = 8\n"
                       "n-nt = 2\nn_pt = 4\nd_h = 3\n")
        code, _ = run(["train", "--config", cfg, "--out-dir", tmp_path, "--epochs", "1"])
        assert code == 0
        assert len(read_csv(tmp_path / "history-seed0.csv")) == 1

    def test_unknown_config_key(self, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("colour = blue\n")
        assert usage_code(["train", "--config", cfg]) == 2

    def test_runtime_failure_exit_one(self, tmp_path, capsys):
        bad = tmp_path / "bad.mrg"
        bad.write_text("(S (A a) (B b)\n")
        code, out = run(["train", "--train", bad], capsys)
        assert code == 1 and "error" in out.err

    def test_console_script(self, tmp_path):
        res = subprocess.run([sys.executable, "-m", "nblpcfg.cli", "train", "--train", str(tmp_path / "x")],
                             capture_output=True, text=True)
        assert res.returncode == 2 and "no such file" in res.stderr


class TestParse:
    def write_input(self, tmp_path, text):
        path = tmp_path / "in.txt"
        path.write_text(text)
        return path

    def test_two_words(self, trained, tmp_path, capsys):
        inp = self.write_input(tmp_path, "w0 w1\n")
        code, out = run(["parse", "--checkpoint", trained / "model-seed0.ckpt", "--input", inp], capsys)
        assert code == 0
        lines = out.out.splitlines()
        assert lines[0] == "(X (X w0) (X w1))"
        heads = sorted(int(line.split("\t")[6]) for line in lines[1:3])
        assert heads in ([0, 1], [0, 2])

    def test_length_one_continues(self, trained, tmp_path, capsys):
        inp = self.write_input(tmp_path, "w0\nw1 w2 w3\n")
        code, out = run(["parse", "--checkpoint", trained / "model-seed0.ckpt", "--input", inp], capsys)
        assert code == 0
        assert out.out.startswith("# error: line 1")
        assert "(X" in out.out

    @pytest.mark.parametrize("method", ["mbr", "viterbi"])
    def test_idempotent(self, trained, tmp_path, capsys, method):
        inp = self.write_input(tmp_path, "w0 w1 w2 w3 w4\nw3 w3 w1\n")
        argv = ["parse", "--checkpoint", trained / "model-seed0.ckpt", "--input", inp, "--decode", method]
        first = run(argv, capsys)[1].out
        assert first == run(argv, capsys)[1].out

    def test_missing_checkpoint(self, tmp_path):
        inp = self.write_input(tmp_path, "a b\n")
        assert usage_code(["parse", "--checkpoint", tmp_path / "none.ckpt", "--input", inp]) == 2

    def test_mbr_and_viterbi_can_differ(self):
        # search a fixed family of peaked grammars for a sentence where the decoders disagree
        for seed in range(200):
            rng = np.random.default_rng(seed)
            p = g.random_nbl_params(1, 2, 3, 2, rng=rng, concentration=0.3)
            sent = list(rng.integers(0, 3, size=4))
            mbr = D.mbr_constituency(D.span_marginals(p, sent))
            vit = D.viterbi_cyk(p, sent)
            if mbr != vit.tree:
                break
        else:
            pytest.fail("no disagreement found")
        trees = list(enumerate_lexicalized_trees(4, p, leaf_symbols=range(p.n_nt, p.n_sym)))
        lps = np.array([g.tree_log_probability(p, t, sent) for t in trees])
        post = np.exp(lps - np.logaddexp.reduce(lps))
        np.testing.assert_allclose(lps.max(), vit.score, atol=1e-10)
        mu = {}
        for t, w in zip(trees, post):
            for span in g.tree_spans(t):
                mu[span] = mu.get(span, 0.0) + w
        recall = lambda tree: sum(mu.get(s, 0.0) for s in D.bracketing_spans(tree))
        assert recall(mbr) > recall(vit.tree)


class TestEval:
    def test_gold_vs_gold(self, treebank, capsys, tmp_path):
        gold, conll = treebank / "test.mrg", treebank / "test.conll"
        code, out = run(["eval", "--gold", gold, "--gold-conll", conll, "--pred", gold, "--pred-conll", conll, "--keep-punct",
                         "--out", tmp_path / "r.csv"], capsys)
        assert code == 0
        row = read_csv(tmp_path / "r.csv")[0]
        assert list(row) == ["f1_mean", "f1_std", "udas", "uuas", "ppl"]
        assert float(row["f1_mean"]) == 1.0 and float(row["udas"]) == 1.0 and float(row["uuas"]) == 1.0
        assert out.out.splitlines()[0].split(None, 1) == ["F1", "100.0 ± 0.0"]

    def test_right_branching_on_left_corpus(self, tmp_path, capsys):
        gold = tmp_path / "left.mrg"
        gold.write_text("(S (X (X (X a) (X b)) (X c)) (X d))\n(S (X (X (X (X a) (X b)) (X c)) (X d)) (X e))\n")
        code, out = run(["eval", "--gold", gold, "--baseline", "right", "--out", tmp_path / "r.csv"], capsys)
        assert code == 0
        assert float(read_csv(tmp_path / "r.csv")[0]["f1_mean"]) == 0.0
        code, _ = run(["eval", "--gold", gold, "--baseline", "left", "--out", tmp_path / "l.csv"], capsys)
        assert float(read_csv(tmp_path / "l.csv")[0]["f1_mean"]) == 1.0

    def test_checkpoint_report(self, trained, treebank, tmp_path, capsys):
        ckpt = trained / "model-seed0.ckpt"
        code, out = run(["eval", "--gold", treebank / "test.mrg", "--gold-conll", treebank / "test.conll",
                         "--checkpoint", f"{ckpt},{ckpt}", "--out", tmp_path / "r.csv",
                         "--labels-out", tmp_path / "lab.csv"], capsys)
        assert code == 0
        row = read_csv(tmp_path / "r.csv")[0]
        assert float(row["f1_std"]) == 0.0 and float(row["ppl"]) >= 1.0
        assert 0.0 <= float(row["udas"]) <= float(row["uuas"]) <= 1.0
        assert (tmp_path / "lab.csv").read_text().startswith("label,recall\n")
        assert "Perplexity" in out.out

    def test_exactly_one_source(self, treebank):
        assert usage_code(["eval", "--gold", treebank / "test.mrg"]) == 2
        assert usage_code(["eval", "--gold", treebank / "test.mrg", "--baseline", "right",
                           "--pred", treebank / "test.mrg"]) == 2

    def test_alignment_error(self, treebank, tmp_path, capsys):
        pred = tmp_path / "p.mrg"
        pred.write_text("(X (X a) (X b))\n")
        code, out = run(["eval", "--gold", treebank / "test.mrg", "--pred", pred], capsys)
        assert code == 1 and "prediction has 2 words" in out.err


class TestBench:
    def test_csv_and_slopes(self, tmp_path):
        code, _ = run(["bench", "--variants", "nbl,zhu_C1_2", "--lengths", "3,4", "--m", "3,6", "--d-h", "2",
                       "--out", tmp_path / "t.csv", "--slopes-out", tmp_path / "s.csv"])
        assert code == 0
        lines = (tmp_path / "t.csv").read_text().splitlines()
        assert lines[0] == "variant,l,n_nt,d_h,rep,seconds"
        assert len(lines) == 1 + 2 * 2 * 2 * 3
        fits = read_csv(tmp_path / "s.csv")
        assert {f["axis"] for f in fits} == {"m", "l"}

    def test_oom_marked_and_run_continues(self, monkeypatch):
        real = bench.time_cell

        def flaky(variant, l, m, d_h, reps=3, seed=0, warmup=1):
            return None if m == 6 else real(variant, l, m, d_h, reps, seed, warmup)

        monkeypatch.setattr(bench, "time_cell", flaky)
        rows = bench.run_grid(["nbl"], [3], [3, 6, 9], (2,), reps=3)
        text = bench.rows_csv(rows)
        assert "nbl,3,6,2,oom,oom" in text
        assert sum(r.n_nt == 9 for r in rows) == 3

    def test_params_deterministic(self):
        a = bench.bench_params("nbl", 5, 9, 4, seed=1)
        b = bench.bench_params("nbl", 5, 9, 4, seed=1)
        np.testing.assert_array_equal(a.log_head.value, b.log_head.value)

    def test_split_symbols(self):
        assert bench.split_symbols(30) == (10, 20)

    def test_slope_fit(self):
        xs = [10, 20, 40, 80]
        np.testing.assert_allclose(bench.fit_slope(xs, [x ** 2 for x in xs]), 2.0)

    def test_unknown_variant(self):
        assert usage_code(["bench", "--variants", "cky"]) == 2
