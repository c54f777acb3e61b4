import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nblpcfg import evaluation as E


def random_spans(rng, n):
    return {(int(i), int(j)) for i, j in rng.integers(0, n + 1, size=(6, 2)) if i < j}


class TestSentenceF1:
    def test_exact_match(self):
        assert E.sentence_f1({(0, 2)}, {(0, 2)}, 3) == 1.0

    def test_disjoint(self):
        assert E.sentence_f1({(1, 3)}, {(0, 2)}, 3) == 0.0

    def test_two_words(self):
        assert E.sentence_f1({(0, 2), (0, 1), (1, 2)}, {(0, 2)}, 2) == 1.0

    def test_one_side_empty(self):
        assert E.sentence_f1(set(), {(0, 2)}, 3) == 0.0

    def test_partial(self):
        # P = 1/2, R = 1 -> F1 = 2/3
        np.testing.assert_allclose(E.sentence_f1({(0, 2), (2, 4)}, {(0, 2)}, 5), 2 / 3)

    def test_out_of_range(self):
        with pytest.raises(E.EvalError):
            E.sentence_f1({(0, 5)}, set(), 3)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(2, 10), st.integers(0, 10_000))
    def test_symmetric_and_bounded(self, n, seed):
        rng = np.random.default_rng(seed)
        a, b = random_spans(rng, n), random_spans(rng, n)
        f = E.sentence_f1(a, b, n)
        assert f == E.sentence_f1(b, a, n)
        assert 0.0 <= f <= 1.0

    def test_corpus_mean(self):
        assert E.corpus_f1([{(0, 2)}, {(1, 3)}], [{(0, 2)}, {(0, 2)}], [3, 3]) == 0.5


class TestAttachment:
    def test_identity(self):
        assert E.attachment_scores([2, 0, 2], [2, 0, 2]) == (1.0, 1.0)

    def test_count_by_hand(self):
        udas, _ = E.attachment_scores([0, 1, 2], [2, 0, 2])
        np.testing.assert_allclose(udas, 1 / 3)

    def test_flipped_arc(self):
        # gold: 1 -> 2 (token 2 heads token 1), pred flips it
        udas, uuas = E.attachment_scores([0, 1], [2, 0])
        assert udas == 0.0 and uuas == 0.5

    def test_length_mismatch(self):
        with pytest.raises(E.EvalError):
            E.attachment_scores([0, 1], [2, 0, 2])

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 8), st.integers(0, 10_000))
    def test_uuas_at_least_udas(self, n, seed):
        rng = np.random.default_rng(seed)
        pred, gold = rng.integers(0, n + 1, size=n), rng.integers(0, n + 1, size=n)
        udas, uuas = E.attachment_scores(pred, gold)
        assert uuas >= udas

    def test_corpus_token_weighted(self):
        udas, _ = E.corpus_attachment([[0, 1], [2, 0, 2, 2]], [[2, 0], [2, 0, 2, 2]])
        np.testing.assert_allclose(udas, 4 / 6)


class TestLabelRecall:
    gold = [[(0, 2, "NP"), (2, 4, "VP"), (0, 4, "S")], [(1, 3, "NP")]]

    def test_all_predicted(self):
        r = E.label_recall([{(0, 2), (2, 4), (0, 4)}, {(1, 3)}], self.gold, [5, 4])
        assert r == {"NP": 1.0, "VP": 1.0, "S": 1.0}

    def test_no_predictions(self):
        r = E.label_recall([set(), set()], self.gold, [5, 4])
        assert all(v == 0.0 for v in r.values())

    def test_absent_label_omitted(self):
        r = E.label_recall([set(), set()], self.gold, [5, 4], labels=E.TABLE_LABELS)
        assert set(r) == {"NP", "VP"}

    def test_trivial_gold_removed(self):
        assert E.label_recall([set()], [[(0, 3, "S"), (1, 2, "NN")]], [3]) == {}

    def test_micro_consistent_with_overall(self):
        preds = [{(0, 2)}, set()]
        r = E.label_recall(preds, self.gold, [5, 4])
        counts = {"NP": 2, "VP": 1, "S": 1}
        hits = sum(r[k] * counts[k] for k in counts)
        assert hits == 1


class TestAggregation:
    def test_mean_std(self):
        assert E.aggregate_runs([58, 62]) == (60.0, 2.0)

    def test_identical(self):
        assert E.aggregate_runs([0.5] * 4)[1] == 0.0

    def test_table_format(self):
        assert E.format_mean_std([0.588, 0.62]) == "60.4 ± 1.6"

    def test_empty(self):
        with pytest.raises(E.EvalError):
            E.aggregate_runs([])

    def test_four_seed_report(self):
        reps = [E.EvalReport(f, 0.0, 0.4, 0.5, 100.0, {"NP": f}) for f in (0.58, 0.60, 0.62, 0.60)]
        agg = E.aggregate_reports(reps)
        np.testing.assert_allclose([agg.f1_mean, agg.f1_std], [0.6, np.std([0.58, 0.60, 0.62, 0.60])])
        text = E.report_text(agg, seeds_f1=[0.58, 0.60, 0.62, 0.60])
        assert text.splitlines()[0].split(None, 1) == ["F1", "60.0 ± 1.4"]
        assert "NP recall" in text


class TestReportFormats:
    def test_columns_exact(self):
        csv = E.report_csv([E.EvalReport(1.0, 0.0, 1.0, 1.0, 3.0)])
        header, row = csv.splitlines()
        assert header == "f1_mean,f1_std,udas,uuas,ppl"
        assert row.split(",")[0] == "1.000000"

    def test_label_csv(self):
        assert E.label_recall_csv({"VP": 0.5, "NP": 1.0}) == "label,recall\nNP,1.000000\nVP,0.500000\n"
