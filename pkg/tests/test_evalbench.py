import io
import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles as O
from cecl import encoder as enc
from cecl import evalbench as E
from cecl.errors import BadRecord, EmptyBenchmark, EmptySamples, KTooLarge
from cecl.hardneg import NegType
from cecl.synthworld import make_dataset
from cecl.trainer import build_vocabulary


def items_for(n_items, types=("REL", "ATT", "ACT", "OBJ")):
    return [
        E.BenchItem(f"i{i}", [float(i)], f"pos {i}", [(f"neg {i} {t}", t) for t in types]) for i in range(n_items)
    ]


def scorer(fn):
    """Callable model scoring every caption with ``fn(image_row, caption)``."""

    def score(feats, captions):
        return np.array([[fn(f, c) for c in captions] for f in feats])

    return score


PERFECT = scorer(lambda f, c: 1.0 if c.startswith("pos") else 0.0)
TIED = scorer(lambda f, c: 0.5)


class TestPairwiseAccuracy:
    def test_perfect_model(self):
        r = E.pairwise_accuracy(PERFECT, items_for(5))
        assert r.accuracy == 1.0 and r.total_pairs == 20
        assert r.per_type == {t: 1.0 for t in ("REL", "ATT", "ACT", "OBJ")}

    def test_ties_count_as_wrong(self):
        assert E.pairwise_accuracy(TIED, items_for(5)).accuracy == 0.0

    def test_random_model_is_at_chance(self):
        rng = np.random.default_rng(0)
        items = items_for(2500)
        r = E.pairwise_accuracy(lambda f, c: rng.random((len(f), len(c))), items)
        sd = math.sqrt(0.25 / r.total_pairs)
        assert abs(r.accuracy - 0.5) < 3 * sd

    def test_totals_and_missing_types(self):
        items = items_for(3, ("REL", "OBJ")) + items_for(2, ("ACT",))
        r = E.pairwise_accuracy(PERFECT, items)
        assert r.counts == {"REL": 3, "ATT": 0, "ACT": 2, "OBJ": 3}
        assert r.total_pairs == sum(r.counts.values()) == 8
        assert math.isnan(r.per_type["ATT"])
        assert "ATT" not in r.to_table()

    @given(st.floats(0.1, 10.0), st.floats(-5.0, 5.0))
    def test_invariant_under_increasing_transform(self, a, b):
        rng = np.random.default_rng(1)
        table = {}

        def base(feats, captions):
            key = (tuple(np.ravel(feats)), tuple(captions))
            if key not in table:
                table[key] = rng.normal(size=(len(feats), len(captions)))
            return table[key]

        items = items_for(30)
        r1 = E.pairwise_accuracy(base, items)
        r2 = E.pairwise_accuracy(lambda f, c: np.exp(a * base(f, c) + b), items)
        assert r1.correct == r2.correct

    def test_random_inits_average_to_chance(self):
        """Averaged over initializations, an untrained encoder scores 50%.

        A single draw varies by about 2 points around that, because all pairs
        share the same few word embeddings.
        """
        ds = make_dataset(n=1000, seed=0)
        vocab = build_vocabulary(ds.eval)
        accs = [
            E.pairwise_accuracy(enc.init_params(vocab, len(ds.eval[0].feature), 16, 16, 16, seed=s), ds.bench).accuracy
            for s in range(40)
        ]
        sem = np.std(accs, ddof=1) / math.sqrt(len(accs))
        assert abs(np.mean(accs) - 0.5) < 3 * sem + 1e-3

    def test_independent_of_temperature(self):
        ds = make_dataset(n=60, seed=1)
        p = enc.init_params(build_vocabulary(ds.eval), len(ds.eval[0].feature), 8, 8, 8, seed=0)
        hot = p.replace(log_tau=np.array(math.log(3.0)))
        assert E.pairwise_accuracy(p, ds.bench).correct == E.pairwise_accuracy(hot, ds.bench).correct

    def test_empty(self):
        with pytest.raises(EmptyBenchmark):
            E.pairwise_accuracy(PERFECT, [])

    def test_pair_outcomes_agree_with_report(self):
        rng = np.random.default_rng(2)
        items = items_for(40)
        table = rng.normal(size=(40, 200))
        model = lambda f, c: table[: len(f), : len(c)]
        hits, types = E.pair_outcomes(model, items)
        r = E.pairwise_accuracy(model, items)
        assert hits.sum() == sum(r.correct.values()) and len(types) == r.total_pairs

    def test_scores_csv(self):
        buf = io.StringIO()
        E.write_item_scores_csv(buf, PERFECT, items_for(2, ("REL",)))
        assert buf.getvalue().splitlines() == ["id,type,s_pos,s_neg,correct", "i0,REL,1.0,0.0,1", "i1,REL,1.0,0.0,1"]


class TestRecall:
    def test_matches_oracle(self, rng):
        for _ in range(50):
            n = int(rng.integers(1, 7))
            sims = rng.integers(0, 3, size=(n, n)).astype(float)  # small integers force ties
            for k in range(1, n + 1):
                for d in ("t2i", "i2t"):
                    assert E.recall_from_sims(sims, k, d) == O.recall_at_k(sims.tolist(), k, d)

    def test_hand_example(self):
        sims = np.array([[0.9, 0.1, 0.3, 0.2], [0.8, 0.7, 0.1, 0.0], [0.1, 0.2, 0.3, 0.4], [0.0, 0.0, 0.0, 0.5]])
        assert E.recall_from_sims(sims, 1, "i2t") == 0.5
        assert E.recall_from_sims(sims, 2, "i2t") == 1.0
        assert E.recall_from_sims(sims, 1, "t2i") == 0.75

    @given(st.integers(0, 10_000))
    def test_nondecreasing_in_k(self, seed):
        sims = np.random.default_rng(seed).normal(size=(6, 6))
        vals = [E.recall_from_sims(sims, k) for k in range(1, 7)]
        assert vals == sorted(vals) and vals[-1] == 1.0

    def test_identity_and_single(self):
        assert E.recall_from_sims(np.eye(5), 1) == 1.0
        assert E.recall_from_sims(np.array([[0.3]]), 1) == 1.0

    def test_bad_k(self):
        with pytest.raises(KTooLarge):
            E.recall_from_sims(np.eye(3), 4)
        with pytest.raises(ValueError):
            E.recall_from_sims(np.eye(3), 0)
        with pytest.raises(ValueError):
            E.recall_from_sims(np.eye(3), 1, "sideways")


class TestGapStats:
    def _model(self, vocab_words, text_rows):
        vocab = enc.Vocabulary(vocab_words)
        p = enc.init_params(vocab, 2, 2, 2, 4, seed=0)
        E_ = np.zeros_like(p.E)
        for w, row in text_rows.items():
            E_[vocab.encode(w)[0]] = row
        return p.replace(E=E_, P=np.zeros_like(p.P), W_t=np.eye(2), b_t=np.zeros(2), W_i=np.eye(2), b_i=np.zeros(2))

    def test_identical_captions(self):
        p = self._model(["a", "b"], {"a": [1.0, 0.0], "b": [2.0, 0.0]})
        items = [E.BenchItem("x", [1.0, 1.0], "a", [("b", "OBJ")])]
        s = E.modality_gap_stats(p, items)
        assert s.intra[0] == pytest.approx(1.0, abs=1e-12)
        assert s.gap[0] == pytest.approx(0.0, abs=1e-12)

    def test_orthogonal_captions(self):
        p = self._model(["a", "b"], {"a": [1.0, 0.0], "b": [0.0, 1.0]})
        items = [E.BenchItem("x", [1.0, 0.0], "a", [("b", "REL")])]
        s = E.modality_gap_stats(p, items)
        assert s.intra[0] == pytest.approx(0.0, abs=1e-12)
        assert s.gap[0] == pytest.approx(1.0, abs=1e-12)
        assert s.summary["REL"]["pairs"] == 1 and "ATT" not in s.summary


class TestBootstrap:
    def test_constant_sample(self):
        assert E.bootstrap_ci([0.3] * 10) == (0.3, 0.3)

    @given(st.lists(st.floats(-100, 100), min_size=2, max_size=30))
    def test_bounds(self, xs):
        lo, hi = E.bootstrap_ci(xs, n_resamples=500, confidence=0.9)
        assert min(xs) <= lo <= hi <= max(xs)

    def test_deterministic(self):
        x = np.random.default_rng(0).normal(size=50)
        assert E.bootstrap_ci(x, 2000, seed=3) == E.bootstrap_ci(x, 2000, seed=3)

    def test_coverage(self):
        """Nominal 95% intervals should cover the true mean of Bernoulli(0.5) most of the time."""
        rng = np.random.default_rng(7)
        covered = 0
        for trial in range(200):
            x = rng.random(200) < 0.5
            lo, hi = E.bootstrap_ci(x, n_resamples=2000, confidence=0.95, seed=trial)
            covered += lo <= 0.5 <= hi
        # 95% nominal; allow for percentile-interval undercoverage and trial noise
        assert covered >= 0.9 * 200

    def test_errors(self):
        with pytest.raises(EmptySamples):
            E.bootstrap_ci([])
        with pytest.raises(ValueError):
            E.bootstrap_ci([1.0, 2.0], confidence=1.0)


class TestItemsAndReport:
    def test_item_validation(self):
        with pytest.raises(ValueError):
            E.BenchItem("a", [0.0], "x", [])
        with pytest.raises(ValueError):
            E.BenchItem("a", [0.0], "x", [("x", "REL")])
        with pytest.raises(ValueError):
            E.BenchItem("a", [0.0], "x", [("y", "SPIN")])

    def test_item_round_trip(self):
        it = items_for(1)[0]
        assert E.BenchItem.from_json(json.loads(json.dumps(it.to_json()))) == it
        assert it.negatives[0][1] is NegType.REL

    def test_load_items_reports_line(self, tmp_path):
        path = tmp_path / "items.jsonl"
        path.write_text(json.dumps(items_for(1)[0].to_json()) + "\n{not json\n")
        with pytest.raises(BadRecord, match=":2:"):
            E.load_items(path)

    def test_evaluate_end_to_end(self):
        ds = make_dataset(n=60, seed=2)
        p = enc.init_params(build_vocabulary(ds.eval), len(ds.eval[0].feature), 8, 8, 8, seed=0)
        r = E.evaluate(p, ds.bench, ks=(1, 5, 1000), analysis=True, n_resamples=500)
        assert set(r.recall) == {"T2I R@1", "I2T R@1", "T2I R@5", "I2T R@5"}
        assert r.analysis["ALL"]["pairs"] == r.total_pairs
        lo, hi = r.analysis["gap_ci"]
        assert lo <= r.analysis["ALL"]["gap"] <= hi
        json.dumps(r.to_json())
