import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cecl.errors import FillerViolation
from cecl.hardneg import (
    NEG_TYPES,
    PLACEHOLDER,
    HardNegativeSet,
    LexiconFiller,
    NegType,
    augment,
    gen_all,
    gen_masked,
    gen_relation,
    record_stream,
)
from cecl.synthworld import WorldSpec, caption_of, sample_scene
from cecl.textproc import LexiconTagger, PosClass, default_lexicon

GOLDEN = json.loads((Path(__file__).parent / "golden" / "goldens.json").read_text())
TAGGER = LexiconTagger()


class FixedFiller:
    """Replaces one specific word; declines everything else."""

    def __init__(self, old, new):
        self.old, self.new = old, new

    def fill(self, tagged, mask_index, pos_class, rng):
        return self.new if tagged.words[mask_index] == self.old else None


class EchoFiller:
    def fill(self, tagged, mask_index, pos_class, rng):
        return tagged.words[mask_index]


class WrongClassFiller:
    def fill(self, tagged, mask_index, pos_class, rng):
        return "the"


def world_captions(n, seed=0):
    rng = np.random.default_rng(seed)
    world = WorldSpec()
    return [caption_of(sample_scene(rng, world), ("relation", "action")[i % 2]) for i in range(n)]


def diff_positions(a, b):
    wa, wb = a.split(), b.split()
    assert len(wa) == len(wb)
    return [i for i, (x, y) in enumerate(zip(wa, wb)) if x != y]


class TestRelation:
    def test_figure_example(self):
        assert gen_relation(TAGGER("horse is eating the grass")) == "grass is eating the horse"

    def test_one_noun_is_placeholder(self):
        assert gen_relation(TAGGER("the circle is here")) == PLACEHOLDER

    def test_world_example(self):
        out = gen_relation(TAGGER("a red circle is left of a blue square"))
        assert out == "a red square is left of a blue circle"

    def test_identical_nouns_give_placeholder(self):
        assert gen_relation(TAGGER("the red circle is left of the blue circle")) == PLACEHOLDER

    @given(st.integers(0, 10_000))
    def test_involution_and_two_positions(self, seed):
        cap = world_captions(1, seed)[0]
        neg = gen_relation(TAGGER(cap))
        if neg == PLACEHOLDER:
            return
        assert len(diff_positions(cap, neg)) == 2
        assert gen_relation(TAGGER(neg)) == cap


class TestMasked:
    def test_attribute_example(self):
        cap = "a gray cat sits on top of a wooden chair near a plant"
        filler = FixedFiller("wooden", "plastic")
        outs = {gen_masked(TAGGER(cap), NegType.ATT, filler, np.random.default_rng(s)) for s in range(20)}
        # the slot is drawn at random; when it lands on "wooden" the fill is "plastic"
        assert "a gray cat sits on top of a plastic chair near a plant" in outs
        assert outs <= {PLACEHOLDER, "a gray cat sits on top of a plastic chair near a plant"}

    def test_absent_class_is_placeholder(self):
        out = gen_masked(TAGGER("the circle is left of the square"), NegType.ACT, LexiconFiller(), np.random.default_rng(0))
        assert out == PLACEHOLDER

    def test_object_golden(self):
        cap = "the red circle is touching the blue square"
        out = gen_masked(TAGGER(cap), NegType.OBJ, LexiconFiller(), np.random.default_rng(0))
        assert out == GOLDEN["hardneg"]["obj_seed0"]
        pos = diff_positions(cap, out)
        assert len(pos) == 1 and cap.split()[pos[0]] in {"circle", "square"}
        assert default_lexicon()[out.split()[pos[0]]] is PosClass.NOUN

    def test_filler_returning_masked_word_raises(self):
        with pytest.raises(FillerViolation):
            gen_masked(TAGGER("the red circle"), NegType.OBJ, EchoFiller(), np.random.default_rng(0))

    def test_filler_returning_wrong_class_raises(self):
        with pytest.raises(FillerViolation):
            gen_masked(TAGGER("the red circle"), NegType.ATT, WrongClassFiller(), np.random.default_rng(0))

    def test_rel_is_not_a_mask_type(self):
        with pytest.raises(ValueError):
            gen_masked(TAGGER("the red circle"), NegType.REL, LexiconFiller(), np.random.default_rng(0))

    def test_restricted_filler_stays_in_pool(self):
        filler = LexiconFiller(restrict_to={"circle", "square"})
        out = gen_masked(TAGGER("the red circle"), NegType.OBJ, filler, np.random.default_rng(3))
        assert out == "the red square"


class TestGenAll:
    def test_template_caption_golden(self):
        cap = "the red circle is touching the blue square"
        hns = gen_all(cap, TAGGER, LexiconFiller(), np.random.default_rng(0))
        assert all(v != PLACEHOLDER for _, v in hns.items())
        assert hns.to_record("x", cap) == {"id": "x", "caption": cap, **GOLDEN["hardneg"]["all_seed0"]}

    def test_nothing_to_perturb(self):
        assert gen_all("hello world", TAGGER, LexiconFiller(), np.random.default_rng(0)) == HardNegativeSet.empty()

    def test_deterministic(self):
        cap = "the red circle is touching the blue square"
        a = gen_all(cap, TAGGER, LexiconFiller(), record_stream(7, 3))
        b = gen_all(cap, TAGGER, LexiconFiller(), record_stream(7, 3))
        assert json.dumps(a.to_record("i", cap)) == json.dumps(b.to_record("i", cap))

    def test_placeholder_rate_zero_when_class_present(self):
        # world captions always carry >= 2 nouns and adjectives; action captions carry a verb
        caps = world_captions(200, seed=1)
        filler = LexiconFiller()
        rows = augment(({"id": i, "caption": c} for i, c in enumerate(caps)), 0, TAGGER, filler)
        for row in rows:
            tagged = TAGGER(row["caption"])
            words = tagged.words
            nouns = [words[i] for i in tagged.positions(PosClass.NOUN)]
            assert row["hn_att"] != PLACEHOLDER and row["hn_obj"] != PLACEHOLDER
            assert (row["hn_act"] != PLACEHOLDER) == bool(tagged.positions(PosClass.VERB))
            assert (row["hn_rel"] != PLACEHOLDER) == (nouns[0] != nouns[-1])

    @pytest.mark.parametrize("neg_type", [NegType.ATT, NegType.ACT, NegType.OBJ])
    def test_placeholder_rate_one_when_class_absent(self, neg_type):
        caps = ["the is of the", "a the an is", "near in with to"] * 40
        for i, cap in enumerate(caps):
            assert gen_masked(TAGGER(cap), neg_type, LexiconFiller(), record_stream(0, i)) == PLACEHOLDER

    @given(st.integers(0, 10_000), st.integers(0, 1000))
    def test_negatives_keep_length_and_differ(self, scene_seed, seed):
        cap = world_captions(1, scene_seed)[0]
        hns = gen_all(cap, TAGGER, LexiconFiller(), np.random.default_rng(seed))
        for t, neg in hns.items():
            if neg == PLACEHOLDER:
                continue
            n_diff = len(diff_positions(cap, neg))
            assert n_diff == 2 if t is NegType.REL else n_diff == 1

    def test_record_round_trip(self):
        rec = HardNegativeSet("a", "b", PLACEHOLDER, "d").to_record("7", "c")
        assert HardNegativeSet.from_record(rec) == HardNegativeSet("a", "b", PLACEHOLDER, "d")
        assert [t.value for t in NEG_TYPES] == ["REL", "ATT", "ACT", "OBJ"]

    def test_augment_epoch_changes_draws(self):
        caps = [{"id": i, "caption": c} for i, c in enumerate(world_captions(30))]
        a = augment(caps, 0, TAGGER, LexiconFiller())
        b = augment(caps, 0, TAGGER, LexiconFiller(), epoch=1)
        assert a != b
        assert [r["hn_rel"] for r in a] == [r["hn_rel"] for r in b]  # the swap has no randomness
