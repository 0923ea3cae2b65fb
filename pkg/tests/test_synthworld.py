import json
from collections import Counter
from dataclasses import asdict
from pathlib import Path

import numpy as np
import pytest

from cecl.hardneg import NegType
from cecl.synthworld import (
    DatasetRecord,
    Obj,
    Scene,
    WorldSpec,
    caption_of,
    decode_features,
    make_dataset,
    mirror,
    parse_caption,
    render_features,
    sample_scene,
)

GOLDEN = json.loads((Path(__file__).parent / "golden" / "goldens.json").read_text())["synthworld"]
WORLD = WorldSpec()


@pytest.fixture(scope="module")
def dataset():
    return make_dataset(WORLD, n=400, seed=3)


class TestScenes:
    def test_single_shape_and_color_forces_size_difference(self):
        world = WorldSpec(shapes=("circle",), colors=("red",))
        rng = np.random.default_rng(0)
        for _ in range(50):
            s = sample_scene(rng, world)
            assert s.obj1.size != s.obj2.size

    def test_golden_scene(self):
        assert sample_scene(np.random.default_rng(0)).to_dict() == GOLDEN["scene_seed0"]

    def test_marginals_uniform(self):
        rng = np.random.default_rng(11)
        n = 10_000
        scenes = [sample_scene(rng) for _ in range(n)]
        for attr, options in (("relation", WORLD.relations), ("action", WORLD.actions)):
            counts = Counter(getattr(s, attr) for s in scenes)
            p = 1 / len(options)
            sd = np.sqrt(n * p * (1 - p))
            for o in options:
                assert abs(counts[o] - n * p) < 3 * sd, (attr, o)
        # objects: rejection of obj1 == obj2 keeps shape/color/size marginals uniform by symmetry
        for field, options in (("shape", WORLD.shapes), ("color", WORLD.colors), ("size", WORLD.sizes)):
            counts = Counter(getattr(s.obj1, field) for s in scenes)
            p = 1 / len(options)
            sd = np.sqrt(n * p * (1 - p))
            for o in options:
                assert abs(counts[o] - n * p) < 3 * sd, (field, o)


class TestCaptions:
    def test_relation_template(self):
        s = Scene(Obj("circle", "red", "small"), Obj("square", "blue", "large"), "left_of", "pushing")
        assert caption_of(s) == "the red small circle is left of the blue large square"

    def test_mirror_is_a_different_string_for_the_same_layout(self):
        s = Scene(Obj("circle", "red", "small"), Obj("square", "blue", "large"), "left_of", "pushing")
        m = mirror(s)
        assert caption_of(m) == "the blue large square is right of the red small circle"
        np.testing.assert_array_equal(
            np.sort(render_features(s, 0.0)[2 * WORLD.object_dim : 2 * WORLD.object_dim + 4]),
            np.sort(render_features(m, 0.0)[2 * WORLD.object_dim : 2 * WORLD.object_dim + 4]),
        )

    def test_action_template(self):
        s = Scene(Obj("circle", "red", "small"), Obj("square", "blue", "large"), "above", "touching")
        assert caption_of(s, "action") == "the red small circle is touching the blue large square"

    def test_parse_round_trip(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            s = sample_scene(rng)
            rel = parse_caption(caption_of(s, "relation"))
            assert (rel["obj1"], rel["obj2"], rel["relation"]) == (s.obj1, s.obj2, s.relation)
            act = parse_caption(caption_of(s, "action"))
            assert act["action"] == s.action

    def test_unknown_template(self):
        with pytest.raises(ValueError):
            caption_of(sample_scene(np.random.default_rng(0)), "poem")


class TestFeatures:
    def test_noise_free_round_trip(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            s = sample_scene(rng)
            assert decode_features(render_features(s, 0.0)) == s

    def test_noisy_round_trip(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            s = sample_scene(rng)
            assert decode_features(render_features(s, 0.05, rng)) == s

    def test_left_and_right_differ_only_in_positions(self):
        o1, o2 = Obj("circle", "red", "small"), Obj("square", "blue", "large")
        a = render_features(Scene(o1, o2, "left_of", "pushing"), 0.0)
        b = render_features(Scene(o1, o2, "right_of", "pushing"), 0.0)
        diff = np.nonzero(a != b)[0]
        lo = 2 * WORLD.object_dim
        assert set(diff) <= set(range(lo, lo + 4)) and len(diff) > 0

    def test_golden_vector(self):
        s = sample_scene(np.random.default_rng(0))
        np.testing.assert_allclose(render_features(s, 0.05, np.random.default_rng(0)), GOLDEN["feature_seed0"], rtol=1e-15)

    def test_linear_probe_recovers_every_component(self):
        """Least-squares readout of each one-hot component from noise-free features."""
        rng = np.random.default_rng(4)
        scenes = [sample_scene(rng) for _ in range(300)]
        X = np.array([render_features(s, 0.0) for s in scenes])
        X1 = np.hstack([X, np.ones((len(X), 1))])
        targets = {
            "shape1": (lambda s: s.obj1.shape, WORLD.shapes),
            "color2": (lambda s: s.obj2.color, WORLD.colors),
            "size1": (lambda s: s.obj1.size, WORLD.sizes),
            "relation": (lambda s: s.relation, WORLD.relations),
            "action": (lambda s: s.action, WORLD.actions),
        }
        for name, (get, options) in targets.items():
            Y = np.array([[float(get(s) == o) for o in options] for s in scenes])
            coef, *_ = np.linalg.lstsq(X1, Y, rcond=None)
            pred = np.argmax(X1 @ coef, axis=1)
            assert np.array_equal(pred, np.argmax(Y, axis=1)), name

    def test_negative_sigma(self):
        with pytest.raises(ValueError):
            render_features(sample_scene(np.random.default_rng(0)), -0.1)


class TestDataset:
    def test_split_sizes(self):
        ds = make_dataset(WORLD, n=10, seed=0)
        assert (len(ds.train), len(ds.eval), len(ds.bench)) == (8, 2, 2)

    def test_golden_first_record(self):
        assert make_dataset(WORLD, n=10, seed=0).train[0].to_json() == GOLDEN["first_record_n10"]

    def test_no_scene_leakage(self, dataset):
        train = {r.scene.key() for r in dataset.train}
        held = {r.scene.key() for r in dataset.eval}
        assert not train & held
        assert len(train) == len(dataset.train)

    def test_relation_captions_carry_mirrored_alternative(self, dataset):
        for r in dataset.train:
            if " of " in r.caption or " above " in r.caption or " below " in r.caption:
                assert r.alt_captions == [caption_of(mirror(r.scene), "relation")]
            else:
                assert r.alt_captions == []

    def test_negatives_contradict_exactly_the_targeted_component(self, dataset):
        by_id = {r.id: r.scene for r in dataset.eval}
        seen = Counter()
        for item in dataset.bench:
            scene = by_id[item.id]
            pos = parse_caption(item.positive)
            for caption, t in item.negatives:
                neg = parse_caption(caption)
                seen[t] += 1
                if t is NegType.REL:
                    assert (neg["obj1"], neg["obj2"]) == (pos["obj2"], pos["obj1"])
                    assert {k: v for k, v in neg.items() if k not in ("obj1", "obj2")} == {
                        k: v for k, v in pos.items() if k not in ("obj1", "obj2")
                    }
                elif t is NegType.ACT:
                    assert neg["action"] != scene.action
                    assert (neg["obj1"], neg["obj2"]) == (scene.obj1, scene.obj2)
                else:
                    changed = [
                        (a, b) for a, b in ((neg["obj1"], scene.obj1), (neg["obj2"], scene.obj2)) if a != b
                    ]
                    assert len(changed) == 1
                    a, b = (asdict(x) for x in changed[0])
                    diff = {k for k in a if a[k] != b[k]}
                    assert diff == ({"shape"} if t is NegType.OBJ else diff & {"color", "size"}) and len(diff) == 1
        assert all(seen[t] > 0 for t in NegType)

    def test_byte_identical_under_seed(self):
        a = make_dataset(WORLD, n=50, seed=9)
        b = make_dataset(WORLD, n=50, seed=9)
        dump = lambda ds: "".join(json.dumps(r.to_json(), sort_keys=True) for r in ds.train + ds.eval)
        assert dump(a) == dump(b)
        assert [x.to_json() for x in a.bench] == [x.to_json() for x in b.bench]

    def test_record_json_round_trip(self, dataset):
        r = dataset.train[0]
        assert DatasetRecord.from_json(json.loads(json.dumps(r.to_json()))) == r

    def test_too_many_scenes(self):
        with pytest.raises(ValueError):
            make_dataset(WorldSpec(shapes=("circle",), colors=("red",), relations=("above",), actions=("pushing",)), n=3)
