import numpy as np
import pytest

from leakimpact.errors import SchemaError
from leakimpact.eventlog import EventLog, InteractionEvent
from leakimpact.ranker import Categorical, Dense, FeatureSchema, ItemList, ItemRef, featurize, stable_hash


def _log(n=4):
    ctx = [(("dev", "ios"),), (), (("dev", "web"),), ()][:n]
    return EventLog(np.arange(n), np.arange(10, 10 + n), np.arange(n), np.arange(n) % 2, ctx)


class TestSchema:
    def test_defaults(self):
        s = FeatureSchema()
        assert s.slots == ("user_id", "item_id_weight", "item_id_embedding")
        assert s.is_baseline and s.uses_embeddings

    @pytest.mark.parametrize("slots", [("bogus",), ("leak:",), ("user_id", "user_id"), ("ctx:a",)])
    def test_bad_slots(self, slots):
        with pytest.raises(SchemaError):
            FeatureSchema(slots=slots)

    def test_hash_dim_power_of_two(self):
        with pytest.raises(SchemaError):
            FeatureSchema(hash_dim=1000)

    def test_embed_dim_range(self):
        with pytest.raises(SchemaError):
            FeatureSchema(embed_dim=100)

    def test_dict_round_trip(self):
        s = FeatureSchema(slots=("user_id", "leak:x", "dense:y"))
        assert FeatureSchema.from_dict(s.to_dict()) == s
        assert s.leak_slots == ("leak:x",)
        assert not s.is_baseline

    def test_with_without(self):
        s = FeatureSchema().with_slots("leak:a")
        assert s.without_slots("leak:a") == FeatureSchema()


class TestFeaturize:
    def test_context_missing_marker(self):
        s = FeatureSchema(slots=("context:dev",))
        fm = featurize(_log(), s)
        H = s.hash_dim
        assert fm.cat_idx[:, 0].tolist() == [stable_hash("context:dev", "ios", H),
                                             stable_hash("context:dev", None, H),
                                             stable_hash("context:dev", "web", H),
                                             stable_hash("context:dev", None, H)]

    def test_leak_values_on_baseline_rejected(self):
        with pytest.raises(SchemaError, match="not in schema"):
            featurize(_log(), FeatureSchema(), leak_values={"leak:x": [1, 2, 3, 4]})

    def test_missing_leak_values(self):
        with pytest.raises(SchemaError, match="value map absent"):
            featurize(_log(), FeatureSchema().with_slots("leak:x"))

    def test_length_mismatch(self):
        with pytest.raises(SchemaError, match="values for 4 events"):
            featurize(_log(), FeatureSchema().with_slots("leak:x"), {"leak:x": [1, 2]})

    def test_categorical_leak_hashed(self):
        s = FeatureSchema(slots=("leak:x",))
        fm = featurize(_log(), s, {"leak:x": Categorical(["a", None, "a", "b"])})
        col = fm.cat_idx[:, 0]
        assert col[0] == col[2] != col[3]
        assert col[1] == stable_hash("leak:x", None, s.hash_dim)

    def test_item_ref_joins_user_side(self):
        s = FeatureSchema(slots=("user_id", "item_id_embedding", "leak:next"))
        fm = featurize(_log(), s, {"leak:next": ItemRef([11, -1, 12, 13])})
        assert fm.user_refs[:, 0].tolist() == [11, -1, 12, 13]
        # mean pooling: user embedding and reference share the user side
        np.testing.assert_allclose(fm.user_scale, [0.5, 1.0, 0.5, 0.5])
        np.testing.assert_allclose(fm.user_ref_w[:, 0], [0.5, 0.0, 0.5, 0.5])

    def test_item_list_weights(self):
        s = FeatureSchema(slots=("item_id_embedding", "leak:sim"))
        lists = np.array([[1, 2, -1], [-1, -1, -1], [3, 4, 5], [6, -1, -1]])
        fm = featurize(_log(), s, {"leak:sim": ItemList(lists)})
        # each list is mean-pooled into its own projection; the item embedding keeps weight 1
        np.testing.assert_allclose(fm.item_scale, [1.0, 1.0, 1.0, 1.0])
        np.testing.assert_allclose(fm.item_ref_w[0], [0.5, 0.5, 0.0])
        np.testing.assert_allclose(fm.item_ref_w[2], [1 / 3, 1 / 3, 1 / 3])
        assert fm.list_layout == ("leak:sim",)
        assert fm.item_ref_list.tolist() == [0, 0, 0]
        np.testing.assert_allclose(fm.cat_val[0], [0.5, 0.5, 0.0])
        # an empty list hashes the missing marker once
        assert fm.cat_idx[1].tolist() == [stable_hash("leak:sim", None, s.hash_dim), -1, -1]

    def test_dense_layout(self):
        s = FeatureSchema(slots=("dense:a", "dense:b"))
        fm = featurize(_log(), s, side_values={"dense:a": Dense(np.ones((4, 2))),
                                                "dense:b": Dense(np.zeros(4))})
        assert fm.dense.shape == (4, 3)
        assert fm.dense_layout == (("dense:a", 2), ("dense:b", 1))

    def test_single_event(self):
        e = InteractionEvent(1, 2, 3, 1, (("dev", "ios"),))
        s = FeatureSchema(slots=("user_id", "context:dev", "leak:x"))
        fm = featurize(e, s, {"leak:x": "v"})
        assert len(fm) == 1
        assert fm.cat_idx[0, 2] == stable_hash("leak:x", "v", s.hash_dim)

    def test_take(self):
        fm = featurize(_log(), FeatureSchema())
        sub = fm.take(np.array([2, 0]))
        assert sub.user_id.tolist() == [2, 0]
        assert np.array_equal(sub.cat_idx, fm.cat_idx[[2, 0]])
