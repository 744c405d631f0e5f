import numpy as np
import pytest

from attribrec import ingest
from attribrec.errors import DataError
from attribrec.ingest import ColumnMap, ItemAttributes, RawInteraction


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


ATTRS = [
    ItemAttributes("i1", (frozenset({"d1"}), frozenset({"a1"}))),
    ItemAttributes("i2", (frozenset({"d1"}), frozenset({"a2"}))),
    ItemAttributes("i3", (frozenset({"d2"}), frozenset({"a1", "a3"}))),
    ItemAttributes("i4", (frozenset({"d2"}), frozenset({"a2"}))),
]


class TestLoadInteractions:
    def test_direct_parse(self, tmp_path):
        path = write(tmp_path, "r.csv", "u1,i9,4.0\n")
        rows = ingest.load_interactions(path, ColumnMap())
        assert rows == [RawInteraction("u1", "i9", 4.0, None)]

    def test_empty_file_warns(self, tmp_path, caplog):
        path = write(tmp_path, "r.csv", "")
        with caplog.at_level("WARNING"):
            rows = ingest.load_interactions(path, ColumnMap())
        assert rows == []
        assert "no data rows" in caplog.text

    def test_malformed_rows_skipped_and_counted(self, tmp_path, caplog):
        path = write(tmp_path, "r.csv", "u1,i1,4\nu2,i2,notanumber\nu3,i3,5\n")
        with caplog.at_level("WARNING"):
            rows = ingest.load_interactions(path, ColumnMap())
        assert len(rows) == 2
        assert "skipped 1 malformed" in caplog.text

    def test_mostly_malformed_is_fatal(self, tmp_path):
        path = write(tmp_path, "r.csv", "u1|i1|4\nu2|i2|5\nu3,i3,5\n")
        with pytest.raises(DataError, match="column mapping"):
            ingest.load_interactions(path, ColumnMap())

    def test_unreadable_file_fatal(self, tmp_path):
        with pytest.raises(DataError):
            ingest.load_interactions(str(tmp_path / "missing.csv"), ColumnMap())

    def test_header_and_timestamp(self, tmp_path):
        path = write(tmp_path, "r.csv", "user,item,rating,ts\nu1,i1,4,100\nu1,i2,5,\n")
        rows = ingest.load_interactions(
            path, ColumnMap(timestamp=3, has_header=True)
        )
        assert rows[0].timestamp == 100
        assert rows[1].timestamp is None  # unparsable timestamp is missing, not malformed

    def test_nonfinite_rating_malformed(self, tmp_path, caplog):
        path = write(tmp_path, "r.csv", "u1,i1,nan\nu1,i2,4\nu2,i2,4\n")
        with caplog.at_level("WARNING"):
            rows = ingest.load_interactions(path, ColumnMap())
        assert len(rows) == 2


class TestLoadAttributes:
    def test_multivalued_fields(self, tmp_path):
        path = write(tmp_path, "a.csv", "i1,d1,a1|a2\ni2,d2,a3\n")
        records, names = ingest.load_attributes(path)
        assert names == ("field0", "field1")
        assert records[0].values == (frozenset({"d1"}), frozenset({"a1", "a2"}))

    def test_header_names_fields(self, tmp_path):
        path = write(tmp_path, "a.csv", "item,director,actors\ni1,d1,a1|a2\n")
        _, names = ingest.load_attributes(path, has_header=True)
        assert names == ("director", "actors")

    def test_inconsistent_row_fatal(self, tmp_path):
        path = write(tmp_path, "a.csv", "i1,d1,a1\ni2,d2\n")
        with pytest.raises(DataError):
            ingest.load_attributes(path)


class TestBinNumericFields:
    def test_quantile_bins_share_labels(self):
        attrs = [
            ItemAttributes(f"i{n}", (frozenset({str(float(n))}),)) for n in range(20)
        ]
        binned = ingest.bin_numeric_fields(attrs, [0], n_bins=4)
        labels = {next(iter(r.values[0])) for r in binned}
        assert labels <= {"bin0", "bin1", "bin2", "bin3"}
        assert len(labels) == 4

    def test_non_numeric_fatal(self):
        attrs = [ItemAttributes("i1", (frozenset({"abc"}),))]
        with pytest.raises(DataError, match="non-numeric"):
            ingest.bin_numeric_fields(attrs, [0])


def raw(user, item, rating, ts=None):
    return RawInteraction(user, item, rating, ts)


class TestFilterAndBinarize:
    def test_rating_threshold_strictly_greater(self):
        rows = [raw("u1", "i1", r) for r in (1.0, 2.0, 3.0)]
        rows += [raw("u1", "i2", 4.0), raw("u1", "i3", 5.0)]
        rows += [raw("u2", "i1", 4.0), raw("u2", "i2", 5.0)]
        ds = ingest.filter_and_binarize(rows, ATTRS, min_history=2, rating_threshold=3.0)
        # ratings {4,5} kept, {1,2,3} dropped: u1 keeps only i2,i3
        u1 = ds.users.index("u1")
        assert [ds.items[i] for i in ds.positives[u1]] == ["i2", "i3"]

    def test_short_history_user_removed(self):
        rows = [raw("u1", f"i{n}", 5.0) for n in (1, 2, 3, 4)]
        rows += [raw("u2", f"i{n}", 5.0) for n in (1, 2, 3, 4)]
        ds = ingest.filter_and_binarize(rows, ATTRS, min_history=4)
        assert set(ds.users) == {"u1", "u2"}
        with pytest.raises(DataError):
            # 4 positives, min_history 5: all users removed, empty dataset is fatal
            ingest.filter_and_binarize(rows, ATTRS, min_history=5)

    def test_duplicates_collapse(self):
        rows = [raw("u1", "i1", 5.0), raw("u1", "i1", 4.0), raw("u1", "i2", 5.0)]
        ds = ingest.filter_and_binarize(rows, ATTRS, min_history=2)
        assert len(ds.positives[0]) == 2

    def test_missing_attribute_item_cascades_to_user_removal(self):
        # u2's history only stays >= min_history through iX, which has no
        # attribute record; dropping iX must drop u2 in the next pass.
        rows = [raw("u1", "i1", 5.0), raw("u1", "i2", 5.0), raw("u1", "i3", 5.0)]
        rows += [raw("u2", "i4", 5.0), raw("u2", "iX", 5.0), raw("u2", "i1", 4.0)]
        rows += [raw("u3", "i1", 5.0), raw("u3", "i2", 5.0), raw("u3", "i4", 5.0)]
        ds = ingest.filter_and_binarize(rows, ATTRS, min_history=3)
        assert set(ds.users) == {"u1", "u3"}
        # brute-force fixed-point oracle over (user, item) pairs
        pairs = {(r.user_id, r.item_id) for r in rows if r.rating > 3.0}
        pairs = {(u, i) for u, i in pairs if i in {a.item_id for a in ATTRS}}
        while True:
            by_user = {}
            for u, i in pairs:
                by_user.setdefault(u, set()).add(i)
            keep_users = {u for u, h in by_user.items() if len(h) >= 3}
            new_pairs = {(u, i) for u, i in pairs if u in keep_users}
            if new_pairs == pairs:
                break
            pairs = new_pairs
        assert {u for u, _ in pairs} == set(ds.users)
        assert {i for _, i in pairs} == set(ds.items)

    def test_filtering_is_a_fixed_point(self):
        rows = [raw(f"u{u}", f"i{n}", 5.0) for u in range(2) for n in (1, 2, 3)]
        ds = ingest.filter_and_binarize(rows, ATTRS, min_history=3)
        rows2 = [
            raw(ds.users[u], ds.items[i], 5.0)
            for u in range(ds.n_users)
            for i in ds.positives[u]
        ]
        attrs2 = [
            ItemAttributes(ds.items[i], ds.attributes[i]) for i in range(ds.n_items)
        ]
        ds2 = ingest.filter_and_binarize(rows2, attrs2, min_history=3)
        assert ds2.users == ds.users
        assert ds2.items == ds.items
        assert ds2.positives == ds.positives

    def test_empty_after_filter_reports_counts(self):
        rows = [raw("u1", "i1", 1.0)]
        with pytest.raises(DataError, match="after_rating_threshold"):
            ingest.filter_and_binarize(rows, ATTRS)


class TestLeaveOneOutSplit:
    def base(self, timestamps=None):
        rows = []
        ts = {("u1", "i1"): 1, ("u1", "i2"): 5, ("u1", "i3"): 3}
        for u in ("u1", "u2"):
            for i in ("i1", "i2", "i3"):
                stamp = ts[(u, i)] if timestamps and u == "u1" else None
                rows.append(raw(u, i, 5.0, stamp))
        return ingest.filter_and_binarize(rows, ATTRS, min_history=3)

    def test_deterministic_for_seed(self):
        ds = self.base()
        a = ingest.leave_one_out_split(ds, 7)
        b = ingest.leave_one_out_split(ds, 7)
        assert a.heldout == b.heldout
        assert a.positives == b.positives

    def test_latest_timestamp_rule(self):
        ds = self.base(timestamps=True)
        split = ingest.leave_one_out_split(ds, 0)
        u1 = split.users.index("u1")
        assert split.items[split.heldout[u1]] == "i2"  # ts 5 is latest

    def test_heldout_disjoint_from_training(self):
        split = ingest.leave_one_out_split(self.base(), 3)
        for u in range(split.n_users):
            assert split.heldout[u] not in split.positives[u]
            assert len(split.positives[u]) == 2

    def test_single_positive_user_fatal(self, tiny_fixture=None):
        from conftest import make_dataset

        ds = make_dataset([(0, 1), (2,)], [[{"x"}]] * 3)
        with pytest.raises(DataError, match="leave-one-out"):
            ingest.leave_one_out_split(ds, 0)

    def test_heldout_count_equals_user_count(self):
        split = ingest.leave_one_out_split(self.base(), 1)
        assert len(split.heldout) == split.n_users


class TestDatasetStats:
    def test_hand_countable(self):
        rows = [raw(f"u{u}", f"i{n}", 5.0) for u in range(2) for n in (1, 2, 3)]
        ds = ingest.filter_and_binarize(rows, ATTRS, min_history=3)
        assert ingest.dataset_stats(ds).as_tuple() == (2, 3, 6, 2)

    def test_actions_include_heldout(self):
        rows = [raw(f"u{u}", f"i{n}", 5.0) for u in range(2) for n in (1, 2, 3)]
        ds = ingest.filter_and_binarize(rows, ATTRS, min_history=3)
        split = ingest.leave_one_out_split(ds, 0)
        assert ingest.dataset_stats(split).as_tuple() == (2, 3, 6, 2)


class TestManifest:
    def test_round_trip_byte_exact(self, tmp_path):
        rows = [
            raw(f"u{u}", f"i{n}", 5.0, ts=10 * u + n)
            for u in range(2)
            for n in (1, 2, 3)
        ]
        ds = ingest.leave_one_out_split(
            ingest.filter_and_binarize(rows, ATTRS, min_history=3), seed=11
        )
        p1 = tmp_path / "m1.json"
        p2 = tmp_path / "m2.json"
        ingest.save_manifest(ds, str(p1))
        loaded = ingest.load_manifest(str(p1))
        assert loaded.users == ds.users
        assert loaded.items == ds.items
        assert loaded.positives == ds.positives
        assert loaded.attributes == ds.attributes
        assert loaded.heldout == ds.heldout
        assert loaded.timestamps == ds.timestamps
        assert loaded.split_seed == ds.split_seed
        ingest.save_manifest(loaded, str(p2))
        assert p1.read_bytes() == p2.read_bytes()

    def test_schema_version_checked(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text('{"schema_version": 99}')
        with pytest.raises(DataError, match="schema_version"):
            ingest.load_manifest(str(p))
