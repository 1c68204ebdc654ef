import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dpf.data import (DataFormatError, InteractionTensor, RawEvent, TimeBucketing, binarize,
                      bucket_events, collapse_steps, dumps_tensor, load_interactions,
                      loads_tensor, read_events_tsv, rolling_split, save_tensor,
                      write_events_tsv)


def _tensor(entries, N=3, M=3, T=3):
    e = np.array(entries, dtype=np.int64).reshape(-1, 4)
    return InteractionTensor(N, M, T, e[:, 0], e[:, 1], e[:, 2], e[:, 3])


class TestBucketing:
    def test_floor_division(self):
        b = TimeBucketing(0, 100)
        assert [b.step_index(ts) for ts in (0, 100, 200)] == [0, 1, 2]
        assert b.step_index(199) == 1

    def test_origin_shift(self):
        assert TimeBucketing(50, 100).step_index(149) == 0

    def test_before_origin_rejected(self):
        with pytest.raises(ValueError, match="precedes"):
            TimeBucketing(10, 5).step_index(9)

    def test_bad_granularity(self):
        with pytest.raises(ValueError):
            TimeBucketing(0, 0)


class TestBucketEvents:
    def test_steps_from_timestamps(self):
        ev = [RawEvent("a", "x", 0), RawEvent("a", "y", 100), RawEvent("b", "x", 200)]
        t = bucket_events(ev, TimeBucketing(0, 100))
        assert t.n_steps == 3
        assert sorted(t.steps.tolist()) == [0, 1, 2]

    def test_same_bucket_summed(self):
        ev = [RawEvent("a", "x", 10), RawEvent("a", "x", 20)]
        t = bucket_events(ev, TimeBucketing(0, 100))
        assert t.nnz == 1
        assert t.counts.tolist() == [2]

    def test_empty_interior_steps_kept(self):
        ev = [RawEvent("a", "x", 0), RawEvent("a", "x", 4)]
        t = bucket_events(ev, TimeBucketing(0, 1))
        assert t.n_steps == 5
        assert t.nnz_per_step.tolist() == [1, 0, 0, 0, 1]

    def test_id_maps(self):
        ev = [RawEvent("u2", "i9", 0), RawEvent("u1", "i9", 0), RawEvent("u2", "i3", 0)]
        t = bucket_events(ev, TimeBucketing(0, 1))
        assert t.user_ids == ["u2", "u1"]
        assert t.item_ids == ["i9", "i3"]
        assert t.user_index("u1") == 1
        with pytest.raises(KeyError):
            t.item_index("nope")

    def test_empty_events(self):
        with pytest.raises(ValueError):
            bucket_events([], TimeBucketing(0, 1))

    def test_timestamp_before_origin(self):
        with pytest.raises(ValueError):
            bucket_events([RawEvent("a", "x", 5)], TimeBucketing(10, 1))

    def test_negative_count_rejected(self):
        with pytest.raises(ValueError):
            RawEvent("a", "x", 0, -1)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 4), st.integers(0, 4), st.integers(0, 50),
                              st.integers(0, 5)), min_size=1, max_size=40))
    def test_counts_conserved(self, rows):
        ev = [RawEvent(f"u{a}", f"i{b}", ts, c) for a, b, ts, c in rows]
        t = bucket_events(ev, TimeBucketing(0, 7))
        assert t.counts.sum() == sum(c for *_, c in rows)
        dense = np.zeros((t.n_users, t.n_items, t.n_steps), dtype=np.int64)
        for e in ev:
            dense[t.user_index(e.user_id), t.item_index(e.item_id), e.timestamp // 7] += e.count
        np.testing.assert_array_equal(t.dense(), dense)


class TestTensor:
    def test_canonical_order_and_duplicates(self):
        t = _tensor([[1, 0, 1, 1], [0, 2, 0, 2], [1, 0, 1, 3]])
        assert t.steps.tolist() == [0, 1]
        assert t.counts.tolist() == [2, 4]

    def test_out_of_range_index(self):
        with pytest.raises(ValueError, match="item index"):
            _tensor([[0, 3, 0, 1]])

    def test_zero_count_rejected(self):
        with pytest.raises(ValueError):
            _tensor([[0, 0, 0, 0]])

    def test_transpose(self):
        t = _tensor([[0, 1, 2, 1], [2, 0, 1, 5]], N=3, M=2)
        np.testing.assert_array_equal(t.transpose().dense(), t.dense().transpose(1, 0, 2))


class TestBinarize:
    def test_counts_to_one(self):
        t = binarize(_tensor([[0, 0, 0, 3], [1, 1, 1, 1], [2, 2, 2, 7]]))
        assert t.counts.tolist() == [1, 1, 1]

    def test_empty(self):
        assert binarize(_tensor([])).nnz == 0

    def test_pattern_preserved(self):
        t = _tensor([[0, 0, 0, 3], [1, 2, 0, 2], [2, 2, 2, 7]])
        b = binarize(t)
        np.testing.assert_array_equal(b.nnz_per_step, t.nnz_per_step)
        np.testing.assert_array_equal(b.dense() > 0, t.dense() > 0)


class TestRollingSplit:
    def test_definition(self):
        t = _tensor([[0, 0, 0, 1], [1, 1, 1, 1], [0, 1, 2, 1], [1, 0, 2, 2]])
        s = rolling_split(t, 2)
        assert s.train.n_steps == 2
        assert sorted(s.train.steps.tolist()) == [0, 1]
        assert s.test.n_steps == 1
        assert s.test.nnz == 2
        assert s.test.counts.tolist() == [1, 2]

    def test_cold_user_dropped(self):
        t = _tensor([[0, 0, 0, 1], [2, 0, 1, 1], [0, 0, 1, 1]])
        s = rolling_split(t, 1)
        assert s.dropped_users == 1
        assert s.dropped_entries == 1
        assert s.test.users.tolist() == [0]

    def test_cold_item_dropped(self):
        t = _tensor([[0, 0, 0, 1], [0, 2, 1, 1]])
        s = rolling_split(t, 1)
        assert (s.dropped_items, s.dropped_users, s.test.nnz) == (1, 0, 0)

    def test_first_step_degenerates_to_static(self):
        t = _tensor([[0, 0, 0, 1], [1, 1, 0, 1], [0, 1, 1, 1], [1, 0, 2, 1]])
        s = rolling_split(t, 1)
        assert s.train.n_steps == 1
        assert sorted(zip(s.train.users.tolist(), s.train.items.tolist())) == [(0, 0), (1, 1)]

    def test_repeats_kept(self):
        t = _tensor([[0, 0, 0, 1], [0, 0, 1, 1]])
        assert rolling_split(t, 1).test.nnz == 1

    @pytest.mark.parametrize("step", [0, 3, -1])
    def test_out_of_range(self, step):
        with pytest.raises(ValueError):
            rolling_split(_tensor([[0, 0, 0, 1]]), step)

    def test_partition(self):
        rng = np.random.default_rng(1)
        e = np.column_stack([rng.integers(0, 4, 60), rng.integers(0, 4, 60),
                             rng.integers(0, 5, 60), rng.integers(1, 3, 60)])
        t = _tensor(e, N=4, M=4, T=5)
        s = rolling_split(t, 3)
        assert s.train.nnz + s.test.nnz + s.dropped_entries + (t.steps > 3).sum() == t.nnz

    def test_collapse(self):
        t = _tensor([[0, 0, 0, 1], [0, 0, 2, 2], [1, 1, 1, 1]])
        c = collapse_steps(t)
        assert c.n_steps == 1
        np.testing.assert_array_equal(c.dense()[:, :, 0], t.dense().sum(axis=2))


class TestFiles:
    def test_tsv_roundtrip_with_header(self, tmp_path):
        ev = [RawEvent("a", "x", 3, 2), RawEvent("b", "y", 9, 1)]
        p = tmp_path / "ev.tsv"
        write_events_tsv(ev, p)
        assert read_events_tsv(p) == ev

    def test_tsv_without_header_and_default_count(self, tmp_path):
        p = tmp_path / "ev.tsv"
        p.write_text("a\tx\t5\n\nb\ty\t6\t3\n")
        assert read_events_tsv(p) == [RawEvent("a", "x", 5, 1), RawEvent("b", "y", 6, 3)]

    def test_malformed_line_reports_number(self, tmp_path):
        p = tmp_path / "ev.tsv"
        p.write_text("user\titem\tts\na\tx\t5\nb\ty\tlater\n")
        with pytest.raises(DataFormatError, match=":3:"):
            read_events_tsv(p)

    def test_wrong_field_count(self, tmp_path):
        p = tmp_path / "ev.tsv"
        p.write_text("a\tx\n")
        with pytest.raises(DataFormatError, match=":1:"):
            read_events_tsv(p)

    def test_tensor_text_roundtrip(self):
        t = _tensor([[0, 1, 2, 4], [2, 2, 0, 1]])
        text = dumps_tensor(t)
        back = loads_tensor(text)
        assert dumps_tensor(back) == text
        np.testing.assert_array_equal(back.dense(), t.dense())

    def test_tensor_truncated(self):
        text = dumps_tensor(_tensor([[0, 1, 2, 4]]))
        with pytest.raises(DataFormatError):
            loads_tensor(text.rsplit("\n", 2)[0])

    def test_load_interactions_detects_format(self, tmp_path):
        t = _tensor([[0, 1, 2, 4], [2, 2, 0, 1]])
        save_tensor(t, tmp_path / "t.txt")
        got = load_interactions(tmp_path / "t.txt", binary=False)
        np.testing.assert_array_equal(got.dense(), t.dense())
        ev = tmp_path / "ev.tsv"
        ev.write_text("a\tx\t100\t3\nb\tx\t130\n")
        got = load_interactions(ev, granularity=10)
        assert got.n_steps == 4
        assert got.counts.tolist() == [1, 1]
