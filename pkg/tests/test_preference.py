import math

import pytest
from hypothesis import given, settings, strategies as st

from msr.errors import ConfigError, DependencyError, SequencingError
from msr.preference import Block, PreferenceEngine, segment_blocks
from msr.summarizer import ItemSummary

from conftest import mock_gateway


def summaries_for(item_ids):
    return {
        iid: ItemSummary(
            item_id=iid,
            mode="text_only",
            text_summary=f"summary of {iid}",
            unified_summary=f"unified summary of {iid} with trait {iid}x",
        )
        for iid in item_ids
    }


class TestSegmentBlocks:
    def test_remainder_forms_final_short_block(self):
        blocks = segment_blocks([f"i{n}" for n in range(7)], 3)
        assert [len(b.item_ids) for b in blocks] == [3, 3, 1]
        assert [b.index for b in blocks] == [0, 1, 2]

    def test_exact_fit_is_one_block(self):
        blocks = segment_blocks(["a", "b", "c"], 3)
        assert len(blocks) == 1

    def test_empty_history_errors(self):
        with pytest.raises(ConfigError):
            segment_blocks([], 3)

    @settings(max_examples=60, deadline=None)
    @given(n=st.integers(1, 40), block_size=st.integers(1, 10))
    def test_concatenation_recovers_history(self, n, block_size):
        history = [f"i{k}" for k in range(n)]
        blocks = segment_blocks(history, block_size)
        assert len(blocks) == math.ceil(n / block_size)
        flattened = [iid for b in blocks for iid in b.item_ids]
        assert flattened == history
        assert all(len(b.item_ids) == block_size for b in blocks[:-1])
        assert 1 <= len(blocks[-1].item_ids) <= block_size


class TestInfer:
    def make_engine(self, tmp_path, **kwargs):
        gw, backend = mock_gateway(tmp_path, cache=False)
        return PreferenceEngine(gw, **kwargs), backend

    def test_initial_deterministic(self, tmp_path):
        engine, _ = self.make_engine(tmp_path)
        block = Block(0, ("a", "b"))
        s = summaries_for(["a", "b"])
        st1 = engine.infer_initial("u", block, s)
        st2 = engine.infer_initial("u", block, s)
        assert st1 == st2
        assert st1.block_index == 0
        assert st1.summary

    def test_single_item_block(self, tmp_path):
        engine, _ = self.make_engine(tmp_path)
        state = engine.infer_initial("u", Block(0, ("a",)), summaries_for(["a"]))
        assert state.summary

    def test_missing_summary_names_item(self, tmp_path):
        engine, _ = self.make_engine(tmp_path)
        with pytest.raises(DependencyError, match="b"):
            engine.infer_initial("u", Block(0, ("a", "b")), summaries_for(["a"]))

    def test_initial_requires_block_zero(self, tmp_path):
        engine, _ = self.make_engine(tmp_path)
        with pytest.raises(SequencingError):
            engine.infer_initial("u", Block(1, ("a",)), summaries_for(["a"]))

    def test_update_sequencing(self, tmp_path):
        engine, _ = self.make_engine(tmp_path)
        s = summaries_for(["a", "b", "c", "d", "e", "f"])
        state0 = engine.infer_initial("u", Block(0, ("a", "b")), s)
        state1 = engine.infer_update(state0, Block(1, ("c", "d")), s)
        state2 = engine.infer_update(state1, Block(2, ("e", "f")), s)
        assert state2.block_index == 2
        # prev states not mutated
        assert state0.block_index == 0
        assert state1.block_index == 1

    def test_skipping_a_block_errors(self, tmp_path):
        engine, _ = self.make_engine(tmp_path)
        s = summaries_for(["a", "b", "c"])
        state0 = engine.infer_initial("u", Block(0, ("a",)), s)
        with pytest.raises(SequencingError):
            engine.infer_update(state0, Block(2, ("c",)), s)

    def test_block_order_permutation_changes_final_summary(self, tmp_path):
        engine, _ = self.make_engine(tmp_path)
        items = [f"i{n}" for n in range(6)]
        s = summaries_for(items)
        forward = engine.infer_preference("u", items, s, mode="recurrent", block_size=3)
        backward = engine.infer_preference("u", list(reversed(items)), s, mode="recurrent", block_size=3)
        assert forward.summary != backward.summary


class TestCallCounts:
    @pytest.mark.parametrize("n", range(1, 11))
    @pytest.mark.parametrize("block_size", [1, 2, 3, 5])
    def test_recurrent_issues_ceil_n_over_b_calls(self, tmp_path, n, block_size):
        gw, backend = mock_gateway(tmp_path, cache=False)
        engine = PreferenceEngine(gw)
        items = [f"i{k}" for k in range(n)]
        engine.infer_preference("u", items, summaries_for(items), "recurrent", block_size)
        assert backend.call_count == math.ceil(n / block_size)

    def test_direct_is_one_call(self, tmp_path):
        gw, backend = mock_gateway(tmp_path, cache=False)
        engine = PreferenceEngine(gw)
        items = [f"i{k}" for k in range(7)]
        engine.infer_preference("u", items, summaries_for(items), "direct", 3)
        assert backend.call_count == 1

    def test_history_shorter_than_block_is_initial_only(self, tmp_path):
        gw, backend = mock_gateway(tmp_path, cache=False)
        engine = PreferenceEngine(gw)
        items = ["a", "b"]
        state = engine.infer_preference("u", items, summaries_for(items), "recurrent", 3)
        assert backend.call_count == 1
        assert state.block_index == 0


class TestBudget:
    def test_overflow_triggers_one_compression_call(self, tmp_path, caplog):
        gw, backend = mock_gateway(tmp_path, cache=False)
        # tiny budget so any update prompt overflows
        engine = PreferenceEngine(gw, max_tokens=30, chars_per_token=4.0)
        items = [f"i{k}" for k in range(6)]
        s = summaries_for(items)
        import logging

        with caplog.at_level(logging.INFO, logger="msr.preference"):
            engine.infer_preference("u", items, s, "recurrent", 3)
        # initial + compress + update = 3 calls for 2 blocks
        assert backend.call_count == 3
        assert any("compressing" in r.message for r in caplog.records)

    def test_no_compression_under_generous_budget(self, tmp_path):
        gw, backend = mock_gateway(tmp_path, cache=False)
        engine = PreferenceEngine(gw, max_tokens=100000)
        items = [f"i{k}" for k in range(6)]
        engine.infer_preference("u", items, summaries_for(items), "recurrent", 3)
        assert backend.call_count == 2
