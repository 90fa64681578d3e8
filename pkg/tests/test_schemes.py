import numpy as np
import pytest

from fedlora.lora import GlobalLora, LoraAdapter, effective_delta, init_adapter, rank1_component
from fedlora.schemes import (
    ClientCapability,
    ClientPlan,
    UploadPayload,
    apply_freezing,
    apply_truncation,
    extract_upload,
    make_plan,
    selected_count,
    topk_indices,
    trained_count,
)


def sort_oracle(scores, k):
    """Full-sort reference: rank by score descending, index ascending."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    return tuple(sorted(order[:k]))


def global_of(adapter):
    return GlobalLora(adapter=adapter)


class TestTopK:
    def test_basic_order_statistic(self):
        assert topk_indices([3.0, 1.0, 2.0], 2) == (0, 2)

    def test_ties_break_to_lowest_index(self):
        assert topk_indices([1.0, 1.0, 1.0], 2) == (0, 1)

    def test_matches_sort_oracle_on_random_lists(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            n = int(rng.integers(1, 17))
            # Draw from a small value set to force plenty of ties.
            scores = rng.choice([0.0, 0.5, 1.0, 2.0], size=n)
            k = int(rng.integers(1, n + 1))
            assert topk_indices(scores, k) == sort_oracle(list(scores), k)

    @pytest.mark.parametrize("k", [0, 4, -1])
    def test_k_out_of_range(self, k):
        with pytest.raises(ValueError):
            topk_indices([1.0, 2.0, 3.0], k)


class TestTrainedCount:
    @pytest.mark.parametrize("alpha,expected", [(0.875, 2), (0.75, 4), (0.0, 16)])
    def test_reference_ratios(self, alpha, expected):
        assert trained_count(alpha, 16) == expected

    def test_clamped_to_one(self):
        assert trained_count(0.99, 16) == 1

    def test_rounds_half_up(self):
        assert trained_count(0.5, 5) == 3  # 2.5 rounds up

    def test_bad_alpha_rejected(self):
        with pytest.raises(ValueError):
            trained_count(1.0, 16)


class TestMakePlan:
    def test_zero_freeze_ratio_selects_everything(self):
        cap = ClientCapability(mode="freezing", client_id=0, freeze_ratio=0.0)
        plan = make_plan(cap, np.arange(4.0), 4)
        assert plan.selected == (0, 1, 2, 3)
        assert plan.frozen == ()

    def test_full_rank_truncation_selects_everything(self):
        cap = ClientCapability(mode="truncation", client_id=0, rank=4)
        plan = make_plan(cap, np.zeros(4), 4)
        assert plan.selected == (0, 1, 2, 3)

    def test_hand_example(self):
        cap = ClientCapability(mode="truncation", client_id=1, rank=2)
        plan = make_plan(cap, [5.0, 1.0, 4.0, 2.0], 4)
        assert plan.selected == (0, 2)
        assert plan.frozen == (1, 3)
        assert plan.mode == "truncation"

    def test_selected_count_per_mode(self):
        assert selected_count(ClientCapability(mode="truncation", rank=3), 8) == 3
        assert selected_count(ClientCapability(mode="freezing", freeze_ratio=0.75), 8) == 2
        assert selected_count(ClientCapability(mode="homogeneous"), 8) == 8

    def test_score_length_mismatch_rejected(self):
        cap = ClientCapability(mode="truncation", client_id=0, rank=2)
        with pytest.raises(ValueError):
            make_plan(cap, np.zeros(3), 4)

    def test_capability_mode_consistency_enforced(self):
        with pytest.raises(ValueError):
            ClientCapability(mode="truncation", client_id=0, freeze_ratio=0.5)
        with pytest.raises(ValueError):
            ClientCapability(mode="freezing", client_id=0, rank=2)
        with pytest.raises(ValueError):
            ClientCapability(mode="homogeneous", client_id=0, rank=2)


class TestApplyTruncation:
    def test_identity_truncation_equals_global(self):
        adapter = init_adapter(4, 5, 3, seed=0, scale=1.5)
        plan = ClientPlan(client_id=0, selected=(0, 1, 2), frozen=(), mode="truncation")
        sliced = apply_truncation(global_of(adapter), plan)
        assert np.array_equal(sliced.b, adapter.b)
        assert np.array_equal(sliced.a, adapter.a)
        assert sliced.scale == adapter.scale

    def test_single_index_slice(self):
        rng = np.random.default_rng(1)
        adapter = LoraAdapter(b=rng.standard_normal((3, 2)), a=rng.standard_normal((2, 4)), rank=2)
        plan = ClientPlan(client_id=0, selected=(1,), frozen=(0,), mode="truncation")
        sliced = apply_truncation(global_of(adapter), plan)
        assert sliced.rank == 1
        assert np.array_equal(sliced.b[:, 0], adapter.b[:, 1])
        assert np.array_equal(sliced.a[0, :], adapter.a[1, :])

    def test_delta_equals_selected_outer_products(self):
        rng = np.random.default_rng(2)
        adapter = LoraAdapter(
            b=rng.standard_normal((5, 4)), a=rng.standard_normal((4, 6)), rank=4, scale=2.0
        )
        plan = ClientPlan(client_id=0, selected=(0, 2), frozen=(1, 3), mode="truncation")
        sliced = apply_truncation(global_of(adapter), plan)
        expected = np.zeros((5, 6))
        for i in plan.selected:
            b_col, a_row = rank1_component(adapter, i)
            expected += adapter.scale * np.outer(b_col, a_row)
        np.testing.assert_allclose(effective_delta(sliced), expected, atol=1e-12)

    def test_reconstruction_loss_equals_dropped_mass(self):
        rng = np.random.default_rng(3)
        adapter = LoraAdapter(
            b=rng.standard_normal((4, 3)), a=rng.standard_normal((3, 5)), rank=3, scale=1.3
        )
        plan = ClientPlan(client_id=0, selected=(1,), frozen=(0, 2), mode="truncation")
        sliced = apply_truncation(global_of(adapter), plan)
        loss = np.linalg.norm(effective_delta(adapter) - effective_delta(sliced))
        dropped = np.zeros((4, 5))
        for i in plan.frozen:
            b_col, a_row = rank1_component(adapter, i)
            dropped += adapter.scale * np.outer(b_col, a_row)
        assert loss == pytest.approx(np.linalg.norm(dropped), rel=1e-12)

    def test_wrong_mode_rejected(self):
        adapter = init_adapter(4, 5, 3, seed=0)
        plan = ClientPlan(client_id=0, selected=(0,), frozen=(1, 2), mode="freezing")
        with pytest.raises(ValueError):
            apply_truncation(global_of(adapter), plan)


class TestApplyFreezing:
    def test_no_frozen_indices_gives_all_true_mask(self):
        adapter = init_adapter(3, 4, 2, seed=0)
        plan = ClientPlan(client_id=0, selected=(0, 1), frozen=(), mode="freezing")
        _, mask = apply_freezing(global_of(adapter), plan)
        assert mask.all()

    def test_values_identical_regardless_of_mask(self):
        rng = np.random.default_rng(4)
        adapter = LoraAdapter(b=rng.standard_normal((3, 4)), a=rng.standard_normal((4, 5)), rank=4)
        plan = ClientPlan(client_id=0, selected=(2,), frozen=(0, 1, 3), mode="freezing")
        local, mask = apply_freezing(global_of(adapter), plan)
        assert np.array_equal(local.b, adapter.b)
        assert np.array_equal(local.a, adapter.a)
        assert list(np.nonzero(mask)[0]) == [2]

    def test_mask_count_matches_trained_count(self):
        scores = np.arange(16.0)
        for alpha in (0.875, 0.75, 0.0):
            cap = ClientCapability(mode="freezing", client_id=0, freeze_ratio=alpha)
            plan = make_plan(cap, scores, 16)
            adapter = init_adapter(6, 8, 16, seed=1)
            _, mask = apply_freezing(global_of(adapter), plan)
            assert int(mask.sum()) == trained_count(alpha, 16)


class TestExtractUpload:
    def test_freezing_with_all_selected_uploads_whole_adapter(self):
        rng = np.random.default_rng(5)
        adapter = LoraAdapter(b=rng.standard_normal((3, 2)), a=rng.standard_normal((2, 4)), rank=2)
        plan = ClientPlan(client_id=7, selected=(0, 1), frozen=(), mode="freezing")
        payload = extract_upload(adapter, plan)
        assert np.array_equal(payload.b_cols, adapter.b)
        assert np.array_equal(payload.a_rows, adapter.a)

    def test_zero_adapter_has_zero_norm(self):
        adapter = init_adapter(3, 4, 2, seed=0)
        plan = ClientPlan(client_id=0, selected=(0, 1), frozen=(), mode="truncation")
        assert extract_upload(adapter, plan).norm_z == 0.0

    def test_norm_matches_frobenius_oracle(self):
        rng = np.random.default_rng(6)
        adapter = LoraAdapter(
            b=rng.standard_normal((3, 3)), a=rng.standard_normal((3, 3)), rank=3, scale=1.9
        )
        plan = ClientPlan(client_id=0, selected=(0, 2), frozen=(1,), mode="freezing")
        payload = extract_upload(adapter, plan)
        product = adapter.scale * (adapter.b[:, [0, 2]] @ adapter.a[[0, 2], :])
        assert payload.norm_z == pytest.approx(
            float(np.sqrt((product**2).sum())), rel=1e-12
        )

    def test_truncation_rank_mismatch_rejected(self):
        adapter = init_adapter(3, 4, 2, seed=0)
        plan = ClientPlan(client_id=0, selected=(0,), frozen=(1,), mode="truncation")
        with pytest.raises(ValueError):
            extract_upload(adapter, plan)


class TestPlanValidation:
    def test_overlap_rejected(self):
        with pytest.raises(ValueError):
            ClientPlan(client_id=0, selected=(0, 1), frozen=(1,), mode="freezing")

    def test_non_contiguous_union_rejected(self):
        with pytest.raises(ValueError):
            ClientPlan(client_id=0, selected=(0, 3), frozen=(1,), mode="freezing")

    def test_empty_selection_rejected(self):
        with pytest.raises(ValueError):
            ClientPlan(client_id=0, selected=(), frozen=(0,), mode="freezing")

    def test_unsorted_selection_rejected(self):
        with pytest.raises(ValueError):
            ClientPlan(client_id=0, selected=(2, 0), frozen=(1,), mode="freezing")

    def test_payload_negative_norm_rejected(self):
        with pytest.raises(ValueError):
            UploadPayload(
                client_id=0,
                selected=(0,),
                b_cols=np.zeros((2, 1)),
                a_rows=np.zeros((1, 2)),
                norm_z=-1.0,
            )
