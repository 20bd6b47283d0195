import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import special_ortho_group

from effowt.autograd import AdamW, Parameter, Tensor, ops
from effowt.backbone import DESK_BACKBONE
from effowt.efficiency import synthetic_batch
from effowt.heads import (TrackHead, Tracker, assign_by_similarity, associate, head_forward,
                          region_pool_matrix, reid_contrastive_loss, uniform_reid_loss)
from effowt.model import EffOWTModel, HeadConfig, compute_loss
from effowt.side import SideConfig

from oracles import all_matchings


def test_pool_matrix_covers_touched_cells():
    p = region_pool_matrix([np.array([[0, 0, 16, 16]]), np.array([[20, 20, 1, 1]])], 4, 32)
    assert p.shape == (2, 32)
    np.testing.assert_allclose(p.sum(axis=1), 1.0)
    first = p[0].reshape(2, 4, 4)
    assert np.count_nonzero(first[0]) == 4 and not first[1].any()
    second = p[1].reshape(2, 4, 4)
    assert second[1, 2, 2] == 1.0


def test_pool_rejects_out_of_bounds_boxes():
    with pytest.raises(ValueError):
        region_pool_matrix([np.array([[30, 0, 8, 8]])], 4, 32)
    with pytest.raises(ValueError):
        region_pool_matrix([np.array([[0, 0, 0, 8]])], 4, 32)


def _head_case(rng):
    head = TrackHead(6, 2, emb_dim=5, hidden=7, rng=rng)
    fused = Tensor(rng.standard_normal((2, 6, 4, 4)))
    return head, fused


def test_embeddings_unit_norm_and_identical_regions(rng):
    head, fused = _head_case(rng)
    box = [3.0, 5.0, 9.0, 7.0]
    out = head_forward(fused, [np.array([box, box, [0, 0, 32, 32]]), np.array([box])], head, 32)
    assert out.class_logits.shape == (4, 3) and len(out) == 4
    np.testing.assert_allclose(np.linalg.norm(out.embeddings.data, axis=1), 1.0, atol=1e-6)
    np.testing.assert_array_equal(out.embeddings.data[0], out.embeddings.data[1])
    np.testing.assert_array_equal(out.class_logits.data[0], out.class_logits.data[1])


def test_empty_regions_give_empty_outputs(rng):
    head, fused = _head_case(rng)
    out = head_forward(fused, [np.zeros((0, 4)), np.zeros((0, 4))], head, 32)
    assert out.class_logits.shape == (0, 3) and out.embeddings.shape == (0, 5)


def test_head_gradients_reach_side_and_head_only():
    model = EffOWTModel(DESK_BACKBONE, SideConfig(), HeadConfig(), "side", np.random.default_rng(0))
    compute_loss(model, *synthetic_batch(DESK_BACKBONE, 2)).backward()
    assert all(p.grad is not None for p in model.head.parameters())
    assert any(p.grad is not None for p in model.side.parameters())
    assert all(p.grad is None for p in model.backbone.parameters())


# -- ReID loss ----------------------------------------------------------------------------------

def test_separable_embeddings_give_near_zero_loss():
    e = np.array([[1.0, 0.0], [1.0, 0.0], [-1.0, 0.0], [-1.0, 0.0]])
    loss = reid_contrastive_loss(Tensor(e), [0, 0, 1, 1], temperature=0.1).data
    assert 0.0 <= loss < 1e-7


@pytest.mark.parametrize("n_ids,views", [(2, 2), (4, 2), (3, 3)])
def test_uniform_similarity_closed_form(n_ids, views):
    m = n_ids * views
    e = np.tile([[0.6, 0.8]], (m, 1))
    ids = np.repeat(np.arange(n_ids), views)
    loss = float(reid_contrastive_loss(Tensor(e), ids).data)
    assert abs(loss - uniform_reid_loss(m)) < 1e-12
    assert abs(loss - np.log(m - 1)) < 1e-12


def test_single_identity_raises():
    with pytest.raises(ValueError, match="two distinct ids"):
        reid_contrastive_loss(Tensor(np.eye(3)), [1, 1, 1])


@given(st.integers(0, 2**31 - 1))
def test_reid_loss_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    e = rng.standard_normal((6, 4))
    e /= np.linalg.norm(e, axis=1, keepdims=True)
    ids = np.array([0, 0, 1, 1, 2, 2])
    perm = rng.permutation(6)
    a = reid_contrastive_loss(Tensor(e), ids).data
    b = reid_contrastive_loss(Tensor(e[perm]), ids[perm]).data
    assert abs(a - b) < 1e-10


def test_reid_loss_decreases_under_training():
    rng = np.random.default_rng(5)
    ids = np.repeat(np.arange(8), 2)
    raw = Parameter(rng.standard_normal((16, 16)))
    opt = AdamW([raw], lr=0.05)
    losses = []
    for _ in range(200):
        opt.zero_grad()
        loss = reid_contrastive_loss(ops.l2_normalize(raw, axis=-1), ids)
        loss.backward()
        opt.step()
        losses.append(float(loss.data))
    assert losses[-1] < 0.2 * losses[0]


# -- association --------------------------------------------------------------------------------

def test_two_by_two_example():
    assert assign_by_similarity(np.array([[0.9, 0.1], [0.2, 0.8]]), 0.5) == {0: 0, 1: 1}


def test_assignment_matches_enumeration(rng):
    for _ in range(30):
        n, m = rng.integers(1, 4, size=2)
        sim = rng.uniform(-1, 1, (n, m))
        got = assign_by_similarity(sim, 0.0)
        best, key = (), (-1, -np.inf)
        for mt in all_matchings(n, m):
            if any(sim[d, t] < 0.0 for d, t in mt):
                continue
            k = (len(mt), sum(sim[d, t] for d, t in mt))
            if k > key:
                best, key = mt, k
        assert got == dict(best)


def test_identical_detections_keep_identities(rng):
    e = rng.standard_normal((4, 6))
    e /= np.linalg.norm(e, axis=1, keepdims=True)
    assert associate(e, e, 0.5) == {i: i for i in range(4)}


def test_everything_below_threshold_starts_new_tracks():
    tr = Tracker(sim_threshold=0.9)
    assert tr.step(np.array([[1.0, 0.0]])) == [0]
    assert tr.step(np.array([[0.0, 1.0], [-1.0, 0.0]])) == [1, 2]
    assert tr.step(np.array([[0.0, 1.0]])) == [1]


@given(st.integers(0, 2**31 - 1))
def test_association_invariant_to_common_rotation(seed):
    rng = np.random.default_rng(seed)
    prev = rng.standard_normal((3, 5))
    det = rng.standard_normal((4, 5))
    prev /= np.linalg.norm(prev, axis=1, keepdims=True)
    det /= np.linalg.norm(det, axis=1, keepdims=True)
    q = special_ortho_group.rvs(5, random_state=seed % (2**32 - 1))
    assert associate(prev, det, 0.1) == associate(prev @ q.T, det @ q.T, 0.1)


def test_new_ids_strictly_increase(rng):
    tr = Tracker(0.99)
    seen = []
    for _ in range(5):
        e = rng.standard_normal((3, 8))
        e /= np.linalg.norm(e, axis=1, keepdims=True)
        seen.extend(tr.step(e))
    assert seen == sorted(seen) and len(set(seen)) == len(seen)


def test_invalid_threshold():
    with pytest.raises(ValueError):
        associate(np.eye(2), np.eye(2), 1.0)
    assert associate(np.zeros((0, 2)), np.eye(2), 0.5) == {}
