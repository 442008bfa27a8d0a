import numpy as np
import pytest
import torch

import lcclab.lcc as lcc_mod
from lcclab.lcc import (
    LccHyper,
    LearnedComponent,
    RecoveryPlan,
    compose_component,
    fold_components,
    gradient_check,
    init_learned_component,
    load_plan,
    recovery_forward,
    save_plan,
    train_components,
)
from lcclab.lossdiff import LossMatrix, assemble_loss_matrix, capture_pair, decompose
from lcclab.model import TrainingDiverged, forward, init_params
from lcclab.pruning import calibration_norms, check_mask_faithful, prune_unstructured, wanda_scores

SEQS = [[1, 6, 7, 8, 2, 3, 5], [1, 7, 6, 9, 10, 2, 4, 5], [1, 6, 6, 2, 3, 5], [1, 8, 8, 7, 2, 4, 5]]


@pytest.fixture
def setup(tiny_config):
    dense = init_params(tiny_config).to(torch.float64)
    pruned, mask = prune_unstructured(dense, 0.5, wanda_scores(dense, calibration_norms(dense, SEQS)))
    td, tp = capture_pair(dense, pruned, [s[:5] for s in SEQS], ffn_layers=(0, 1))
    comps = {s: decompose(assemble_loss_matrix(td, tp, s)) for s in td.sites}
    return dense, pruned, mask, comps


def _plan(comps, sites, **kw):
    return RecoveryPlan({s: init_learned_component(comps[s], s, **kw) for s in sites})


def test_init_completes_basis_and_warm_starts():
    dz = np.random.default_rng(0).standard_normal((3, 8))  # rank 3 < d
    comp = decompose(LossMatrix((0, 0), dz))
    lc = init_learned_component(comp, (0, 0))
    assert lc.V.shape == (8, 8)
    np.testing.assert_allclose(lc.V.T @ lc.V, np.eye(8), atol=1e-12)
    np.testing.assert_array_equal(lc.beta[:3], comp.alpha_bar)
    assert not lc.b.any()
    # warm start composes to the full-rank mean
    np.testing.assert_allclose(compose_component(lc), dz.mean(axis=0), atol=1e-12)
    cold = init_learned_component(comp, (0, 0), warm_start=False)
    assert not cold.beta.any()


def test_V_is_read_only():
    lc = LearnedComponent((0, 0), np.eye(2), np.zeros(2), np.zeros(2))
    with pytest.raises(ValueError):
        lc.V[0, 0] = 2.0
    with pytest.raises(ValueError, match="inconsistent"):
        LearnedComponent((0, 0), np.eye(2), np.zeros(3), np.zeros(2))


def test_compose_flags():
    V = np.eye(3)[:, ::-1].copy()
    beta, b = np.array([1.0, 2.0, 3.0]), np.array([0.5, 0.0, 0.0])
    full = compose_component(LearnedComponent((0, 0), V, beta, b))
    np.testing.assert_allclose(full, V @ beta + b)
    np.testing.assert_allclose(compose_component(LearnedComponent((0, 0), V, beta, b, use_directions=False)), b)
    np.testing.assert_allclose(compose_component(LearnedComponent((0, 0), V, beta, b, use_bias=False)), V @ beta)


def test_zero_plan_is_plain_forward(setup):
    _, pruned, _, comps = setup
    plan = _plan(comps, [(0, 1)], warm_start=False)
    torch.testing.assert_close(recovery_forward(pruned, plan, SEQS), forward(pruned, SEQS)[0], rtol=0, atol=0)


def test_fold_equivalence_heads_and_ffn(setup):
    _, pruned, mask, comps = setup
    plan = _plan(comps, [(0, 1), (1, 0), (1, "ffn")])
    for lc in plan.components.values():
        lc.b = np.linspace(-0.3, 0.3, lc.dim)
    folded = fold_components(pruned, plan)
    a = forward(folded, SEQS)[0]
    b = recovery_forward(pruned, plan, SEQS)
    assert (a - b).abs().max().item() <= 1e-12
    assert check_mask_faithful(folded, mask)
    for name in pruned.weight_names():
        assert torch.equal(folded[name], pruned[name])


def test_gradient_check_micro(setup):
    _, pruned, _, comps = setup
    plan = _plan(comps, [(0, 0), (1, 1), (0, "ffn")])
    assert gradient_check(plan, pruned, SEQS[:2]) < 1e-5


def test_training_lowers_loss_and_keeps_V(setup):
    _, pruned, _, comps = setup
    plan = _plan(comps, [(0, 0), (1, 1)])
    out = train_components(pruned, plan, SEQS, LccHyper(lr=1e-2, epochs=5, batch_size=2))
    assert len(out.loss_curve) == 5 and out.loss_curve[-1] < out.loss_curve[0]
    for s in plan.sites:
        assert np.array_equal(out.components[s].V, plan.components[s].V)
    again = train_components(pruned, plan, SEQS, LccHyper(lr=1e-2, epochs=5, batch_size=2))
    assert all(np.array_equal(out.components[s].beta, again.components[s].beta) for s in plan.sites)


def test_disabled_parts_stay_fixed(setup):
    _, pruned, _, comps = setup
    plan = _plan(comps, [(0, 0)], use_bias=False)
    out = train_components(pruned, plan, SEQS, LccHyper(lr=1e-2, epochs=2))
    assert not out.components[(0, 0)].b.any()
    plan = _plan(comps, [(0, 0)], use_directions=False)
    out = train_components(pruned, plan, SEQS, LccHyper(lr=1e-2, epochs=2))
    np.testing.assert_array_equal(out.components[(0, 0)].beta, plan.components[(0, 0)].beta)


def test_zero_epochs_is_identity(setup):
    _, pruned, _, comps = setup
    plan = _plan(comps, [(0, 0)])
    out = train_components(pruned, plan, SEQS, LccHyper(epochs=0))
    np.testing.assert_array_equal(out.components[(0, 0)].beta, plan.components[(0, 0)].beta)


def test_response_loss_needs_offsets(setup):
    _, pruned, _, comps = setup
    with pytest.raises(ValueError, match="loss_from"):
        train_components(pruned, _plan(comps, [(0, 0)]), SEQS, LccHyper(epochs=1, loss_on="response"))


def test_divergence_keeps_last_good_plan(setup, monkeypatch):
    _, pruned, _, comps = setup
    plan = _plan(comps, [(0, 0)])
    monkeypatch.setattr(lcc_mod, "_loss", lambda *a, **k: torch.tensor(float("nan"), requires_grad=True))
    with pytest.raises(TrainingDiverged) as exc:
        train_components(pruned, plan, SEQS, LccHyper(epochs=1))
    np.testing.assert_array_equal(exc.value.snapshot.components[(0, 0)].beta, plan.components[(0, 0)].beta)


def test_out_of_range_site(setup):
    _, pruned, _, comps = setup
    bad = RecoveryPlan({(5, 0): init_learned_component(comps[(0, 0)], (5, 0))})
    with pytest.raises(ValueError, match="out of range"):
        recovery_forward(pruned, bad, SEQS)


def test_plan_round_trip(tmp_path, setup):
    _, pruned, _, comps = setup
    plan = train_components(pruned, _plan(comps, [(0, 1), (1, "ffn")]), SEQS, LccHyper(epochs=1))
    back = load_plan(save_plan(plan, tmp_path / "p.bin"))
    assert back.sites == plan.sites and back.hyper == plan.hyper
    for s in plan.sites:
        np.testing.assert_array_equal(back.components[s].V, plan.components[s].V)
        np.testing.assert_array_equal(back.components[s].beta, plan.components[s].beta)
