import numpy as np
import pytest
import torch

from lcclab.model import (
    CaptureRequest,
    ModelConfig,
    TrainHyper,
    capture,
    forward,
    init_params,
    inject_ffn_bias,
    inject_head_bias,
    lm_loss,
    load_checkpoint,
    logit_difference,
    logit_lens,
    pad_batch,
    save_checkpoint,
    train_dense,
)


@pytest.fixture
def micro(tiny_config):
    return init_params(tiny_config).to(torch.float64)


def test_config_rejects_inconsistent_heads():
    with pytest.raises(ValueError, match="n_heads"):
        ModelConfig(d_model=64, n_heads=4, d_head=8)


def test_init_is_seeded(tiny_config):
    a, b = init_params(tiny_config), init_params(tiny_config)
    assert all(torch.equal(a[k], b[k]) for k in a.tensors)


def test_forward_shapes_and_causality(micro):
    seq = [1, 6, 7, 8, 2, 3, 5]
    logits, _ = forward(micro, [seq])
    assert logits.shape == (1, 7, 64)
    changed = list(seq)
    changed[5] = 4
    logits2, _ = forward(micro, [changed])
    # positions before the edit cannot see it
    assert torch.equal(logits[0, :5], logits2[0, :5])
    assert not torch.allclose(logits[0, 5:], logits2[0, 5:])


def test_padding_does_not_change_outputs(micro):
    a, b = [1, 6, 7, 2], [1, 7, 7, 7, 6, 6, 2]
    solo, _ = forward(micro, [a])
    both, _ = forward(micro, [a, b])
    torch.testing.assert_close(solo[0], both[0, :4], rtol=0, atol=1e-12)


def test_forward_rejects_bad_tokens(micro):
    with pytest.raises(ValueError, match="out of range"):
        forward(micro, [[1, 99]])
    with pytest.raises(ValueError, match="max_seq_len"):
        forward(micro, [[1] * 40])


def test_forward_gradient_matches_finite_differences(micro):
    """Autograd through the whole forward pass against central differences."""
    tokens, lengths = pad_batch([[1, 6, 7, 2, 3], [1, 8, 2, 4]])
    name = "layers.0.wq"
    w = micro[name].clone().requires_grad_(True)
    params = type(micro)(micro.config, {**micro.tensors, name: w})
    loss = lm_loss(forward(params, tokens, lengths=lengths)[0], tokens, lengths)
    (grad,) = torch.autograd.grad(loss, w)
    rng = np.random.default_rng(0)
    eps = 1e-6
    for _ in range(8):
        i, j = (int(x) for x in rng.integers(0, w.shape[0], 2))
        with torch.no_grad():
            vals = []
            for s in (1, -1):
                wp = micro[name].clone()
                wp[i, j] += s * eps
                p2 = type(micro)(micro.config, {**micro.tensors, name: wp})
                vals.append(lm_loss(forward(p2, tokens, lengths=lengths)[0], tokens, lengths).item())
        num = (vals[0] - vals[1]) / (2 * eps)
        assert abs(num - grad[i, j].item()) <= 1e-6 * max(1.0, abs(num))


def test_capture_last_and_explicit(micro):
    seqs = [[1, 6, 7, 2], [1, 8, 2]]
    last = capture(micro, seqs, CaptureRequest(heads=((0, 1),), ffn_layers=(1,)))
    assert last.positions.tolist() == [3, 2]
    assert last[(0, 1)].shape == (2, 8)
    assert last[(1, "ffn")].shape == (2, 16)
    expl = capture(micro, seqs, CaptureRequest(heads=((0, 1),), positions=[3, 2]))
    np.testing.assert_array_equal(last[(0, 1)], expl[(0, 1)])
    with pytest.raises(ValueError, match="outside"):
        capture(micro, seqs, CaptureRequest(positions=[4, 0]))


def test_head_hook_sees_bias_slot(micro):
    c = torch.arange(8, dtype=torch.float64)
    seen = {}

    def hook(l, z):
        seen[l] = z[0, -1].clone()
        return z

    forward(micro, [[1, 6, 2]], head_hook=hook)
    base = seen[0][1].clone()
    forward(inject_head_bias(micro, 0, 1, c), [[1, 6, 2]], head_hook=hook)
    torch.testing.assert_close(seen[0][1], base + c)


def test_inject_head_bias_inverse_and_copy(micro):
    c = np.linspace(-1, 1, 8)
    plus = inject_head_bias(micro, 1, 0, c)
    assert torch.count_nonzero(micro["layers.1.head_bias"]) == 0
    back = inject_head_bias(plus, 1, 0, -c)
    assert torch.equal(back["layers.1.head_bias"], micro["layers.1.head_bias"])
    # weights untouched and shared
    assert plus["layers.1.wo"] is micro["layers.1.wo"]


def test_inject_rejects_bad_input(micro):
    with pytest.raises(ValueError, match="shape"):
        inject_head_bias(micro, 0, 0, np.zeros(3))
    with pytest.raises(ValueError, match="out of range"):
        inject_head_bias(micro, 5, 0, np.zeros(8))
    with pytest.raises(ValueError, match="non-finite"):
        inject_head_bias(micro, 0, 0, np.full(8, np.nan))
    with pytest.raises(ValueError, match="shape"):
        inject_ffn_bias(micro, 0, np.zeros(8))


def test_logit_lens_linear_in_wo(micro):
    z = torch.randn(3, 8, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    out = logit_lens(z, 1, 1, micro)
    assert out.shape == (3, 64)
    # RMS norm makes the lens invariant to positive rescaling of z
    torch.testing.assert_close(logit_lens(5 * z, 1, 1, micro), out)
    with pytest.raises(ValueError):
        logit_lens(torch.zeros(7), 0, 0, micro)


def test_logit_difference():
    logits = torch.tensor([[1.0, 3.0, 0.5], [2.0, 0.0, 1.0]])
    assert logit_difference(logits[0], 1, 0).item() == 2.0
    torch.testing.assert_close(logit_difference(logits, torch.tensor([1, 0]), torch.tensor([2, 2])), torch.tensor([2.5, 1.0]))
    with pytest.raises(ValueError, match="differ"):
        logit_difference(logits, 1, 1)


def test_lm_loss_uniform_is_log_vocab():
    tokens, lengths = pad_batch([[1, 2, 3], [4, 5]])
    logits = torch.zeros(2, 3, 10)
    assert lm_loss(logits, tokens, lengths).item() == pytest.approx(np.log(10))


def test_checkpoint_round_trip(tmp_path, tiny_config):
    p = init_params(tiny_config)
    p = inject_head_bias(p, 0, 1, np.ones(8))
    path = save_checkpoint(p, tmp_path / "m.ckpt")
    q = load_checkpoint(path)
    assert q.config == p.config
    assert all(torch.equal(p[k], q[k]) for k in p.tensors)


def test_checkpoint_rejects_other_containers(tmp_path):
    from lcclab.io import write_container

    write_container(tmp_path / "x.bin", {"kind": "mask"}, {"a": np.ones(3)})
    with pytest.raises(ValueError, match="not a model"):
        load_checkpoint(tmp_path / "x.bin")


def test_training_reduces_loss_and_is_deterministic(tiny_config):
    seqs = [[1, 6, 7, 6, 2, 3, 5], [1, 7, 7, 6, 2, 4, 5]] * 16
    hyper = TrainHyper(epochs=3, batch_size=8, lr=1e-2)
    p1, h1 = train_dense(tiny_config, seqs, hyper)
    p2, h2 = train_dense(tiny_config, seqs, hyper)
    assert h1[-1] < h1[0]
    assert h1 == h2
    assert torch.equal(p1["layers.0.wq"], p2["layers.0.wq"])
    # bias slots stay untrained
    assert torch.count_nonzero(p1["layers.0.head_bias"]) == 0
