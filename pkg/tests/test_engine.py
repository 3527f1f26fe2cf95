import numpy as np
import pytest

from nvqad import blockquant as bq
from nvqad.engine import Adam, SGD, Tape, Tensor, grad_check
from nvqad.engine import tensor as T
from nvqad.engine.checkpoint import checkpoint_bytes, load_checkpoint, parse_checkpoint, save_checkpoint

rng = np.random.default_rng(0)


def _sum_of(fn):
    """Scalarize an op by a fixed random projection so every output element matters."""
    cache = {}

    def f(*xs):
        out = fn(*xs)
        if "w" not in cache:
            cache["w"] = np.random.default_rng(1).standard_normal(out.shape)
        return T.reduce_sum(T.mul(out, Tensor(cache["w"].astype(out.data.dtype))))

    return f


IDS = np.array([[1, 3, 3], [0, 2, 1]])

# op name -> (function of Tensors, list of input arrays)
OP_CASES = {
    "matmul": (T.matmul, [rng.standard_normal((2, 3, 4)), rng.standard_normal((4, 5))]),
    "add": (T.add, [rng.standard_normal((3, 4)), rng.standard_normal((4,))]),
    "mul": (T.mul, [rng.standard_normal((3, 4)), rng.standard_normal((3, 1))]),
    "scale": (lambda x: T.scale(x, -2.5), [rng.standard_normal((3, 4))]),
    "embedding_lookup": (lambda w: T.embedding_lookup(w, IDS), [rng.standard_normal((4, 3))]),
    "softmax": (T.softmax, [rng.standard_normal((2, 5))]),
    "log_softmax": (T.log_softmax, [rng.standard_normal((2, 5))]),
    "rmsnorm": (T.rmsnorm, [rng.standard_normal((3, 6)), rng.standard_normal(6)]),
    "gelu": (T.gelu, [rng.standard_normal((4, 5)) * 2]),
    "transpose": (lambda x: T.transpose(x, (0, 2, 1)), [rng.standard_normal((2, 3, 4))]),
    "reshape": (lambda x: T.reshape(x, (6, 2)), [rng.standard_normal((3, 4))]),
    "causal_mask_add": (T.causal_mask_add, [rng.standard_normal((2, 4, 4))]),
    "reduce_mean": (lambda x: T.reduce_mean(x, axis=1), [rng.standard_normal((3, 4))]),
    "reduce_sum": (lambda x: T.reduce_sum(x, axis=0), [rng.standard_normal((3, 4))]),
}


def test_every_registered_op_has_a_case():
    assert set(T.REGISTERED_OPS) == set(OP_CASES) | {"ste_fake_quant"}


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_op_gradients(name):
    fn, inputs = OP_CASES[name]
    assert grad_check(_sum_of(fn), inputs, eps=1e-3) < 1e-3


def _block_limits(x, cfg, ts):
    q = bq.quantize_tensor(x, cfg, ts)
    per_block = q.block_scale_values().astype(np.float64) * 6 * np.float32(ts)
    return np.repeat(per_block, cfg.block_size)[: x.size]


def test_ste_gradient_is_clipped_identity():
    # fixed small tensor scale: block 0 saturates its E4M3 scale, so its
    # large element clips; block 1 gets the exact scale 3/6/2**-7 = 64 and stays in range
    x = np.concatenate([np.r_[np.full(15, 0.5), 50.0], np.r_[np.full(15, 0.5), 3.0]]).astype(np.float32)
    cfg = bq.QuantConfig.nvfp4()
    t = Tensor(x, requires_grad=True)
    g = rng.standard_normal(32).astype(np.float32)
    with Tape() as tape:
        out = T.ste_fake_quant(t, cfg, tensor_scale=2.0**-7)
        loss = T.reduce_sum(T.mul(out, Tensor(g)))
    tape.backward(loss)
    expected = g.copy()
    expected[15] = 0.0
    np.testing.assert_array_equal(t.grad, expected)
    np.testing.assert_array_equal(out.data, bq.fake_quantize(x, cfg, 2.0**-7))


def test_ste_surrogate_grad_check():
    # the surrogate x -> clip(x, -limit_b, limit_b) with each block's
    # representable limit has exactly the STE derivative
    x = rng.standard_normal(32) * 0.2
    x[7] = 40.0
    cfg = bq.QuantConfig.nvfp4()
    ts = 0.01
    limit = _block_limits(x.astype(np.float32), cfg, ts)

    def surrogate(t):
        return T.reduce_sum(Tensor(np.clip(t.data, -limit, limit)))

    t = Tensor(x.astype(np.float32), requires_grad=True)
    with Tape() as tape:
        loss = T.reduce_sum(T.ste_fake_quant(t, cfg, ts))
    tape.backward(loss)
    from nvqad.engine.gradcheck import numeric_grad

    num = numeric_grad(surrogate, [x], 1e-6)[0]
    assert t.grad[7] == 0.0
    np.testing.assert_allclose(t.grad, num, atol=1e-3)


def test_no_tape_records_nothing():
    a = Tensor(np.ones((2, 2)), requires_grad=True)
    out = T.matmul(a, a)
    assert not out.requires_grad
    with Tape() as tape:
        T.matmul(Tensor(np.ones((2, 2))), Tensor(np.ones((2, 2))))
    assert len(tape) == 0


def test_gradient_accumulates_over_reuse():
    a = Tensor(np.array([2.0, 3.0]), requires_grad=True)
    with Tape() as tape:
        loss = T.reduce_sum(T.mul(a, a))
    tape.backward(loss)
    np.testing.assert_allclose(a.grad, [4.0, 6.0])


def test_backward_needs_scalar():
    a = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        out = T.scale(a, 2.0)
    with pytest.raises(ValueError):
        tape.backward(out)


def test_shape_errors_name_both_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(4, 5\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))
    with pytest.raises(ValueError, match="shape mismatch"):
        T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))


def test_embedding_range_check():
    with pytest.raises(ValueError):
        T.embedding_lookup(Tensor(np.ones((4, 2))), np.array([4]))


def test_softmax_stable_for_large_logits():
    out = T.softmax(Tensor(np.array([[1000.0, 0.0, -1000.0]]))).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out.sum(), 1.0)


def test_causal_mask_blocks_future():
    s = T.softmax(T.causal_mask_add(Tensor(np.zeros((3, 3), np.float32)))).data
    np.testing.assert_allclose(s[0], [1, 0, 0])
    np.testing.assert_allclose(s[2], [1 / 3] * 3, rtol=1e-6)


def test_default_dtype_is_float32():
    assert Tensor([1, 2]).data.dtype == np.float32
    assert Tensor(np.ones(2, np.float64)).data.dtype == np.float64


def test_sgd_step():
    p = Tensor(np.array([1.0, 2.0], np.float32), requires_grad=True)
    p.grad = np.array([0.5, -1.0], np.float32)
    opt = SGD([p], lr=0.1)
    opt.step()
    np.testing.assert_allclose(p.data, [0.95, 2.1])
    opt.zero_grad()
    assert p.grad is None


def test_adam_first_step_moves_by_lr():
    p = Tensor(np.array([1.0, -1.0], np.float32), requires_grad=True)
    p.grad = np.array([3.0, -0.2], np.float32)
    Adam([p], lr=0.01).step()
    # bias-corrected first step is lr * sign(g) up to eps
    np.testing.assert_allclose(p.data, [0.99, -0.99], rtol=1e-5)


def test_adam_matches_reference_over_steps():
    g_seq = np.random.default_rng(3).standard_normal((5, 4))
    p = Tensor(np.zeros(4, np.float32), requires_grad=True)
    opt = Adam([p], lr=1e-3, betas=(0.9, 0.95), eps=1e-8)
    w = np.zeros(4)
    m = np.zeros(4)
    v = np.zeros(4)
    for t, g in enumerate(g_seq, start=1):
        p.grad = g.astype(np.float32)
        opt.step()
        m = 0.9 * m + 0.1 * g
        v = 0.95 * v + 0.05 * g * g
        w -= 1e-3 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.95**t)) + 1e-8)
    np.testing.assert_allclose(p.data, w, rtol=1e-4, atol=1e-7)


def test_checkpoint_round_trip(tmp_path):
    state = {"a": np.arange(6, dtype=np.float32).reshape(2, 3), "b.c": np.array(1.5, np.float32)}
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, state)
    back = load_checkpoint(path)
    assert list(back) == ["a", "b.c"]
    np.testing.assert_array_equal(back["a"], state["a"])
    assert back["b.c"].shape == ()
    assert checkpoint_bytes(back) == path.read_bytes()


def test_checkpoint_rejects_garbage():
    with pytest.raises(ValueError):
        parse_checkpoint(b"JUNK" + bytes(10))
    blob = checkpoint_bytes({"a": np.ones(4, np.float32)})
    with pytest.raises(ValueError):
        parse_checkpoint(blob[:-2])
