import numpy as np
import pytest

from keds import bkp, numeric as nm
from keds.errors import ConfigError, DimensionError, EmptyContextError


def random_ctx(rng, k, d):
    return bkp.KnowledgeContext(
        rng.standard_normal((k, d)).astype(np.float32),
        rng.standard_normal((k, d)).astype(np.float32),
    )


# ---------------------------------------------------------------------------
# independent straight-line reference (test-local, shares no library code)
# ---------------------------------------------------------------------------


def _ref_layer_norm(x, gain, bias, eps=1e-5):
    mu = x.mean()
    var = ((x - mu) ** 2).mean()
    return gain * (x - mu) / np.sqrt(var + eps) + bias


def _ref_gelu(x):
    c0 = np.sqrt(2.0 / np.pi)
    return 0.5 * x * (1.0 + np.tanh(c0 * (x + 0.044715 * x**3)))


def _ref_attention(query_vec, ctx_rows, layer, heads):
    """One cross-attention + feed-forward block on a single query vector."""
    d = query_vec.shape[0]
    dh = d // heads
    normed = _ref_layer_norm(query_vec, layer["ln1_g"], layer["ln1_b"])
    q = normed @ layer["wq"] + layer["bq"]
    k = ctx_rows @ layer["wk"] + layer["bk"]
    v = ctx_rows @ layer["wv"] + layer["bv"]
    merged = np.zeros(d)
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        logits = (k[:, sl] @ q[sl]) / np.sqrt(dh)
        logits = logits - logits.max()
        weights = np.exp(logits) / np.exp(logits).sum()
        merged[sl] = weights @ v[:, sl]
    x = query_vec + (merged @ layer["wo"] + layer["bo"])
    f = _ref_layer_norm(x, layer["ln2_g"], layer["ln2_b"])
    hmid = _ref_gelu(f @ layer["ff1_w"] + layer["ff1_b"])
    return x + (hmid @ layer["ff2_w"] + layer["ff2_b"])


def _ref_project(params: bkp.BkpParams, ref, img_rows, cap_rows):
    w = params.psi_w.data.astype(np.float64)
    b = params.psi_b.data.astype(np.float64)
    mapped_ref = ref @ w + b
    mapped_img = img_rows @ w + b
    mapped_cap = cap_rows @ w + b

    def run_stack(stack, ctx_rows):
        x = mapped_ref.copy()
        for layer_t in stack:
            layer = {name: t.data.astype(np.float64) for name, t in layer_t.items()}
            x = _ref_attention(x, ctx_rows, layer, params.heads)
        return x

    tok_img = run_stack(params.img_stack, mapped_img)
    tok_cap = run_stack(params.cap_stack, mapped_cap)
    return np.stack([mapped_ref, tok_img, tok_cap])


class TestProject:
    def test_shape_and_row_zero_passthrough(self):
        rng = np.random.default_rng(0)
        params = bkp.init(1, dim=16, n_layers=2, heads=2)
        ref = rng.standard_normal(16).astype(np.float32)
        token = bkp.project(params, ref, random_ctx(rng, 4, 16))
        assert token.rows.shape == (3, 16)
        expected = ref @ params.psi_w.data + params.psi_b.data
        assert token.rows.data[0].tobytes() == expected.tobytes()

    def test_single_key_closed_form(self):
        # one retrieved row, single layer, zeroed feed-forward, identity output
        # projection: attention weight is exactly 1, so the context token is
        # psi(ref) + psi(ctx) @ Wv + bv
        rng = np.random.default_rng(1)
        d = 8
        params = bkp.init(2, dim=d, n_layers=1, heads=2)
        for stack in (params.img_stack, params.cap_stack):
            layer = stack[0]
            layer["wo"].data[...] = np.eye(d, dtype=np.float32)
            layer["bo"].data[...] = 0.0
            layer["ff2_w"].data[...] = 0.0
            layer["ff2_b"].data[...] = 0.0
        ref = rng.standard_normal(d).astype(np.float32)
        ctx = random_ctx(rng, 1, d)
        token = bkp.project(params, ref, ctx).numpy()

        psi = lambda x: x @ params.psi_w.data + params.psi_b.data
        for row, rows_in in ((1, ctx.image_feats), (2, ctx.caption_feats)):
            layer = (params.img_stack if row == 1 else params.cap_stack)[0]
            want = psi(ref) + (psi(rows_in[0]) @ layer["wv"].data + layer["bv"].data)
            np.testing.assert_allclose(token[row], want, atol=1e-5)

    def test_matches_independent_reference(self):
        rng = np.random.default_rng(7)
        params = bkp.init(3, dim=8, n_layers=2, heads=2)
        ref = rng.standard_normal(8)
        img = rng.standard_normal((4, 8))
        cap = rng.standard_normal((4, 8))
        got = bkp.project(
            params, ref.astype(np.float32),
            bkp.KnowledgeContext(img.astype(np.float32), cap.astype(np.float32)),
        ).numpy()
        want = _ref_project(params, ref, img, cap)
        np.testing.assert_allclose(got, want, atol=1e-6, rtol=1e-5)

    def test_empty_context(self):
        params = bkp.init(1, dim=8, n_layers=1, heads=2)
        ctx = bkp.KnowledgeContext(np.zeros((0, 8), np.float32), np.zeros((0, 8), np.float32))
        with pytest.raises(EmptyContextError):
            bkp.project(params, np.zeros(8, np.float32), ctx)

    def test_dim_mismatch(self):
        rng = np.random.default_rng(2)
        params = bkp.init(1, dim=8, n_layers=1, heads=2)
        with pytest.raises(DimensionError):
            bkp.project(params, np.zeros(5, np.float32), random_ctx(rng, 2, 8))


class TestInit:
    def test_deterministic(self):
        a = bkp.init(9, dim=16, n_layers=2, heads=4)
        b = bkp.init(9, dim=16, n_layers=2, heads=4)
        for (na, ta), (nb, tb) in zip(a.named_params(), b.named_params()):
            assert na == nb
            assert ta.data.tobytes() == tb.data.tobytes()

    def test_psi_near_identity(self):
        rng = np.random.default_rng(4)
        params = bkp.init(5, dim=32, n_layers=1, heads=4)
        for _ in range(20):
            x = rng.standard_normal(32).astype(np.float32)
            x /= np.linalg.norm(x)
            mapped = x @ params.psi_w.data + params.psi_b.data
            assert np.linalg.norm(mapped - x) / np.linalg.norm(x) < 0.1

    def test_heads_must_divide(self):
        with pytest.raises(ConfigError):
            bkp.init(0, dim=10, heads=4)

    def test_gradients_pass_finite_differences(self):
        rng = np.random.default_rng(11)
        params = bkp.init(6, dim=8, n_layers=1, heads=2, dtype=np.float64)
        ref = nm.parameter(rng.standard_normal((1, 8)), np.float64)
        img = nm.constant(rng.standard_normal((1, 3, 8)), np.float64)
        cap = nm.constant(rng.standard_normal((1, 3, 8)), np.float64)
        probe = nm.constant(rng.standard_normal((1, 3, 8)), np.float64)

        def loss():
            return nm.sum_all(nm.mul(bkp.project_batch(params, ref, img, cap), probe))

        worst = nm.finite_difference_check(loss, [ref] + params.params(), max_coords=4, rng=rng)
        assert worst < 1e-4


class TestInvariants:
    def test_permutation_invariance(self):
        rng = np.random.default_rng(12)
        params = bkp.init(7, dim=16, n_layers=2, heads=4)
        ref = rng.standard_normal(16).astype(np.float32)
        ctx = random_ctx(rng, 6, 16)
        base = bkp.project(params, ref, ctx).numpy()
        for seed in range(5):
            perm_rng = np.random.default_rng(seed)
            shuffled = bkp.KnowledgeContext(
                ctx.image_feats[perm_rng.permutation(6)],
                ctx.caption_feats[perm_rng.permutation(6)],
            )
            out = bkp.project(params, ref, shuffled).numpy()
            np.testing.assert_allclose(out, base, atol=1e-6)

    def test_context_sensitivity(self):
        rng = np.random.default_rng(13)
        params = bkp.init(8, dim=16, n_layers=2, heads=4)
        ref = rng.standard_normal(16).astype(np.float32)
        a = bkp.project(params, ref, random_ctx(rng, 4, 16)).numpy()
        b = bkp.project(params, ref, random_ctx(rng, 4, 16)).numpy()
        assert np.abs(a[1] - b[1]).max() > 1e-4
        assert np.abs(a[2] - b[2]).max() > 1e-4

    def test_instances_share_no_storage(self):
        m = bkp.init(20, dim=8, n_layers=1, heads=2)
        a = bkp.init(21, dim=8, n_layers=1, heads=2)
        snapshot = [t.data.copy() for t in a.params()]
        for tensor in m.params():
            tensor.data += 1.0
        for before, tensor in zip(snapshot, a.params()):
            assert tensor.data.tobytes() == before.tobytes()
