import math

import numpy as np
import pytest

from reflnet.errors import ConfigError, StateError
from reflnet.rdm import (
    RdmConfig,
    RpeTable,
    attention_flops,
    init_rdm,
    rdm_backward,
    rdm_forward,
    region_attention_forward,
    region_pool,
    rpe_bias,
    rpe_index,
    write_attention_dump,
)
from reflnet.ssre import RegionPartition
from reflnet.tensor import ParamStore, cross_entropy_mean, finite_diff_check


def partition(region_of, num_classes=1):
    region_of = np.asarray(region_of)
    m = int(region_of.max()) + 1
    return RegionPartition(region_of, m, np.zeros((m, 3)), np.zeros(m, dtype=np.int64), 1)


def randomized(cfg, seed, scale=0.3):
    params = init_rdm(cfg, seed)
    rng = np.random.default_rng(seed + 7)
    for name in params:
        params[name][...] += rng.normal(scale=scale, size=params[name].shape)
    return params


# ---- straight-line reference for one residual layer ------------------------

def ref_layer_norm(row, g, b):
    mu = sum(row) / len(row)
    var = sum((v - mu) ** 2 for v in row) / len(row)
    return [(v - mu) / math.sqrt(var + 1e-5) * g[c] + b[c] for c, v in enumerate(row)]


def ref_vecmat(row, w):
    return [sum(row[i] * w[i][j] for i in range(len(row))) for j in range(len(w[0]))]


def ref_layer(x, p, centers, heads, t, max_rel):
    m, d = len(x), len(x[0])
    dh = d // heads
    L = round(2 * max_rel / t)
    u = [ref_layer_norm(r, p["ln1.g"][0], p["ln1.b"][0]) for r in x]
    q = [ref_vecmat(r, p["wq"]) for r in u]
    k = [ref_vecmat(r, p["wk"]) for r in u]
    v = [ref_vecmat(r, p["wv"]) for r in u]
    tab = p["rpe"]
    out = [[0.0] * d for _ in range(m)]
    for h in range(heads):
        cs = range(h * dh, (h + 1) * dh)
        for i in range(m):
            logits = []
            for j in range(m):
                idx = []
                for a in range(3):
                    b = math.floor((centers[i][a] - centers[j][a]) / t)
                    idx.append(min(max(b, -L // 2), L // 2 - 1) + L // 2)
                pe = [tab[idx[0]][c] + tab[L + idx[1]][c] + tab[2 * L + idx[2]][c] for c in cs]
                qk = sum(q[i][c] * k[j][c] for c in cs)
                bias = sum(q[i][c] * pe[n] for n, c in enumerate(cs))
                logits.append((qk + bias) / math.sqrt(dh))
            top = max(logits)
            e = [math.exp(s - top) for s in logits]
            z = sum(e)
            for j in range(m):
                for c in cs:
                    out[i][c] += e[j] / z * v[j][c]
    x1 = [[x[i][c] + ref_vecmat(out[i], p["wo"])[c] for c in range(d)] for i in range(m)]
    y = []
    for i in range(m):
        hdn = ref_layer_norm(x1[i], p["ln2.g"][0], p["ln2.b"][0])
        z = [max(0.0, a + b) for a, b in zip(ref_vecmat(hdn, p["mlp.w1"]), p["mlp.b1"][0])]
        o = [a + b for a, b in zip(ref_vecmat(z, p["mlp.w2"]), p["mlp.b2"][0])]
        y.append([x1[i][c] + o[c] for c in range(d)])
    return y


class TestRpeIndex:
    def test_self_pairs_center_bin(self):
        idx = rpe_index(np.random.default_rng(0).normal(size=(5, 3)))
        assert np.all(idx[:, np.arange(5), np.arange(5)] == 100)

    def test_worked_example(self):
        centers = np.array([[0.05, 0.0, 0.0], [0.0, 0.0, 0.0]])
        assert rpe_index(centers)[0, 0, 1] == 102
        assert rpe_index(centers)[0, 1, 0] == 97

    def test_clamping(self):
        centers = np.array([[0.0, 0.0, 0.0], [3.0, -3.0, 0.0]])
        idx = rpe_index(centers)
        assert idx[0, 0, 1] == 0 and idx[1, 0, 1] == 199
        assert idx.min() >= 0 and idx.max() <= 199

    def test_translation_invariance(self):
        rng = np.random.default_rng(1)
        centers = rng.integers(-128, 128, (12, 3)) / 64.0  # dyadic, so offsets stay exact
        shift = np.array([1.25, -3.5, 0.75])
        assert np.array_equal(rpe_index(centers), rpe_index(centers + shift))


class TestRpeBias:
    def test_hand_case(self):
        centers = np.array([[0.0, 0.0, 0.0], [0.5, -0.5, 1.5]])
        idx = rpe_index(centers, t=1.0, max_rel=1.0)
        table = RpeTable(np.array([[[1.0, 2.0], [3.0, 4.0]],
                                   [[0.5, 0.0], [0.0, 0.5]],
                                   [[-1.0, 1.0], [2.0, -2.0]]]), t=1.0, max_rel=1.0)
        q = np.array([[[1.0, -1.0], [2.0, 0.5]]])
        r2 = math.sqrt(2.0)
        np.testing.assert_allclose(rpe_bias(q, idx, table)[0],
                                   [[2.5 / r2, -3.5 / r2], [12.0 / r2, 11.25 / r2]], rtol=1e-14)

    def test_zero_table(self):
        idx = rpe_index(np.random.default_rng(2).normal(size=(4, 3)))
        q = np.random.default_rng(3).normal(size=(2, 4, 3))
        assert np.all(rpe_bias(q, idx, RpeTable(np.zeros((3, 200, 6)))) == 0.0)


class TestPool:
    def test_means(self):
        feats = np.arange(12.0).reshape(4, 3)
        coords = np.arange(12.0).reshape(4, 3) * 0.5
        part = partition([1, 0, 1, 1])
        pooled, centers = region_pool(feats, coords, part)
        np.testing.assert_allclose(pooled, [feats[1], feats[[0, 2, 3]].mean(0)])
        np.testing.assert_allclose(centers, [coords[1], coords[[0, 2, 3]].mean(0)])

    def test_empty_region(self):
        part = RegionPartition(np.array([0, 0]), 2, np.zeros((2, 3)), np.zeros(2, int), 1)
        with pytest.raises(StateError):
            region_pool(np.zeros((2, 3)), np.zeros((2, 3)), part)


class TestAttention:
    def test_matches_reference(self):
        cfg = RdmConfig(dim=4, heads=2, layers=1, num_classes=2, t=0.5, max_rel=1.0)
        params = randomized(cfg, 0)
        rng = np.random.default_rng(1)
        x = rng.normal(size=(3, 4))
        centers = rng.uniform(-1.5, 1.5, (3, 3))
        got = region_attention_forward(x, centers, params, cfg).enhanced
        p = {k.split("layer0.")[1]: params[k].tolist() for k in params.names("rdm.layer0.")}
        want = ref_layer(x.tolist(), p, centers.tolist(), 2, 0.5, 1.0)
        np.testing.assert_allclose(got, want, rtol=1e-10, atol=1e-12)

    def test_single_region(self):
        cfg = RdmConfig(dim=8, heads=2, layers=2, num_classes=3)
        res = region_attention_forward(np.ones((1, 8)), np.zeros((1, 3)), randomized(cfg, 1), cfg)
        for a in res.attention:
            assert a.shape == (2, 1, 1) and np.all(a == 1.0)

    def test_rows_sum_to_one(self):
        cfg = RdmConfig(dim=8, heads=4, layers=2, num_classes=3)
        rng = np.random.default_rng(2)
        res = region_attention_forward(rng.normal(size=(7, 8)), rng.normal(size=(7, 3)), randomized(cfg, 2), cfg)
        for a in res.attention:
            assert np.all(a >= 0)
            np.testing.assert_allclose(a.sum(-1), 1.0, atol=1e-12)

    def test_region_permutation_equivariance(self):
        cfg = RdmConfig(dim=8, heads=2, layers=2, num_classes=3)
        params = randomized(cfg, 3)
        rng = np.random.default_rng(3)
        x, c = rng.normal(size=(6, 8)), rng.normal(size=(6, 3))
        perm = rng.permutation(6)
        a = region_attention_forward(x, c, params, cfg).enhanced
        b = region_attention_forward(x[perm], c[perm], params, cfg).enhanced
        np.testing.assert_allclose(b, a[perm], atol=1e-12)

    def test_zero_table_equals_disabled(self):
        cfg = RdmConfig(dim=8, heads=2, layers=2, num_classes=3)
        params = randomized(cfg, 4)
        for name in params.names("rdm."):
            if name.endswith("rpe"):
                params[name][...] = 0.0
        rng = np.random.default_rng(4)
        x, c = rng.normal(size=(5, 8)), rng.normal(size=(5, 3))
        on = region_attention_forward(x, c, params, cfg, use_rpe=True).enhanced
        off = region_attention_forward(x, c, params, cfg, use_rpe=False).enhanced
        assert np.array_equal(on, off)

    def test_plain_block_has_no_norm_params(self):
        names = RdmConfig(dim=8, heads=2, layers=1, plain_block=True).shapes()
        assert not any("ln" in n or "wo" in n for n in names)

    def test_bad_heads(self):
        with pytest.raises(ConfigError):
            RdmConfig(dim=10, heads=4)


class TestFusion:
    def test_same_region_same_feature_same_logits(self):
        cfg = RdmConfig(dim=8, heads=2, layers=1, num_classes=3)
        params = randomized(cfg, 5)
        feats = np.random.default_rng(5).normal(size=(6, 8))
        feats[3] = feats[1]
        part = partition([0, 1, 0, 1, 2, 2])
        out = rdm_forward(feats, np.random.default_rng(6).normal(size=(6, 3)), part, params, cfg)
        np.testing.assert_array_equal(out.logits[1], out.logits[3])

    def test_zero_weights_give_bias(self):
        cfg = RdmConfig(dim=8, heads=2, layers=1, num_classes=3)
        params = randomized(cfg, 6)
        params["rdm.fuse.w1"][...] = 0.0
        params["rdm.fuse.w2"][...] = 0.0
        feats = np.random.default_rng(7).normal(size=(4, 8))
        out = rdm_forward(feats, np.zeros((4, 3)), partition([0, 0, 1, 1]), params, cfg)
        np.testing.assert_array_equal(out.logits, np.repeat(params["rdm.fuse.b2"], 4, axis=0))


class TestBackward:
    @pytest.mark.parametrize("plain", [False, True])
    def test_matches_finite_differences(self, plain):
        cfg = RdmConfig(dim=8, heads=2, layers=2, num_classes=3, t=0.1, max_rel=0.4, plain_block=plain)
        params = randomized(cfg, 8)
        rng = np.random.default_rng(8)
        n = 30
        feats = rng.normal(size=(n, 8))
        coords = rng.uniform(0, 0.6, (n, 3))
        labels = rng.integers(0, 3, n)
        region_of = np.concatenate([np.arange(5), rng.integers(0, 5, n - 5)])
        part = partition(region_of)
        store = ParamStore()
        store.update(params)
        store.add("feats", feats)

        def loss(p):
            out = rdm_forward(p["feats"], coords, part, p, cfg)
            return cross_entropy_mean(out.logits, labels)[0]

        out = rdm_forward(feats, coords, part, store, cfg)
        _, g = cross_entropy_mean(out.logits, labels)
        store.zero_grad()
        g_feat = rdm_backward(out, g, store, cfg)
        analytic = {k: store.grad(k).copy() for k in store.names("rdm.")}
        analytic["feats"] = g_feat
        assert finite_diff_check(loss, store, analytic) < 1e-6

    def test_unused_bins_get_zero_gradient(self):
        cfg = RdmConfig(dim=4, heads=1, layers=1, num_classes=2, t=0.1, max_rel=1.0)
        params = randomized(cfg, 9)
        coords = np.array([[0.0, 0, 0], [0.0, 0, 0], [0.25, 0, 0], [0.25, 0, 0]])
        part = partition([0, 0, 1, 1])
        out = rdm_forward(np.random.default_rng(9).normal(size=(4, 4)), coords, part, params, cfg)
        _, g = cross_entropy_mean(out.logits, [0, 1, 1, 0])
        params.zero_grad()
        rdm_backward(out, g, params, cfg)
        grad = params.grad("rdm.layer0.rpe").reshape(3, 20, 4)
        used_x = set(rpe_index(out.centers, 0.1, 1.0)[0].ravel().tolist())
        assert used_x == {7, 10, 12}
        for b in range(20):
            if b not in used_x:
                assert np.all(grad[0, b] == 0.0)
        assert np.all(grad[1, np.arange(20) != 10] == 0.0)


class TestFlops:
    def reference(self, m, d, heads, layers, plain, bins):
        # (rows, inner, cols) of every matmul in one layer
        dh = d // heads
        shapes = [(m, d, d)] * 3 + [(m, d, 2 * d), (m, 2 * d, d)]
        shapes += [(m, dh, bins)] * (3 * heads)
        shapes += [(m, dh, m)] * (2 * heads)
        if not plain:
            shapes.append((m, d, d))
        return layers * sum(r * k * c for r, k, c in shapes)

    @pytest.mark.parametrize("m,d,plain,bins", [(1, 8, False, 200), (256, 128, False, 200),
                                                (512, 64, True, 40)])
    def test_tally(self, m, d, plain, bins):
        assert attention_flops(m, d, 8, 3, plain, bins) == self.reference(m, d, 8, 3, plain, bins)

    def test_doubling_tends_to_four(self):
        ratio = attention_flops(2 ** 20, 128, 8, 3) / attention_flops(2 ** 19, 128, 8, 3)
        assert 3.99 < ratio < 4.0

    def test_linear_in_layers(self):
        assert attention_flops(100, 16, 2, 6) == 2 * attention_flops(100, 16, 2, 3)


def test_attention_dump(tmp_path):
    cfg = RdmConfig(dim=8, heads=2, layers=2, num_classes=3)
    params = randomized(cfg, 10)
    part = partition([0, 1, 1, 2])
    part.region_class[...] = [0, 2, 1]
    out = rdm_forward(np.random.default_rng(10).normal(size=(4, 8)), np.eye(4, 3), part, params, cfg)
    files = write_attention_dump(tmp_path, out)
    assert sorted(p.name for p in files) == ["attn_l1_h1.csv", "attn_l1_h2.csv", "attn_l2_h1.csv",
                                             "attn_l2_h2.csv", "regions_meta.csv"]
    rows = np.loadtxt(tmp_path / "attn_l2_h1.csv", delimiter=",")
    assert np.array_equal(rows, out.attention[1][0])
    meta = (tmp_path / "regions_meta.csv").read_text().splitlines()
    assert meta[0] == "region_id,class_id,cx,cy,cz,point_count"
    assert meta[2].startswith("1,2,") and meta[2].endswith(",2")
