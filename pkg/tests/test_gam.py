import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hrrcnn.autodiff import DimensionError, ParameterError, ParamRegistry, Tensor, grad_check, sum_squares
from hrrcnn.gam import (
    GamConfig,
    aggregate,
    edge_scores,
    gam_forward,
    gam_params_from_registry,
    init_gam_params,
    normalize_attention,
)
from hrrcnn.geometry import Box
from hrrcnn.graphs import (
    ConfigurationError,
    GraphKind,
    Metric,
    RoiGeometry,
    ScaleGeometry,
    SemanticMetric,
    build_graph,
    pixel_grid_geometry,
)

KINDS = list(GraphKind)


def make_graph(kind, rng, N, D, metric=SemanticMetric(), tape=None, feats=None):
    f = Tensor(rng.normal(size=(N, D)) if feats is None else feats, requires_grad=True)
    if kind is GraphKind.PIXEL:
        geo = pixel_grid_geometry(Box(30, 25, 14, 9), 1)
        geo.coords = rng.uniform(20, 40, size=(N, 2))
        geo.offsets = None
    elif kind is GraphKind.SCALE:
        geo = ScaleGeometry(np.arange(N), N)
    else:
        geo = RoiGeometry(np.column_stack([rng.uniform(5, 60, (N, 2)), rng.uniform(3, 30, (N, 2))]))
    return build_graph(tape, kind, f, geo, metric), f


def make_params(kind, config, seed, randomize_fusion=True):
    reg = ParamRegistry()
    rng = np.random.default_rng(seed)
    p = init_gam_params(reg, "g", config, kind, rng)
    for W, b in p.edge_layers:
        b.data[:] = rng.normal(size=b.shape) * 0.3
    if randomize_fusion:
        p.fusion_w.data[:] += rng.normal(size=p.fusion_w.shape) * 0.2
        p.fusion_b.data[:] = rng.normal(size=p.fusion_b.shape) * 0.2
    return reg, p


def straight_line_oracle(kind, f, geo, p, config):
    """Per-edge loops in plain python/numpy; shares nothing with the library path."""
    N, D = f.shape
    g = config.metric.groups
    d = D // g
    layers = [(W.data, b.data) for W, b in p.edge_layers]
    alpha = np.zeros((N, N))
    for i in range(N):
        for j in range(N):
            sem = []
            for k in range(g):
                u, v = f[i, k * d : (k + 1) * d], f[j, k * d : (k + 1) * d]
                if config.metric.kind is Metric.GROUPED_DOT:
                    sem.append(sum(a * b for a, b in zip(u, v)) / math.sqrt(d))
                elif config.metric.kind is Metric.GROUPED_COSINE:
                    nu, nv = math.sqrt(sum(a * a for a in u)), math.sqrt(sum(b * b for b in v))
                    sem.append(sum(a * b for a, b in zip(u, v)) / (nu * nv))
                else:
                    sem.append(-math.sqrt(sum((a - b) ** 2 for a, b in zip(u, v))))
            if kind is GraphKind.PIXEL:
                w, h = geo.box.w, geo.box.h
                sp = [(geo.coords[i][0] - geo.coords[j][0]) / w, (geo.coords[i][1] - geo.coords[j][1]) / h]
            elif kind is GraphKind.SCALE:
                sp = [(geo.levels[i] - geo.levels[j]) / geo.P]
            else:
                bi, bj = geo.boxes[i], geo.boxes[j]
                sp = [(bi[0] - bj[0]) / bi[2], (bi[1] - bj[1]) / bi[3], bj[2] / bi[2], bj[3] / bi[3]]
            h_ = np.array(sem + sp)
            for li, (W, b) in enumerate(layers):
                h_ = np.array([sum(h_[a] * W[a, c] for a in range(len(h_))) + b[c] for c in range(W.shape[1])])
                if li < len(layers) - 1:
                    h_ = np.maximum(h_, 0.0)
            alpha[i, j] = h_[0]
    out = np.zeros((N, D))
    for i in range(N):
        z = alpha[i] / config.temperature
        e = [math.exp(v - max(z)) for v in z]
        w = [v / sum(e) for v in e]
        agg = f[i] + sum(w[j] * f[j] for j in range(N))
        out[i] = agg @ p.fusion_w.data + p.fusion_b.data
    return out


class TestEdgeScores:
    def test_zero_mlp(self):
        cfg = GamConfig(4)
        graph, _ = make_graph(GraphKind.ROI, np.random.default_rng(0), 3, 4)
        reg = ParamRegistry()
        p = init_gam_params(reg, "g", cfg, GraphKind.ROI, np.random.default_rng(0))
        for t in reg.tensors():
            t.data[:] = 0.0
        np.testing.assert_array_equal(edge_scores(None, graph, p).data, 0.0)

    def test_single_linear_layer(self):
        cfg = GamConfig(4, mlp_hidden=0)
        graph, _ = make_graph(GraphKind.ROI, np.random.default_rng(1), 3, 4)
        reg, p = make_params(GraphKind.ROI, cfg, 1)
        W, b = p.edge_layers[0]
        assert len(p.edge_layers) == 1
        expected = graph.edge_attrs.data @ W.data[:, 0] + b.data[0]
        np.testing.assert_allclose(edge_scores(None, graph, p).data, expected, atol=1e-14)

    def test_per_edge_loop(self):
        cfg = GamConfig(4)
        graph, _ = make_graph(GraphKind.ROI, np.random.default_rng(2), 3, 4)
        reg, p = make_params(GraphKind.ROI, cfg, 2)
        (W0, b0), (W1, b1) = p.edge_layers
        alpha = edge_scores(None, graph, p).data
        for i in range(3):
            for j in range(3):
                e = graph.edge_attrs.data[i, j]
                hid = np.maximum(e @ W0.data + b0.data, 0)
                assert alpha[i, j] == pytest.approx(float(hid @ W1.data[:, 0] + b1.data[0]), abs=1e-13)

    def test_dimension_mismatch(self):
        graph, _ = make_graph(GraphKind.ROI, np.random.default_rng(3), 3, 4)
        _, p = make_params(GraphKind.SCALE, GamConfig(4), 3)
        with pytest.raises(ConfigurationError):
            edge_scores(None, graph, p)


class TestNormalizeAttention:
    def test_zero_logits_uniform(self):
        w = normalize_attention(None, Tensor(np.zeros((4, 4))), 2.0).data
        np.testing.assert_allclose(w, 0.25, atol=1e-15)

    def test_hand_case(self):
        w = normalize_attention(None, Tensor([[0.0, 2 * math.log(2)]]), 2.0).data
        np.testing.assert_allclose(w, [[1 / 3, 2 / 3]], atol=1e-12)

    def test_row_shift_invariance(self):
        a = np.random.default_rng(4).normal(size=(3, 3))
        shifted = a.copy()
        shifted[1] += 17.0
        w0 = normalize_attention(None, Tensor(a), 2.0).data
        w1 = normalize_attention(None, Tensor(shifted), 2.0).data
        np.testing.assert_allclose(w1, w0, atol=1e-15)

    def test_nonpositive_temperature(self):
        with pytest.raises(ParameterError):
            normalize_attention(None, Tensor(np.zeros((2, 2))), 0.0)

    @given(st.integers(1, 9), st.integers(0, 2**31 - 1))
    def test_rows_stochastic(self, n, seed):
        a = np.random.default_rng(seed).normal(scale=30, size=(n, n))
        w = normalize_attention(None, Tensor(a), 2.0).data
        assert np.all(w >= 0)
        assert np.max(np.abs(w.sum(axis=-1) - 1.0)) <= 1e-12


class TestAggregate:
    def test_singleton(self):
        np.testing.assert_array_equal(aggregate(None, Tensor([[1.0, 0.0]]), Tensor([[1.0]])).data, [[2.0, 0.0]])

    def test_uniform_hand_case(self):
        f = Tensor([[1.0, 0.0], [0.0, 1.0], [2.0, 2.0]])
        out = aggregate(None, f, Tensor(np.full((3, 3), 1 / 3))).data
        np.testing.assert_allclose(out[0], [2.0, 1.0], atol=1e-15)

    def test_identity_weights(self):
        f = np.random.default_rng(5).normal(size=(4, 3))
        np.testing.assert_array_equal(aggregate(None, Tensor(f), Tensor(np.eye(4))).data, 2 * f)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            aggregate(None, Tensor(np.ones((3, 2))), Tensor(np.full((2, 2), 0.5)))


class TestGamForward:
    def test_zero_mlp_identity_fusion_is_mean_pooling(self):
        cfg = GamConfig(4)
        rng = np.random.default_rng(6)
        graph, f = make_graph(GraphKind.ROI, rng, 5, 4)
        reg = ParamRegistry()
        p = init_gam_params(reg, "g", cfg, GraphKind.ROI, rng)
        for W, b in p.edge_layers:
            W.data[:] = 0.0
        out = gam_forward(None, graph, p, cfg).data
        np.testing.assert_allclose(out, f.data + f.data.mean(axis=0), atol=1e-14)

    def test_singleton_doubles(self):
        cfg = GamConfig(2)
        reg = ParamRegistry()
        p = init_gam_params(reg, "g", cfg, GraphKind.ROI, np.random.default_rng(0))
        graph = build_graph(None, GraphKind.ROI, Tensor([[1.5, -2.0]]), RoiGeometry(np.array([[4.0, 4, 2, 2]])))
        np.testing.assert_array_equal(gam_forward(None, graph, p, cfg).data, [[3.0, -4.0]])

    @pytest.mark.parametrize("metric", list(Metric), ids=lambda m: m.value)
    @pytest.mark.parametrize("kind", KINDS, ids=lambda k: k.value)
    def test_straight_line_oracle(self, kind, metric):
        for trial in range(3):
            rng = np.random.default_rng([trial, 11])
            N = int(rng.integers(3, 9))
            cfg = GamConfig(6, metric=SemanticMetric(metric, 2))
            graph, f = make_graph(kind, rng, N, 6, cfg.metric)
            _, p = make_params(kind, cfg, trial)
            expected = straight_line_oracle(kind, f.data, graph.geometry, p, cfg)
            np.testing.assert_allclose(gam_forward(None, graph, p, cfg).data, expected, rtol=0, atol=1e-12)

    @pytest.mark.parametrize("kind", [GraphKind.ROI, GraphKind.PIXEL], ids=lambda k: k.value)
    def test_permutation_equivariance(self, kind):
        rng = np.random.default_rng(12)
        cfg = GamConfig(6)
        graph, f = make_graph(kind, rng, 6, 6)
        _, p = make_params(kind, cfg, 12)
        perm = rng.permutation(6)
        geo = graph.geometry
        if kind is GraphKind.ROI:
            pgeo = RoiGeometry(geo.boxes[perm])
        else:
            pgeo = type(geo)(geo.coords[perm], geo.box)
        pgraph = build_graph(None, kind, Tensor(f.data[perm]), pgeo, cfg.metric)
        out = gam_forward(None, graph, p, cfg).data
        np.testing.assert_allclose(gam_forward(None, pgraph, p, cfg).data, out[perm], atol=1e-9)

    def test_scale_permutation_equivariance(self):
        rng = np.random.default_rng(13)
        cfg = GamConfig(4)
        f = rng.normal(size=(4, 4))
        _, p = make_params(GraphKind.SCALE, cfg, 13)
        levels = np.arange(4)
        perm = np.array([2, 0, 3, 1])
        a = build_graph(None, GraphKind.SCALE, Tensor(f), ScaleGeometry(levels, 4), cfg.metric)
        b = build_graph(None, GraphKind.SCALE, Tensor(f[perm]), ScaleGeometry(levels[perm], 4), cfg.metric)
        np.testing.assert_allclose(gam_forward(None, b, p, cfg).data, gam_forward(None, a, p, cfg).data[perm], atol=1e-9)

    def test_high_temperature_limit(self):
        rng = np.random.default_rng(14)
        cfg = GamConfig(4, temperature=1e6)
        graph, f = make_graph(GraphKind.ROI, rng, 5, 4)
        _, p = make_params(GraphKind.ROI, cfg, 14)
        uniform = (f.data + f.data.mean(axis=0)) @ p.fusion_w.data + p.fusion_b.data
        np.testing.assert_allclose(gam_forward(None, graph, p, cfg).data, uniform, atol=1e-5)

    @pytest.mark.parametrize("kind", KINDS, ids=lambda k: k.value)
    def test_gradient(self, kind):
        rng = np.random.default_rng(15)
        cfg = GamConfig(4)
        N = 4
        feats = rng.normal(size=(N, 4))
        reg, p = make_params(kind, cfg, 15)
        f = Tensor(feats, requires_grad=True)
        geo = make_graph(kind, np.random.default_rng(16), N, 4)[0].geometry

        def loss(tape):
            graph = build_graph(tape, kind, f, geo, cfg.metric)
            return sum_squares(tape, gam_forward(tape, graph, p, cfg))

        assert grad_check(loss, p.tensors() + [f], 1e-5) <= 1e-6

    @settings(max_examples=25)
    @given(st.integers(-40, 40), st.integers(-40, 40))
    def test_roi_translation_bit_exact(self, tx, ty):
        rng = np.random.default_rng(17)
        cfg = GamConfig(4)
        f = rng.normal(size=(4, 4))
        boxes = np.round(np.column_stack([rng.uniform(5, 60, (4, 2)), rng.uniform(3, 30, (4, 2))]) * 8) / 8
        _, p = make_params(GraphKind.ROI, cfg, 17)
        a = build_graph(None, GraphKind.ROI, Tensor(f), RoiGeometry(boxes))
        b = build_graph(None, GraphKind.ROI, Tensor(f), RoiGeometry(boxes + [tx, ty, 0, 0]))
        np.testing.assert_array_equal(gam_forward(None, a, p, cfg).data, gam_forward(None, b, p, cfg).data)

    def test_batched_graphs(self):
        rng = np.random.default_rng(18)
        cfg = GamConfig(4)
        bx = np.column_stack([rng.uniform(10, 50, (3, 2)), rng.uniform(5, 20, (3, 2))])
        f = rng.normal(size=(3, 4, 4))
        _, p = make_params(GraphKind.PIXEL, cfg, 18)
        batched = gam_forward(None, build_graph(None, GraphKind.PIXEL, Tensor(f), pixel_grid_geometry(bx, 2)), p, cfg)
        for r in range(3):
            g = build_graph(None, GraphKind.PIXEL, Tensor(f[r]), pixel_grid_geometry(Box(*bx[r]), 2))
            np.testing.assert_allclose(batched.data[r], gam_forward(None, g, p, cfg).data, atol=1e-13)

    def test_trace(self):
        cfg = GamConfig(4)
        graph, _ = make_graph(GraphKind.ROI, np.random.default_rng(19), 3, 4)
        _, p = make_params(GraphKind.ROI, cfg, 19)
        tr = gam_forward(None, graph, p, cfg, trace=True)
        np.testing.assert_allclose(tr.weights.data.sum(axis=-1), 1.0, atol=1e-12)
        np.testing.assert_array_equal(tr.output.data, gam_forward(None, graph, p, cfg).data)

    def test_feature_dim_mismatch(self):
        graph, _ = make_graph(GraphKind.ROI, np.random.default_rng(20), 3, 4)
        _, p = make_params(GraphKind.ROI, GamConfig(6), 20)
        with pytest.raises(ConfigurationError):
            gam_forward(None, graph, p, GamConfig(6))


class TestGamParams:
    def test_init(self):
        cfg = GamConfig(8)
        reg = ParamRegistry()
        p = init_gam_params(reg, "g", cfg, GraphKind.ROI, np.random.default_rng(0))
        np.testing.assert_array_equal(p.fusion_w.data, np.eye(8))
        assert np.all(p.fusion_b.data == 0)
        assert all(np.all(b.data == 0) for _, b in p.edge_layers)
        limit = math.sqrt(6 / (6 + 16))
        assert np.all(np.abs(p.edge_layers[0][0].data) <= limit)
        assert p.attention_size() == 6 * 16 + 16 + 16 + 1
        assert p.fusion_size() == 8 * 8 + 8

    def test_from_registry(self):
        cfg = GamConfig(4)
        reg = ParamRegistry()
        p = init_gam_params(reg, "gam.roi", cfg, GraphKind.ROI, np.random.default_rng(0))
        q = gam_params_from_registry(reg, "gam.roi")
        assert [t.name for t in q.tensors()] == [t.name for t in p.tensors()]
        with pytest.raises(KeyError):
            gam_params_from_registry(reg, "gam.none")

    def test_bad_config(self):
        with pytest.raises(ConfigurationError):
            GamConfig(5)
        with pytest.raises(ConfigurationError):
            GamConfig(4, temperature=0.0)
