import itertools

import numpy as np
import pytest

from bevinterp import autodiff as ad
from bevinterp.autodiff import Parameter, Tensor, finite_diff_gradient, tsum
from bevinterp.encoders import BevFeature, Encoder, EncoderSpec, encode
from bevinterp.interpreter import (
    InterpreterNet,
    PromptSet,
    RegistryError,
    SimilarityMatrix,
    SpecificPrompt,
    channel_similarity,
    dense_param_count,
    init_prompt_lowrank,
    init_prompt_sampling,
    interpret,
    lowrank_param_count,
    refine_with_prompts,
    reorganize,
    resize_neighbor,
    resizer_param_count,
    spatial_attention,
)
from bevinterp.scene import GridSpec, generate_dataset, rasterize

from test_autodiff import rel_err

EGO_GRID = GridSpec(1.0, 8, 16)
EXTENT = (0.0, 16.0, 0.0, 8.0)


def mini_net(c1=8, h1=4, w1=4, **kw):
    kw.setdefault("d_k", 16)
    kw.setdefault("seed", 7)
    return InterpreterNet(c1=c1, h1=h1, w1=w1, **kw)


def feat(c, h, w, seed=0, encoder_id="x", cell=1.0):
    rng = np.random.default_rng(seed)
    return BevFeature(data=Tensor(rng.normal(size=(c, h, w))), encoder_id=encoder_id,
                      grid=GridSpec(cell, h, w))


# -- resize ------------------------------------------------------------------

def test_resize_pools_2x2_blocks():
    data = np.arange(16 * 32 * 32, dtype=np.float64).reshape(16, 32, 32)
    f = BevFeature(data=Tensor(data), encoder_id="n", grid=GridSpec(0.5, 32, 32))
    out = resize_neighbor(f, (16, 16))
    assert out.data.shape == (16, 16, 16)
    blocks = data.reshape(16, 16, 2, 16, 2).max(axis=(2, 4))
    np.testing.assert_array_equal(out.data.data, blocks)


def test_resize_ratio_one_identity():
    f = feat(4, 8, 8, seed=1)
    out = resize_neighbor(f, (8, 8))
    assert out.data is f.data


def test_resize_constant_preserved():
    f = BevFeature(data=Tensor(np.full((3, 8, 8), 2.5)), encoder_id="n",
                   grid=GridSpec(0.5, 8, 8))
    out = resize_neighbor(f, (4, 4))
    assert np.all(out.data.data == 2.5)


def test_resize_non_integer_ratio_rejected():
    f = feat(3, 9, 9)
    with pytest.raises(ad.ShapeError):
        resize_neighbor(f, (4, 4))


# -- channel similarity --------------------------------------------------------

def test_similarity_rows_sum_to_one():
    net = mini_net()
    rng = np.random.default_rng(2)
    for i in range(20):
        fe = feat(8, 4, 4, seed=i)
        fn = feat(6, 4, 4, seed=100 + i)
        m = channel_similarity(fe, fn, net)
        np.testing.assert_allclose(m.m.data.sum(axis=1), np.ones(8), atol=1e-9)


def test_similarity_zero_neighbor_uniform():
    net = mini_net()
    fe = feat(8, 4, 4, seed=3)
    fn = BevFeature(data=Tensor(np.zeros((6, 4, 4))), encoder_id="n",
                    grid=GridSpec(1.0, 4, 4))
    m = channel_similarity(fe, fn, net)
    np.testing.assert_allclose(m.m.data, np.full((8, 6), 1 / 6), atol=1e-12)


def test_similarity_hw_mismatch():
    net = mini_net()
    with pytest.raises(ad.ShapeError):
        channel_similarity(feat(8, 4, 4), feat(6, 4, 5), net)


def orthonormal_rows(c, hw, seed):
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.normal(size=(hw, c)))
    return q.T  # [c, hw], orthonormal rows


def test_permutation_recovery_all_24():
    # orthogonal 4-channel fixture, shared random W for queries and keys
    c, h, w = 4, 4, 4
    hw = h * w
    base = orthonormal_rows(c, hw, seed=11) * 4.0
    net = mini_net(c1=c, h1=h, w1=w, d_k=64, seed=13)
    net.wk.tensor.data[:] = net.wq.tensor.data  # shared init
    f_ego = BevFeature(data=Tensor(base.reshape(c, h, w)), encoder_id="e",
                       grid=GridSpec(1.0, h, w))
    for perm in itertools.permutations(range(c)):
        perm = list(perm)
        fn = BevFeature(data=Tensor(base[perm].reshape(c, h, w)), encoder_id="n",
                        grid=GridSpec(1.0, h, w))
        m = channel_similarity(f_ego, fn, net)
        picks = m.m.data.argmax(axis=1)
        # neighbor channel j holds ego channel perm[j]; row i must pick it back
        assert [perm[j] for j in picks] == list(range(c))
        assert sorted(picks.tolist()) == list(range(c))  # bijection


# -- reorganize / refine ---------------------------------------------------------

def test_reorganize_identity_matrix_is_layer_norm():
    net = mini_net(c1=4, h1=4, w1=4)
    fn = feat(4, 4, 4, seed=5)
    m = SimilarityMatrix(m=Tensor(np.eye(4)))
    s = Tensor(np.zeros((4, 4, 4)))
    f_r, _ = reorganize(m, fn, s, net)
    expected = ad.layer_norm_rows(Tensor(fn.data.data.reshape(4, 16)), net.ln_eps)
    np.testing.assert_allclose(f_r.data.reshape(4, 16), expected.data, atol=1e-12)


def test_reorganize_uniform_rows_collapse_channels():
    net = mini_net(c1=4, h1=4, w1=4)
    fn = feat(6, 4, 4, seed=6)
    m = SimilarityMatrix(m=Tensor(np.full((4, 6), 1 / 6)))
    mixed = (np.full((4, 6), 1 / 6) @ fn.data.data.reshape(6, 16))
    assert np.allclose(mixed, mixed[0])  # identical before LN affine
    f_r, _ = reorganize(m, fn, Tensor(np.zeros((6, 4, 4))), net)
    assert np.allclose(f_r.data[0], f_r.data[1])


def test_reorganize_gradient_wrt_m():
    net = mini_net(c1=3, h1=2, w1=3)
    rng = np.random.default_rng(8)
    fn = feat(4, 2, 3, seed=9)
    s = Tensor(rng.normal(size=(4, 2, 3)))
    pm = Parameter("m", np.abs(rng.normal(size=(3, 4))) + 0.1)

    def f(q):
        f_r, _ = reorganize(SimilarityMatrix(m=q.tensor), fn, s, net)
        return tsum(f_r * Tensor(coeff))

    coeff = rng.normal(size=(3, 2, 3))
    f(pm).backward()
    numeric = finite_diff_gradient(f, pm, h=1e-6)
    assert rel_err(pm.tensor.grad, numeric) < 1e-4


def test_refine_with_prompts_sums():
    rng = np.random.default_rng(10)
    f_r = Tensor(rng.normal(size=(4, 4, 4)))
    prompts = PromptSet(np.zeros((4, 4, 4)))
    f_g, f_s = refine_with_prompts(f_r, Tensor(-f_r.data), prompts)
    np.testing.assert_array_equal(f_g.data, f_r.data)       # G = 0
    np.testing.assert_allclose(f_s.data, np.zeros_like(f_r.data), atol=1e-15)
    # additivity under scaling
    a = 2.5
    prompts2 = PromptSet(rng.normal(size=(4, 4, 4)))
    s_r = Tensor(rng.normal(size=(4, 4, 4)))
    g1, s1 = refine_with_prompts(f_r, s_r, prompts2)
    prompts2.general.tensor.data *= a
    g2, s2 = refine_with_prompts(Tensor(a * f_r.data), Tensor(a * s_r.data), prompts2)
    np.testing.assert_allclose(g2.data, a * g1.data, atol=1e-12)
    np.testing.assert_allclose(s2.data, a * s1.data, atol=1e-12)


# -- spatial attention -----------------------------------------------------------

def test_attention_rows_sum_to_one():
    net = mini_net(c1=4, h1=6, w1=5, window=4)
    f_ego = feat(4, 6, 5, seed=12)
    f_ref = Tensor(np.random.default_rng(13).normal(size=(4, 6, 5)))
    collect = {}
    spatial_attention(f_ego, f_ref, net, collect=collect)
    for axis in ("h", "w"):
        attn, valid = collect[axis]
        np.testing.assert_allclose(attn.sum(axis=1), np.ones(len(attn)), atol=1e-9)
        assert np.all(attn[~valid] < 1e-12)  # masked keys get zero weight


def test_attention_uniform_gives_axis_mean_plus_residual():
    c, h, w = 4, 8, 8
    net = mini_net(c1=c, h1=h, w1=w, window=None)
    for axis in ("h", "w"):
        net.axial[(axis, "wq")].tensor.data[:] = 0.0
        net.axial[(axis, "wk")].tensor.data[:] = 0.0
        net.axial[(axis, "wv")].tensor.data[:] = np.eye(c)
        net.axial[(axis, "wo")].tensor.data[:] = np.eye(c)
    rng = np.random.default_rng(14)
    f_ego = feat(c, h, w, seed=15)
    ref = rng.normal(size=(c, h, w))
    out = spatial_attention(f_ego, Tensor(ref), net)
    y1 = ref.mean(axis=1, keepdims=True) + ref          # height pass: column means
    y2 = y1.mean(axis=2, keepdims=True) + y1            # width pass: row means
    np.testing.assert_allclose(out.data, y2, atol=1e-10)


def test_attention_gradients_match_fd():
    net = mini_net(c1=8, h1=4, w1=4, window=4, seed=21)
    rng = np.random.default_rng(16)
    for axis in ("h", "w"):
        net.axial[(axis, "wo")].tensor.data[:] = rng.normal(0, 0.1, size=(8, 8))
    f_ego = feat(8, 4, 4, seed=17)
    coeff = rng.normal(size=(8, 4, 4))
    for pname in [("h", "wq"), ("h", "wv"), ("w", "wk"), ("w", "wo")]:
        p = net.axial[pname]

        def f(q, _p=p):
            ref = Tensor(np.random.default_rng(18).normal(size=(8, 4, 4)))
            return tsum(spatial_attention(f_ego, ref, net) * Tensor(coeff))

        p.tensor.zero_grad()
        f(p).backward()
        numeric = finite_diff_gradient(f, p, h=1e-5)
        assert rel_err(p.tensor.grad, numeric) < 1e-4, pname


def test_attention_pad_and_mask_path():
    # height 6 with window 4 pads to 8; padded keys must not leak
    net = mini_net(c1=4, h1=6, w1=4, window=4, seed=22)
    f_ego = feat(4, 6, 4, seed=19)
    f_ref = Tensor(np.random.default_rng(20).normal(size=(4, 6, 4)))
    collect = {}
    out = spatial_attention(f_ego, f_ref, net, collect=collect)
    assert out.shape == (4, 6, 4)
    attn, valid = collect["h"]
    assert (~valid).sum() > 0
    assert np.all(attn[~valid] < 1e-12)


# -- interpret ---------------------------------------------------------------

def build_pipeline(channel_adapter="matmul"):
    net = mini_net(c1=8, h1=4, w1=4, d_k=16, window=4,
                   channel_adapter=channel_adapter, seed=23)
    prompts = PromptSet(np.random.default_rng(24).normal(size=(8, 4, 4)) * 0.1)
    f_ego = feat(8, 4, 4, seed=25, encoder_id="ego")
    return net, prompts, f_ego


@pytest.mark.parametrize("adapter", ["matmul", "conv"])
@pytest.mark.parametrize("c2,ratio", [(6, 1), (4, 2), (8, 1)])
def test_interpret_shape_closure(adapter, c2, ratio):
    net, prompts, f_ego = build_pipeline(adapter)
    rng = np.random.default_rng(26)
    prompts.register(SpecificPrompt("n", dense=rng.normal(size=(c2, 4, 4)) * 0.1))
    net.add_resizer("n", c2)
    fn = BevFeature(data=Tensor(rng.normal(size=(c2, 4 * ratio, 4 * ratio))),
                    encoder_id="n", grid=GridSpec(1.0 / ratio, 4 * ratio, 4 * ratio))
    out, inter = interpret(f_ego, fn, "n", net, prompts)
    assert out.shape == (8, 4, 4)
    assert inter["m"].shape == (8, c2)
    assert inter["f_g"].shape == (8, 4, 4)


def test_interpret_unknown_id():
    net, prompts, f_ego = build_pipeline()
    fn = feat(6, 4, 4, seed=27)
    with pytest.raises(RegistryError):
        interpret(f_ego, fn, "nope", net, prompts)


@pytest.mark.parametrize("adapter", ["matmul", "conv"])
def test_interpret_gradient_reaches_prompt(adapter):
    net, prompts, f_ego = build_pipeline(adapter)
    rng = np.random.default_rng(28)
    prompts.register(SpecificPrompt("n", dense=rng.normal(size=(6, 4, 4)) * 0.1))
    net.add_resizer("n", 6)
    fn = feat(6, 4, 4, seed=29, encoder_id="n")
    out, _ = interpret(f_ego, fn, "n", net, prompts)
    tsum(out * out).backward()
    sp = prompts.get("n")
    assert sp.param.tensor.grad is not None
    assert np.linalg.norm(sp.param.tensor.grad) > 1e-8


def test_interpret_full_gradient_c1_8_c2_6():
    # end-to-end check through resize, similarity, LN, prompts, attention
    net, prompts, f_ego = build_pipeline("conv")
    rng = np.random.default_rng(30)
    for axis in ("h", "w"):
        net.axial[(axis, "wo")].tensor.data[:] = rng.normal(0, 0.1, size=(8, 8))
    prompts.register(SpecificPrompt("n", dense=rng.normal(size=(6, 4, 4)) * 0.1))
    net.add_resizer("n", 6)
    fn = feat(6, 8, 8, seed=31, encoder_id="n")
    coeff = rng.normal(size=(8, 4, 4))

    targets = [prompts.get("n").param, net.resizer("n"), net.wq,
               prompts.general, net.ln_s_gain, net.axial[("w", "wv")]]
    for p in targets:
        def f(q, _p=p):
            out, _ = interpret(f_ego, fn, "n", net, prompts)
            return tsum(out * Tensor(coeff))

        p.tensor.zero_grad()
        f(p).backward()
        numeric = finite_diff_gradient(f, p, h=1e-5)
        assert rel_err(p.tensor.grad, numeric) < 1e-4, p.name


# -- prompt initialization --------------------------------------------------------

def make_encoder_and_data(n_scenes=6):
    spec = EncoderSpec("enc", 16, 1, 5, "relu", EGO_GRID)
    enc = Encoder(spec)
    ds = generate_dataset(3, n_scenes, 2, EXTENT)
    return enc, ds


def test_sampling_init_single_sample_equals_feature():
    enc, ds = make_encoder_and_data()
    prompt = init_prompt_sampling(enc, ds, 1, (8, 16), seed=0)
    rng = np.random.default_rng(0)
    idx = int(rng.choice(len(ds.split_scenes("train")), size=1, replace=False)[0])
    expected = encode(enc, rasterize(ds.split_scenes("train")[idx], EGO_GRID)).data.data
    np.testing.assert_array_equal(prompt, expected)


def test_sampling_init_identical_scenes():
    enc, _ = make_encoder_and_data()
    from bevinterp.scene import Dataset, generate_scene

    scene = generate_scene(7, 2, EXTENT)
    ds = Dataset(scenes=[scene] * 4, splits={"train": [0, 1, 2, 3], "val": [], "test": []})
    prompt = init_prompt_sampling(enc, ds, 3, (8, 16), seed=1)
    expected = encode(enc, rasterize(scene, EGO_GRID)).data.data
    np.testing.assert_allclose(prompt, expected, atol=1e-12)


def test_sampling_init_mean_convexity():
    enc, ds = make_encoder_and_data()
    n = 4
    prompt = init_prompt_sampling(enc, ds, n, (8, 16), seed=2)
    rng = np.random.default_rng(2)
    idx = rng.choice(len(ds.split_scenes("train")), size=n, replace=False)
    means = []
    for i in idx:
        f = encode(enc, rasterize(ds.split_scenes("train")[int(i)], EGO_GRID)).data.data
        means.append(f.mean())
    assert min(means) - 1e-12 <= prompt.mean() <= max(means) + 1e-12


def test_sampling_init_downsamples_finer_encoder():
    fine = GridSpec(0.5, 16, 32)
    spec = EncoderSpec("fine", 16, 1, 6, "relu", fine)
    enc = Encoder(spec)
    ds = generate_dataset(4, 4, 2, EXTENT)
    prompt = init_prompt_sampling(enc, ds, 2, (8, 16), seed=3)
    assert prompt.shape == (16, 8, 16)


def test_lowrank_param_counts():
    # full-scale arithmetic for a 512-channel neighbor at 100x352
    assert dense_param_count(512, 100, 352) == 18_022_400
    assert lowrank_param_count(512, 20, 100, 352) == 512 * 20 * 452 == 4_628_480
    assert lowrank_param_count(16, 1, 16, 16, t=4) == 128
    sp = init_prompt_lowrank(16, 16, 16, 1, 4, seed=0, encoder_id="x")
    assert sp.param_count() == 128
    assert sp.materialize().shape == (16, 16, 16)


def test_lowrank_rank_bound():
    for r in (1, 2, 4):
        sp = init_prompt_lowrank(8, 6, 6, r, 1, seed=1, encoder_id="x")
        dense = sp.materialize().data
        for ch in dense:
            assert np.linalg.matrix_rank(ch, tol=1e-10) <= r


def test_lowrank_depth_repeat_structure():
    sp = init_prompt_lowrank(8, 4, 4, 1, 4, seed=2, encoder_id="x")
    dense = sp.materialize().data
    for base in range(2):
        for rep in range(1, 4):
            np.testing.assert_array_equal(dense[base * 4], dense[base * 4 + rep])


def test_lowrank_invalid_args():
    with pytest.raises(ValueError):
        init_prompt_lowrank(8, 4, 4, 0, 1, seed=0)
    with pytest.raises(ValueError):
        init_prompt_lowrank(8, 4, 4, 5, 1, seed=0)
    with pytest.raises(ValueError):
        init_prompt_lowrank(8, 4, 4, 1, 3, seed=0)    # 3 does not divide 8
    with pytest.raises(ValueError):
        init_prompt_lowrank(8, 4, 4, 2, 2, seed=0)    # depth scaling needs r == 1


def test_resizer_param_count_and_registry():
    net = mini_net()
    p = net.add_resizer("n", 6)
    assert p.count == resizer_param_count(8, 6) == 48
    with pytest.raises(RegistryError):
        net.add_resizer("n", 6)
    with pytest.raises(RegistryError):
        net.resizer("other")


def test_freeze_partition_covers_interpreter():
    net, prompts, _ = build_pipeline()
    prompts.register(SpecificPrompt("n", dense=np.zeros((6, 4, 4))))
    net.add_resizer("n", 6)
    core = {p.name for p in net.core_parameters()} | {prompts.general.name}
    phase2_set = {p.name for p in prompts.get("n").parameters()} | {net.resizer("n").name}
    every = {p.name for p in net.parameters()} | {p.name for p in prompts.parameters()}
    assert core.isdisjoint(phase2_set)
    assert core | phase2_set == every
