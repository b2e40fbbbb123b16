import numpy as np
import pytest
import torch

from netfx.diffcore import load_checkpoint, save_checkpoint
from netfx.dwr_model import DWRModel, GraphIndex, ModelArch, _validated_z
from netfx.netgraph import GraphError, Network, ring_lattice
from netfx.synthgen import ground_truth_attention, spectral_embed


def small_arch(d=4):
    return ModelArch(input_dim=d, encoder_widths=(6, 5), head_widths=(7, 7, 7))


def make_model(d=4, seed=0, **kwargs):
    return DWRModel(small_arch(d), np.random.default_rng(seed), **kwargs)


def ring_setup(n=10, d=4, seed=1):
    net = ring_lattice(n, 4)
    gi = GraphIndex.from_network(net)
    X = np.random.default_rng(seed).normal(size=(n, d))
    return net, gi, X


def t64(x):
    return torch.tensor(np.asarray(x), dtype=torch.float64)


# --- architecture and indexing ----------------------------------------------


def test_default_arch_widths():
    arch = ModelArch(input_dim=10)
    assert arch.encoder_widths == (32, 64)
    assert arch.head_widths == (128, 128, 128)
    assert arch.rep_dim == 64


def test_arch_json_round_trip():
    arch = small_arch()
    assert ModelArch.from_jsonable(arch.to_jsonable()) == arch


def test_graph_index_rejects_isolated():
    net = Network.from_edges([(0, 1)], n=3)
    with pytest.raises(GraphError, match="isolated"):
        GraphIndex.from_network(net)


def test_graph_index_self_edges_appended():
    net = ring_lattice(5, 2)
    gi = GraphIndex.from_network(net)
    assert gi.ext_rows.shape[0] == gi.rows.shape[0] + 5
    assert torch.equal(gi.ext_rows[-5:], torch.arange(5))
    assert torch.equal(gi.ext_cols[-5:], torch.arange(5))


def test_model_init_deterministic():
    a, b = make_model(seed=3), make_model(seed=3)
    for (name, block_a), block_b in zip(a.blocks().items(), b.blocks().values()):
        assert np.array_equal(block_a.get_flat(), block_b.get_flat()), name
    c = make_model(seed=4)
    assert not np.array_equal(a.encoder.get_flat(), c.encoder.get_flat())


# --- encoder -----------------------------------------------------------------


def test_encode_zero_params_give_zero():
    model = make_model()
    model.encoder.set_flat(np.zeros(model.encoder.size))
    _, gi, X = ring_setup()
    H = model.encode(t64(X))
    assert torch.all(H == 0)


def test_encode_identical_rows_map_identically():
    model = make_model()
    X = np.tile([0.3, -1.2, 0.5, 2.0], (6, 1))
    H = model.encode(t64(X))
    assert torch.equal(H[0], H[3])


def test_encode_output_width_is_last_encoder_width():
    model = DWRModel(ModelArch(input_dim=3), np.random.default_rng(0))
    H = model.encode(torch.zeros(5, 3, dtype=torch.float64))
    assert H.shape == (5, 64)


# --- attention ---------------------------------------------------------------


def test_attention_uniform_for_identical_encodings():
    # complete graph on 4 nodes: degree 3 everywhere
    net = Network.from_edges([(i, j) for i in range(4) for j in range(i + 1, 4)])
    gi = GraphIndex.from_network(net)
    model = make_model()
    H = torch.ones(4, 5, dtype=torch.float64)
    attn_nb, attn_self = model.attention_maps(H, gi)
    assert attn_nb.detach().numpy() == pytest.approx(np.full(12, 1 / 3), abs=1e-12)
    assert attn_self.detach().numpy() == pytest.approx(np.full(16, 1 / 4), abs=1e-12)


def test_attention_matches_generator_on_unit_norm_features():
    # with H equal to unit-norm covariates, dot products are cosines, so
    # the neighbour map must equal the generator's ground truth
    net = ring_lattice(12, 4)
    gi = GraphIndex.from_network(net)
    X = spectral_embed(net, 3)
    truth = ground_truth_attention(X, net)
    model = make_model(d=3)
    attn_nb, _ = model.attention_maps(t64(X), gi)
    assert attn_nb.detach().numpy() == pytest.approx(truth.values, abs=1e-12)


def test_attention_rows_sum_to_one():
    _, gi, X = ring_setup()
    model = make_model()
    fs = model.forward(gi, t64(X), torch.zeros(10, dtype=torch.float64))
    nb_sums = np.bincount(gi.rows.numpy(), weights=fs.attn_neighbor.detach().numpy(),
                          minlength=gi.n)
    self_sums = np.bincount(gi.ext_rows.numpy(), weights=fs.attn_self.detach().numpy(),
                            minlength=gi.n)
    assert nb_sums == pytest.approx(np.ones(gi.n), abs=1e-12)
    assert self_sums == pytest.approx(np.ones(gi.n), abs=1e-12)


def test_attention_disabled_gives_uniform_constants():
    _, gi, X = ring_setup()
    model = make_model(use_attention=False)
    attn_nb, attn_self = model.attention_maps(t64(X), gi)
    assert torch.all(attn_nb == 0.25)  # every degree is 4
    assert torch.all(attn_self == 0.2)
    assert not attn_nb.requires_grad


# --- exposure ----------------------------------------------------------------


def test_exposure_all_treated_is_one():
    _, gi, X = ring_setup()
    model = make_model()
    fs = model.forward(gi, t64(X), torch.ones(10, dtype=torch.float64))
    assert fs.z_hat.detach().numpy() == pytest.approx(np.ones(10), abs=1e-12)


def test_exposure_hand_weights():
    net = Network.from_edges([(0, 1), (1, 2)])
    gi = GraphIndex.from_network(net)
    model = make_model()
    attn = t64([1.0, 0.25, 0.75, 1.0])
    z = model.estimated_exposure(attn, gi, t64([0.0, 1.0, 1.0]))
    assert z[1].item() == pytest.approx(0.75)


def test_exposure_uniform_equals_neighbor_fraction_exactly():
    net = ring_lattice(9, 4)
    gi = GraphIndex.from_network(net)
    model = make_model(use_attention=False)
    rng = np.random.default_rng(7)
    t = (rng.random(9) < 0.5).astype(np.float64)
    z = model.estimated_exposure(None, gi, t64(t)).numpy()
    expected = np.array([t[net.neighbors(i)].sum() / 4 for i in range(9)])
    assert np.array_equal(z, expected)


# --- aggregation -------------------------------------------------------------


def test_aggregate_self_only_weights_give_relu_of_encoding():
    net = ring_lattice(6, 2)
    gi = GraphIndex.from_network(net)
    model = make_model()
    H = t64(np.random.default_rng(2).normal(size=(6, 5)))
    attn_self = torch.cat([torch.zeros(gi.rows.shape[0], dtype=torch.float64),
                           torch.ones(6, dtype=torch.float64)])
    R = model.aggregate(H, attn_self, gi)
    assert torch.allclose(R, torch.clamp(H, min=0.0), atol=0)


def test_aggregate_star_center_identical_neighbors():
    net = Network.from_edges([(0, 1), (0, 2), (0, 3)])
    gi = GraphIndex.from_network(net)
    model = make_model()
    h = np.array([0.5, -1.0, 2.0, 0.1, -0.2])
    H = t64(np.vstack([h, h, h, h]))
    _, attn_self = model.attention_maps(H, gi)
    R = model.aggregate(H, attn_self, gi)
    assert R[0].numpy() == pytest.approx(np.clip(h, 0, None), abs=1e-12)


# --- prediction --------------------------------------------------------------


def test_predict_zero_heads_give_zero():
    _, gi, X = ring_setup()
    model = make_model()
    model.head0.set_flat(np.zeros(model.head0.size))
    model.head1.set_flat(np.zeros(model.head1.size))
    fs = model.forward(gi, t64(X), t64(np.ones(10)))
    y = model.predict(fs.R, t64(np.ones(10)), fs.z_hat)
    assert torch.all(y == 0)


def test_predict_deterministic_and_head_selected():
    _, gi, X = ring_setup()
    model = make_model()
    t = t64([0, 1] * 5)
    fs = model.forward(gi, t64(X), t)
    y1 = model.predict(fs.R, t, fs.z_hat)
    y2 = model.predict(fs.R, t, fs.z_hat)
    assert torch.equal(y1, y2)
    # treated nodes must match head1's direct evaluation
    per_arm1 = model.head_outputs(fs.R, 1, fs.z_hat)
    treated = (t == 1).nonzero(as_tuple=True)[0]
    assert torch.allclose(y1[treated], per_arm1[treated], atol=0)


def test_predict_rejects_bad_inputs():
    _, gi, X = ring_setup()
    model = make_model()
    fs = model.forward(gi, t64(X), t64(np.zeros(10)))
    with pytest.raises(ValueError, match="binary"):
        model.predict(fs.R, t64(np.full(10, 0.5)), fs.z_hat)
    with pytest.raises(ValueError, match="outside"):
        model.predict(fs.R, t64(np.zeros(10)), t64(np.full(10, 1.5)))


def test_counterfactual_grid_six_values_per_node():
    _, gi, X = ring_setup()
    model = make_model()
    fs = model.forward(gi, t64(X), t64(np.zeros(10)))
    z_own = fs.z_hat.detach()
    grid = {}
    for arm in (0, 1):
        for name, z in (("zero", torch.zeros(10, dtype=torch.float64)),
                        ("own", z_own),
                        ("one", torch.ones(10, dtype=torch.float64))):
            grid[arm, name] = model.head_outputs(fs.R.detach(), arm, z)
    assert len(grid) == 6
    assert all(v.shape == (10,) for v in grid.values())


# --- effects -----------------------------------------------------------------


def test_effects_identical_heads_no_direct_effect():
    _, gi, X = ring_setup()
    model = make_model()
    model.head1.set_flat(model.head0.get_flat())
    fx = model.effect_estimates(gi, X, np.full(10, 0.5))
    assert fx.direct == pytest.approx(np.zeros(10), abs=1e-14)


def test_effects_z_insensitive_control_head_no_spillover():
    _, gi, X = ring_setup()
    model = make_model()
    # zero the z-column of head0's first layer: output becomes constant in z
    w = model.head0["l1_W"].detach().numpy().copy()
    w[-1, :] = 0.0
    model.head0.load_state_arrays({**model.head0.state_arrays(), "l1_W": w})
    fx = model.effect_estimates(gi, X, np.random.default_rng(0).uniform(size=10))
    assert fx.spillover == pytest.approx(np.zeros(10), abs=1e-14)


def test_effects_total_decomposes_at_full_exposure():
    _, gi, X = ring_setup()
    model = make_model(seed=5)
    fx = model.effect_estimates(gi, X, np.ones(10))
    assert fx.total == pytest.approx(fx.direct + fx.spillover, abs=1e-12)


# --- structural properties ---------------------------------------------------


def test_forward_permutation_equivariance():
    net, gi, X = ring_setup(n=8)
    model = make_model(seed=9)
    t = (np.random.default_rng(3).random(8) < 0.5).astype(np.float64)
    fs = model.forward(gi, t64(X), t64(t))

    perm = np.random.default_rng(4).permutation(8)
    inv = np.argsort(perm)
    # node i of the permuted graph is node perm[i] of the original
    edges = [(int(inv[i]), int(inv[j])) for i, j in net.undirected_pairs()]
    pnet = Network.from_edges(edges, n=8)
    pgi = GraphIndex.from_network(pnet)
    pfs = model.forward(pgi, t64(X[perm]), t64(t[perm]))

    assert pfs.H.detach().numpy() == pytest.approx(fs.H.detach().numpy()[perm], abs=1e-12)
    assert pfs.z_hat.detach().numpy() == pytest.approx(fs.z_hat.detach().numpy()[perm], abs=1e-12)
    assert pfs.R.detach().numpy() == pytest.approx(fs.R.detach().numpy()[perm], abs=1e-12)
    y = model.predict(fs.R, t64(t), fs.z_hat).detach().numpy()
    py = model.predict(pfs.R, t64(t[perm]), pfs.z_hat).detach().numpy()
    assert py == pytest.approx(y[perm], abs=1e-12)


def test_exposure_stays_in_unit_interval_through_training_steps():
    from netfx.diffcore import AdamState, adam_step, grad, weighted_mse

    net, gi, X = ring_setup(n=12)
    rng = np.random.default_rng(0)
    t = (rng.random(12) < 0.5).astype(np.float64)
    y = rng.normal(size=12)
    model = make_model(seed=2)
    states = {name: AdamState.for_block(b) for name, b in model.blocks().items()}
    for _ in range(5):
        def loss_fn():
            fs = model.forward(gi, t64(X), t64(t))
            pred = model.predict(fs.R, t64(t), fs.z_hat)
            return weighted_mse(pred, t64(y), torch.ones(12, dtype=torch.float64))

        _, grads = grad(loss_fn, model.parameters())
        for (name, block), g in zip(model.blocks().items(), grads):
            adam_step(block, g, states[name], lr=0.05)
        fs = model.forward(gi, t64(X), t64(t))
        z = fs.z_hat.detach().numpy()
        assert np.all(z >= -1e-12) and np.all(z <= 1 + 1e-12)
        _validated_z(fs.z_hat)


def test_model_checkpoint_round_trip(tmp_path):
    model = make_model(seed=11)
    path = tmp_path / "model.nfx"
    save_checkpoint(path, model.blocks(), {"arch": model.arch.to_jsonable()})
    meta, arrays = load_checkpoint(path)
    clone = DWRModel(ModelArch.from_jsonable(meta["arch"]), np.random.default_rng(99))
    for name, block in clone.blocks().items():
        block.load_state_arrays(arrays[name])
    _, gi, X = ring_setup()
    t = np.zeros(10)
    a = model.counterfactual_outcomes(gi, X, t, np.full(10, 0.3))
    b = clone.counterfactual_outcomes(gi, X, t, np.full(10, 0.3))
    assert np.array_equal(a, b)
