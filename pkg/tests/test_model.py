import time

import numpy as np
import pytest

from lehd import tensor as T
from lehd.model import (DecodeState, LehdModel, ModelConfig, apply_action, attention_layer,
                        construct, construct_batch, decode_step, encode, held_decode_step,
                        held_raw_logits, initial_state, param_count)
from lehd.routing import (CvrpInstance, TspInstance, generate_cvrp, generate_tsp,
                          validate_cvrp, validate_tour)

SMALL = ModelConfig(embed_dim=16, decoder_layers=2, heads=2, ff_dim=32)


@pytest.fixture(scope="module")
def model():
    return LehdModel.initialize(SMALL, 0)


@pytest.fixture(scope="module")
def cvrp_model():
    return LehdModel.initialize(ModelConfig(problem="cvrp", embed_dim=16, decoder_layers=2,
                                            heads=2, ff_dim=32), 1)


@pytest.fixture(scope="module")
def held_model():
    return LehdModel.initialize(ModelConfig(embed_dim=16, decoder_layers=2, heads=2, ff_dim=32,
                                            arch="held"), 2)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(embed_dim=10, heads=4)
    with pytest.raises(ValueError):
        ModelConfig(decoder_layers=0)
    with pytest.raises(ValueError):
        ModelConfig(normalization="layer")
    full = ModelConfig.full_scale()
    assert (full.embed_dim, full.decoder_layers, full.heads, full.ff_dim) == (128, 6, 8, 512)
    assert ModelConfig().normalization == "none"


def test_param_count_pure_function_of_config():
    assert param_count(SMALL) == sum(p.size for p in LehdModel.initialize(SMALL, 5).params.values())
    assert param_count(ModelConfig()) == param_count(ModelConfig())
    assert param_count(ModelConfig(problem="cvrp")) > param_count(ModelConfig())


def test_attention_single_row(model):
    H = T.tensor(np.random.default_rng(0).random((1, 16)))
    out = attention_layer(H, model.params, "enc.0", 2)
    assert out.shape == (1, 16) and np.all(np.isfinite(out.data))


def test_attention_permutation_equivariant(model, rng):
    H = rng.standard_normal((7, 16))
    perm = rng.permutation(7)
    a = attention_layer(T.tensor(H), model.params, "dec.0", 2).data
    b = attention_layer(T.tensor(H[perm]), model.params, "dec.0", 2).data
    assert np.abs(a[perm] - b).max() < 1e-9


def test_attention_zero_ff_is_identity_on_residual(rng):
    m = LehdModel.initialize(SMALL, 3)
    for k in ("enc.0.ff2.W", "enc.0.ff2.b"):
        m.params[k].data[...] = 0.0
    H = T.tensor(rng.standard_normal((5, 16)))
    from lehd.model import mha
    h_hat = H.data + mha(T.reshape(H, (1, 5, 16)), T.reshape(H, (1, 5, 16)), m.params, "enc.0", 2).data[0]
    out = attention_layer(H, m.params, "enc.0", 2).data
    assert np.array_equal(out, h_hat)


def test_attention_dimension_mismatch(model):
    with pytest.raises(T.ShapeError):
        attention_layer(T.tensor(np.zeros((3, 8))), model.params, "enc.0", 2)


@pytest.mark.parametrize("normalization", ["batch", "instance"])
def test_normalization_variants_run(normalization, rng):
    cfg = ModelConfig(embed_dim=16, decoder_layers=1, heads=2, ff_dim=32, normalization=normalization)
    m = LehdModel.initialize(cfg, 0)
    sol = construct(generate_tsp(8, rng), m, rng=0)
    assert len(sol.order) == 8


def test_encode_shapes_and_duplicates(model, cvrp_model):
    inst = TspInstance([[0.1, 0.2], [0.5, 0.5], [0.1, 0.2], [0.9, 0.3]])
    H = encode(inst, model).data
    assert H.shape == (4, 16)
    assert np.array_equal(H[0], H[2])
    c = generate_cvrp(6, capacity=20, rng=0)
    assert encode(c, cvrp_model).shape == (7, 16)
    assert c.features()[0, 2] == 0.0


def _tsp_state(model, n=8, seed=0, selected=3):
    inst = generate_tsp(n, seed)
    st = initial_state(inst, model, first=0)
    for _ in range(selected - 1):
        apply_action(st, 2)
    return st


def test_decode_step_distribution(model):
    st = _tsp_state(model)
    p = decode_step(st, model).data
    assert p.shape == (len(st.available) + 2,)
    assert p[0] == 0.0 and p[1] == 0.0
    assert abs(p.sum() - 1) < 1e-12


def test_decode_step_single_available(model):
    st = _tsp_state(model, n=5, selected=4)
    assert len(st.available) == 1
    assert decode_step(st, model).data[2] == 1.0


def test_decode_step_empty_available(model):
    st = _tsp_state(model, n=5, selected=5)
    with pytest.raises(ValueError):
        decode_step(st, model)


def test_decode_step_equivariant(model, rng):
    st = _tsp_state(model, n=10)
    p = decode_step(st, model).data[2:]
    perm = rng.permutation(len(st.available))
    st2 = DecodeState(st.instance, st.embeddings, list(st.selected), [st.available[i] for i in perm])
    q = decode_step(st2, model).data[2:]
    assert np.abs(p[perm] - q).max() < 1e-9


def test_cvrp_decode_masks(cvrp_model):
    inst = CvrpInstance([0.5, 0.5], [[0.1, 0.1], [0.9, 0.2], [0.3, 0.8], [0.6, 0.6]], [5, 9, 2, 4], 10)
    st = initial_state(inst, cvrp_model)
    p = decode_step(st, cvrp_model).data.reshape(-1, 2)
    assert np.all(p[:2] == 0)
    assert np.all(p[2:, 0] == 0)  # from the depot every move is via the depot
    apply_action(st, 2 * 2 + 1)  # customer 1 via depot, load 5
    p = decode_step(st, cvrp_model).data.reshape(-1, 2)
    dem = inst.demands[np.array(st.available) - 1]
    assert np.all(p[2:, 0][dem > 5] == 0)
    assert np.all(p[2:, 0][dem <= 5] > 0)
    assert np.all(p[2:, 1] > 0)
    assert abs(p.sum() - 1) < 1e-12


def test_held_decode_step(held_model):
    st = _tsp_state(held_model, n=9)
    u = held_raw_logits(st, held_model)
    assert np.all(np.abs(u) <= 10)
    p = held_decode_step(st, held_model).data
    assert p.shape == (len(st.available) + 2,)
    assert p[0] == 0 and p[1] == 0 and abs(p.sum() - 1) < 1e-12
    with pytest.raises(ValueError):
        decode_step(st, held_model)
    assert len(construct(st.instance, held_model, rng=1).order) == 9


def test_construct_valid_and_deterministic(model, cvrp_model, rng):
    for n in (4, 7, 12):
        inst = generate_tsp(n, rng)
        a = construct(inst, model, rng=5)
        assert validate_tour(inst, a)
        assert construct(inst, model, rng=5) == a
    for n in (4, 10):
        inst = generate_cvrp(n, capacity=15, rng=rng)
        sol = construct(inst, cvrp_model, rng=0)
        assert validate_cvrp(inst, sol)
        s = construct(inst, cvrp_model, mode="sample", rng=3)
        assert validate_cvrp(inst, s) and s == construct(inst, cvrp_model, mode="sample", rng=3)


def test_batch_matches_single(model, cvrp_model):
    insts = [generate_tsp(9, s) for s in range(6)]
    batch = construct_batch(insts, model, first_nodes=[s % 9 for s in range(6)])
    single = [construct(i, model, first=s % 9) for s, i in enumerate(insts)]
    assert batch == single
    cinsts = [generate_cvrp(8, capacity=20, rng=s) for s in range(5)]
    assert construct_batch(cinsts, cvrp_model) == [construct(i, cvrp_model) for i in cinsts]


def test_finite_forward_many_instances():
    m = LehdModel.initialize(ModelConfig(), 11)
    g = np.random.default_rng(0)
    count = 0
    for n in range(4, 24):
        insts = [generate_tsp(n, g) for _ in range(50)]
        from lehd.model import encode_features, decoder_logits, tsp_action_mask
        H = encode_features(m, np.stack([i.coords for i in insts]))
        u = decoder_logits(m, H, np.zeros(50, int), np.zeros(50, int),
                           np.tile(np.arange(1, n), (50, 1)), tsp_action_mask(50, n - 1))
        assert np.all(np.isfinite(H.data))
        assert np.all(np.isfinite(u.data[:, 2:]))
        count += len(insts)
    assert count == 1000


def test_size_independence(model, tmp_path):
    path = tmp_path / "m.ckpt"
    model.save(path)
    m = LehdModel.load(path)
    assert len(construct(generate_tsp(10, 0), m).order) == 10
    st = initial_state(generate_tsp(1000, 0), m)
    p = decode_step(st, m).data
    assert p.shape == (1001,) and abs(p.sum() - 1) < 1e-12


def test_checkpoint_config_consistency(model, tmp_path):
    path = tmp_path / "m.ckpt"
    model.save(path, note="x")
    m = LehdModel.load(path)
    assert m.config == model.config
    for k in model.params:
        assert m.params[k].data.tobytes() == model.params[k].data.tobytes()
    params, meta = T.load_checkpoint(path)
    meta["model_config"]["embed_dim"] = 32
    T.save_checkpoint(path, params, meta)
    with pytest.raises(ValueError, match="shape"):
        LehdModel.load(path)


def test_decode_step_quadratic_scaling():
    m = LehdModel.initialize(ModelConfig(), 0)
    states = {n: initial_state(generate_tsp(n, 0), m) for n in (1000, 2000)}
    best = {n: float("inf") for n in states}
    for _ in range(5):
        # interleaved repeats; the minimum filters out scheduler noise
        for n, st in states.items():
            t0 = time.perf_counter()
            decode_step(st, m)
            best[n] = min(best[n], time.perf_counter() - t0)
    ratio = best[2000] / best[1000]
    assert 3.5 <= ratio <= 4.5, ratio
