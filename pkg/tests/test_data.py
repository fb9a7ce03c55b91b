import json
import tracemalloc

import numpy as np
import pytest

from lehd.data import (DatasetError, LabeledInstance, batch, extract_cvrp, extract_tsp, install,
                       read_dataset, read_manifest, sample_partial, sample_segment, segment_cost,
                       to_sample, write_dataset)
from lehd.oracles import exact_cvrp, held_karp_path, held_karp_tsp, nearest_neighbor
from lehd.routing import (Tour, cvrp_cost, flags_to_routes, generate_cvrp, generate_tsp,
                          path_length, tour_length, validate)

# upper 1% point of the chi-square distribution with 6 degrees of freedom
CHI2_6_99 = 16.811894


def test_tsp_example_from_nine_node_tour():
    part = extract_tsp(list(range(9)), w=5, start_index=5, reverse=True)
    assert [v + 1 for v in part.nodes] == [6, 5, 4, 3, 2]
    assert part.start == 5 and part.destination == 1


def test_full_tour_segment():
    order = [3, 1, 4, 0, 2, 5]
    part = extract_tsp(order, w=6, start_index=0, reverse=False)
    assert list(part.nodes) == order and part.rest == ()


def test_cvrp_example_segment():
    inst = generate_cvrp(9, capacity=30, rng=0)
    routes = [[1, 2, 3], [6, 5, 4], [7, 8, 9]]  # second route flipped
    part = extract_cvrp(inst, routes, w=4, start_index=1, reverse=False)
    assert part.node_list() == [2, 3, 0, 6, 5, 4, 0]
    assert part.start_load == inst.demands[0] + inst.demands[1]
    assert part.prefix == (1,) and part.rest == ((7, 8, 9),)


def test_cvrp_segment_wrapping_onto_its_prefix_is_rejected():
    inst = generate_cvrp(6, capacity=30, rng=0)
    assert extract_cvrp(inst, [[1, 2, 3], [4, 5, 6]], w=6, start_index=1, reverse=False) is None


def _labeled_tsp(n, seed):
    inst = generate_tsp(n, seed)
    return LabeledInstance(inst, held_karp_tsp(inst)[0])


def test_install_round_trip_tsp(rng):
    lab = _labeled_tsp(9, 1)
    for _ in range(50):
        part = sample_segment(lab.instance, lab.solution, rng)
        full = install(part, part.nodes)
        assert abs(tour_length(lab.instance, full) - lab.cost) < 1e-12
        assert abs(segment_cost(lab.instance, part) - path_length(lab.instance.coords, part.nodes)) < 1e-15


def test_install_round_trip_cvrp(rng):
    for s in range(20):
        inst = generate_cvrp(12, capacity=20, rng=s)
        sol = nearest_neighbor(inst)
        for _ in range(10):
            part = sample_segment(inst, sol, rng)
            assert part.w >= 4
            full = install(part, part.nodes, part.flags)
            assert validate(inst, full)
            assert abs(cvrp_cost(inst, full) - cvrp_cost(inst, sol)) < 1e-9
            # the segment ends at a route end, and the inherited load matches the parent
            routes = flags_to_routes(full)
            first = next(r for r in routes if part.start in r)
            k = first.index(part.start)
            assert part.start_load == sum(inst.demands[c - 1] for c in first[:k + 1])


def test_sampled_segments_are_optimal_paths(rng):
    for s in range(10):
        lab = _labeled_tsp(9, s)
        for _ in range(20):
            part = sample_segment(lab.instance, lab.solution, rng)
            if part.w > 8:
                continue
            _, c = held_karp_path(lab.instance.coords, part.nodes, part.start, part.destination)
            assert abs(c - segment_cost(lab.instance, part)) < 1e-9


def test_direction_is_uniform():
    lab = _labeled_tsp(10, 0)
    g = np.random.default_rng(0)
    rev = [sample_segment(lab.instance, lab.solution, g).reversed for _ in range(10_000)]
    assert abs(np.mean(rev) - 0.5) < 0.02


def test_length_distribution_chi_square():
    lab = _labeled_tsp(10, 0)
    g = np.random.default_rng(1)
    ws = np.array([sample_segment(lab.instance, lab.solution, g).w for _ in range(100_000)])
    counts = np.bincount(ws, minlength=11)[4:]
    expected = len(ws) / 7
    chi2 = ((counts - expected) ** 2 / expected).sum()
    assert ws.min() == 4 and ws.max() == 10
    assert chi2 < CHI2_6_99


def test_teacher_forcing_reproduces_tsp_label(rng):
    lab = _labeled_tsp(10, 3)
    for _ in range(20):
        s = sample_partial(lab, rng)
        rows = list(range(1, s.size - 1))  # available rows in label order
        path = [0]
        for a in s.targets:
            path.append(rows.pop(a - 2))
        path.append(s.size - 1)
        assert [s.partial.nodes[r] for r in path] == list(s.partial.nodes)
        assert np.array_equal(s.features, lab.instance.coords[list(s.partial.nodes)])


def test_teacher_forcing_reproduces_cvrp_label(rng):
    inst = generate_cvrp(7, capacity=15, rng=3)
    lab = LabeledInstance(inst, exact_cvrp(inst)[0])
    for _ in range(20):
        s = sample_partial(lab, rng)
        rows = list(range(2, s.size))
        nodes, flags = [s.partial.nodes[0]], [s.partial.flags[0]]
        for a in s.targets:
            row, flag = divmod(int(a), 2)
            nodes.append(s.partial.nodes[rows.pop(row - 2) - 1])
            flags.append(flag)
        assert tuple(nodes) == s.partial.nodes and tuple(flags) == s.partial.flags
        assert s.features[0, 2] == 0.0 and s.demands[0] == 0


def test_labeled_instance_rejects_invalid():
    inst = generate_tsp(5, 0)
    with pytest.raises(ValueError):
        LabeledInstance(inst, Tour([0, 1, 2, 3, 3]))
    with pytest.raises(ValueError):
        LabeledInstance(inst, Tour(range(5)), label_source="oracle")


def test_batch_grouping(rng):
    lab4 = _labeled_tsp(4, 0)
    lab7 = _labeled_tsp(7, 0)
    s4 = to_sample(lab4.instance, extract_tsp(lab4.solution.order, 4, 0, False))
    s7 = to_sample(lab7.instance, extract_tsp(lab7.solution.order, 7, 0, False))
    assert len(batch([s4, s7, s4], 10)) == 2
    same = [s4] * 2048
    parts = batch(same, 1024)
    assert len(parts) == 2 and all(len(b) == 1024 for b in parts)
    mixed = [s4, s7] * 5 + [s7]
    out = batch(mixed, 3)
    assert sorted(id(x) for b in out for x in b) == sorted(id(x) for x in mixed)
    assert all(len({x.size for x in b}) == 1 for b in out)


def test_dataset_round_trip(tmp_path):
    items = [_labeled_tsp(6, s) for s in range(3)]
    c = generate_cvrp(5, capacity=20, rng=0)
    items.append(LabeledInstance(c, exact_cvrp(c)[0], "exact"))
    path = tmp_path / "d.jsonl"
    write_dataset(path, items, {"seed": 4})
    back = list(read_dataset(path))
    assert len(back) == 4
    for a, b in zip(items, back):
        assert np.array_equal(a.instance.coords, b.instance.coords)
        assert a.solution == b.solution and a.label_source == b.label_source
    assert read_manifest(path)["seed"] == 4 and read_manifest(path)["records"] == 4


def test_truncated_final_line(tmp_path):
    path = tmp_path / "d.jsonl"
    write_dataset(path, [_labeled_tsp(6, s) for s in range(3)])
    text = path.read_text()
    path.write_text(text[:-30])
    with pytest.raises(DatasetError, match=":3:"):
        list(read_dataset(path))


def test_schema_violation_names_line(tmp_path):
    path = tmp_path / "d.jsonl"
    good = json.dumps({"kind": "tsp", "coords": [[0, 0], [1, 0], [1, 1], [0, 1]], "sequence": [1, 2, 3, 4]})
    path.write_text(good + "\n" + json.dumps({"kind": "tsp", "coords": [[0, 0]], "sequence": [1, 1]}) + "\n")
    with pytest.raises(DatasetError, match=":2:"):
        list(read_dataset(path))


def test_streaming_memory(tmp_path):
    path = tmp_path / "big.jsonl"
    rec = json.dumps({"kind": "tsp", "coords": [[0.1, 0.2]] * 10, "sequence": list(range(1, 11))})
    with open(path, "w") as fh:
        for _ in range(20_000):
            fh.write(rec + "\n")
    size = path.stat().st_size
    tracemalloc.start()
    n = sum(1 for _ in read_dataset(path))
    peak = tracemalloc.get_traced_memory()[1]
    tracemalloc.stop()
    assert n == 20_000
    assert peak < size / 20
