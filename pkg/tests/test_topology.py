"""Graph queries against networkx as the independent oracle."""

import random

import networkx as nx
import pytest

from consentry import topology as topo
from consentry.topology import Topology, TopologyError, load_topology


def to_nx(t: Topology) -> nx.Graph:
    g = nx.Graph()
    g.add_nodes_from(range(t.n))
    g.add_edges_from(t.edges)
    return g


def test_loader_validation():
    with pytest.raises(TopologyError):
        load_topology({"n": 3, "edges": [[0, 0]]})
    with pytest.raises(TopologyError):
        load_topology({"n": 3, "edges": [[0, 1], [1, 0]]})
    with pytest.raises(TopologyError):
        load_topology({"n": 3, "edges": [[0, 5]]})
    with pytest.raises(TopologyError):
        load_topology({"edges": []})
    t = load_topology({"n": 3, "edges": [[0, 1], [1, 2]]})
    assert t.n == 3 and len(t.edges) == 2


def test_loader_from_file(tmp_path):
    p = tmp_path / "t.json"
    p.write_text('{"n": 4, "edges": [[0,1],[1,2],[2,3]]}')
    assert load_topology(str(p)).diameter() == 3


def test_neighbors():
    line = topo.path(3)
    assert line.neighbors(1) == {0, 2}
    assert line.neighbors(0) == {1}
    isolated = Topology(2, [])
    assert isolated.neighbors(0) == set()
    assert topo.complete(4).neighbors(0) == {1, 2, 3}
    with pytest.raises(TopologyError):
        line.neighbors(7)


def test_is_connected():
    assert Topology(1, []).is_connected()
    assert not Topology(2, []).is_connected()
    assert topo.ring(5).is_connected()


def test_diameter_examples():
    assert topo.complete(2).diameter() == 1
    assert topo.complete(6).diameter() == 1
    assert topo.path(4).diameter() == 3
    assert topo.ring(6).diameter() == 3
    with pytest.raises(TopologyError):
        Topology(2, []).diameter()


def test_connected_without():
    assert not topo.star(4).connected_without({0})
    ring5 = topo.ring(5)
    for v in range(5):
        assert ring5.connected_without({v})
    rng = random.Random(4)
    tree = topo.random_tree(6, rng)
    leaf = next(i for i in range(6) if tree.degree(i) == 1)
    assert tree.connected_without({leaf})
    with pytest.raises(TopologyError):
        ring5.connected_without({0, 1, 2, 3, 4})


def test_against_networkx_oracle():
    rng = random.Random(77)
    for _ in range(40):
        n = rng.randrange(2, 20)
        t = topo.random_connected(n, 0.35, rng)
        g = to_nx(t)
        assert t.is_connected() == nx.is_connected(g)
        assert t.diameter() == nx.diameter(g)
        removed = {rng.randrange(n)}
        h = g.copy()
        h.remove_nodes_from(removed)
        want = nx.is_connected(h) if len(h) else False
        assert t.connected_without(removed) == want
        i = rng.randrange(n)
        assert t.neighbors(i) == set(g.neighbors(i))


def test_diameter_invariants():
    rng = random.Random(12)
    for _ in range(25):
        n = rng.randrange(2, 15)
        t = topo.random_connected(n, 0.5, rng)
        d = t.diameter()
        assert 1 <= d <= n - 1


def test_vertex_removal_never_shortens_paths():
    rng = random.Random(21)
    for _ in range(15):
        n = rng.randrange(4, 12)
        t = topo.random_connected(n, 0.5, rng)
        g = to_nx(t)
        w = rng.randrange(n)
        h = g.copy()
        h.remove_node(w)
        before = dict(nx.all_pairs_shortest_path_length(g))
        for u, lengths in nx.all_pairs_shortest_path_length(h):
            for v, dist in lengths.items():
                assert dist >= before[u][v]


def test_generators():
    assert topo.ring(5).degree(0) == 2
    assert topo.star(5).degree(0) == 4
    assert topo.path(5).diameter() == 4
    rng = random.Random(3)
    tree = topo.random_tree(8, rng)
    assert len(tree.edges) == 7 and tree.is_connected()
    with pytest.raises(TopologyError):
        topo.from_family("mesh", 4, rng)
