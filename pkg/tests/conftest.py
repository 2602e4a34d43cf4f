import numpy as np
import pytest

from safmpc.network import Link, Network, Node


def random_network(rng: np.random.Generator, max_links: int = 30) -> Network:
    """Random connected link network with entries, exits, and valid phases."""
    n_nodes = int(rng.integers(3, 9))
    links = {}
    next_id = [1]

    def add(up, down, length):
        links[next_id[0]] = Link(upstream=up, downstream=down, length=length)
        next_id[0] += 1

    # ring for connectivity, then random chords
    for j in range(n_nodes):
        add(j, (j + 1) % n_nodes, float(rng.integers(50, 400)))
    n_extra = int(rng.integers(0, max(1, max_links - n_nodes - 6)))
    for _ in range(n_extra):
        a, b = rng.integers(0, n_nodes, size=2)
        if a != b and len(links) < max_links - 4:
            add(int(a), int(b), float(rng.integers(50, 400)))
    # at least one entry and one exit
    for j in rng.choice(n_nodes, size=int(rng.integers(1, 3)), replace=False):
        if len(links) < max_links - 1:
            add(None, int(j), float(rng.integers(50, 400)))
    for j in rng.choice(n_nodes, size=int(rng.integers(1, 3)), replace=False):
        if len(links) < max_links:
            add(int(j), None, float(rng.integers(50, 400)))

    nodes = {}
    for j in range(n_nodes):
        incoming = sorted(z for z, lk in links.items() if lk.downstream == j)
        if len(incoming) > 1 and rng.random() < 0.5:
            cut = max(1, len(incoming) // 2)
            phases = (frozenset(incoming[:cut]), frozenset(incoming[cut:]))
        else:
            phases = (frozenset(incoming),)
        nodes[j] = Node(phases=phases)
    return Network(links=links, nodes=nodes)


def dijkstra_to(net: Network, d: int) -> dict[int, float]:
    """Shortest entered-length distance from every link to destination d."""
    import heapq

    dist = {z: float("inf") for z in net.links}
    dist[d] = 0.0
    heap = [(0.0, d)]
    preds = {z: [] for z in net.links}
    for z in net.links:
        for m in net.successors(z):
            preds[m].append(z)
    while heap:
        du, u = heapq.heappop(heap)
        if du > dist[u]:
            continue
        for z in preds[u]:
            cand = du + net.links[u].arc_cost
            if cand < dist[z]:
                dist[z] = cand
                heapq.heappush(heap, (cand, z))
    return dist


@pytest.fixture
def rng():
    return np.random.default_rng(90125)
