import random

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "repo", derandomize=True, deadline=None, max_examples=60,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("repo")


# ---------------------------------------------------------------- random graphs


def random_digraph(rng: random.Random, max_nodes=12, max_edges=20, self_loops=True):
    """Node names n0..n{k-1} and a random edge set."""
    n = rng.randint(1, max_nodes)
    nodes = [f"n{i}" for i in range(n)]
    edges = set()
    for _ in range(rng.randint(0, max_edges)):
        s, d = rng.choice(nodes), rng.choice(nodes)
        if s == d and not self_loops:
            continue
        edges.add((s, d))
    return nodes, edges


# ---------------------------------------------------------------- oracles


def reach(nodes, succ, start, banned=None):
    seen = {start}
    stack = [start]
    while stack:
        u = stack.pop()
        for v in succ[u]:
            if v != banned and v not in seen:
                seen.add(v)
                stack.append(v)
    return seen


def augmented_exit_graph(nodes, edges):
    """Independent single-exit augmentation: exits and every sink strongly
    connected component (first member in node order) feed a virtual exit."""
    succ = {n: sorted({d for s, d in edges if s == n}, key=nodes.index) for n in nodes}
    exits = [n for n in nodes if not succ[n]]
    reach_of = {n: reach(nodes, succ, n) for n in nodes}
    sinks = []
    seen = set()
    for n in nodes:
        if n in seen or not succ[n]:
            continue
        scc = [m for m in nodes if m in reach_of[n] and n in reach_of[m]]
        seen.update(scc)
        if all(reach_of[m] <= set(scc) for m in scc):
            sinks.append(scc[0])
    if len(exits) == 1 and not sinks:
        return succ, exits[0]
    succ = {n: list(v) for n, v in succ.items()}
    for n in exits + sinks:
        succ[n].append("EXIT")
    succ["EXIT"] = []
    return succ, "EXIT"


def simple_paths(succ, start, goal):
    out = []

    def walk(u, path):
        if u == goal:
            out.append(list(path))
            return
        for v in succ[u]:
            if v not in path:
                path.append(v)
                walk(v, path)
                path.pop()

    walk(start, [start])
    return out


def postdominators_by_paths(nodes, edges):
    """pdom[u] = intersection of the node sets of every simple u->exit path."""
    succ, exit_node = augmented_exit_graph(nodes, edges)
    pdom = {}
    for u in list(succ):
        paths = simple_paths(succ, u, exit_node)
        common = set(paths[0])
        for p in paths[1:]:
            common &= set(p)
        pdom[u] = common
    return succ, pdom


def control_dependence_oracle(nodes, edges):
    """v depends on u iff v post-dominates a successor of u and does not
    strictly post-dominate u (no self-dependences)."""
    succ, pdom = postdominators_by_paths(nodes, edges)
    deps = set()
    for u in nodes:
        for v in nodes:
            if u == v:
                continue
            strictly = v in pdom[u]
            if not strictly and any(v in pdom[s] for s in succ[u]):
                deps.add((u, v))
    return deps


def bfs_slice_oracle(nodes, edges, patch, n):
    und = {x: set() for x in nodes}
    for s, d in edges:
        und[s].add(d)
        und[d].add(s)
    dist = {p: 0 for p in patch}
    frontier = list(patch)
    while frontier:
        nxt = []
        for u in frontier:
            for v in und[u]:
                if v not in dist:
                    dist[v] = dist[u] + 1
                    nxt.append(v)
        frontier = nxt
    return {v for v, d in dist.items() if d <= n}


@pytest.fixture
def diamond_text():
    return (
        "FUNC f\nb0:\n  cmp rax, 0x0\n  jle b2\nb1:\n  mov rbx, 0x1\n  jmp b3\n"
        "b2:\n  mov rbx, 0x2\nb3:\n  ret\n"
    )


REGS = ("rax", "rbx", "rcx", "rdx", "rdi", "r8", "eax", "bl")
MNEMS = ("mov", "add", "sub", "xor", "lea", "cmp", "test", "imul", "and", "or", "push", "pop", "call")


def random_instruction(rng: random.Random) -> str:
    m = rng.choice(MNEMS)
    r, r2 = rng.choice(REGS), rng.choice(REGS)
    if m == "call":
        return f"call helper{rng.randint(0, 3)}"
    if m in ("push", "pop"):
        return f"{m} {r}"
    if m == "lea":
        return f"lea {r}, [{r2}+{hex(rng.randint(0, 64))}]"
    src = rng.choice((r2, hex(rng.randint(0, 255)), str(rng.randint(0, 99)),
                      f"qword [rsp+{hex(8 * rng.randint(0, 4))}]"))
    if m == "mov" and rng.random() < 0.2:
        return f"mov qword [rbp-{hex(8 * rng.randint(1, 3))}], {r}"
    return f"{m} {r}, {src}"


def random_program_text(rng: random.Random, functions=1, max_blocks=10, lines=False) -> str:
    out = []
    line = 1
    for f in range(functions):
        out.append(f"FUNC fn{f}")
        n = rng.randint(1, max_blocks)
        for i in range(n):
            out.append(f"b{i}:")
            body = [random_instruction(rng) for _ in range(rng.randint(1, 4))]
            roll = rng.random()
            if i == n - 1 or roll < 0.1:
                body.append("ret")
            elif roll < 0.4:
                body.append(f"{rng.choice(('je', 'jne', 'jl', 'jg', 'jz'))} b{rng.randrange(n)}")
            elif roll < 0.5:
                body.append(f"jmp b{rng.randrange(n)}")
            for ins in body:
                suffix = ""
                if lines and rng.random() < 0.8:
                    suffix = f" ;line={line}"
                    line += rng.randint(0, 1)
                out.append(f"  {ins}{suffix}")
    return "\n".join(out) + "\n"


@pytest.fixture
def gadget_text():
    # b0->{b1,b4}, b1->{b2,b3}, b2->b3, b3->b4
    return (
        "FUNC g\n"
        "b0:\n  cmp rdi, 0x0\n  je b4\n"
        "b1:\n  mov rbx, 0x1\n  test rsi, rsi\n  jne b3\n"
        "b2:\n  mov rcx, 0x2\n"
        "b3:\n  add rax, rbx\n"
        "b4:\n  ret\n"
    )
