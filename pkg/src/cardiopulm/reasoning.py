"""Causal pulmonary-to-cardiac reasoning over a layered knowledge graph.

Nodes sit on four levels: findings (0), mechanisms (1), integrated effects (2)
and cardiovascular consequences (3). Edges only join level L to L+1 and
carry a weight in (0, 1] plus a phrase used by the rationale template.

Activation semantics: a retained finding activates at its score; every other
node takes the max over its incoming contributions, where an ordinary edge
contributes ``parent * weight`` and an AND group contributes the min of
``parent * weight`` over its member edges. Everything is monotone in the
finding scores, so adding evidence never lowers any indicator.
"""

from __future__ import annotations

import graphlib
import json
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import SchemaError, ValidationError, VersionMismatchError
from .perception import FINDINGS, FindingSet
from .remote import post_json

LEVELS = {0: "finding", 1: "mechanism", 2: "effect", 3: "consequence"}
ELEVATED = "elevated_risk"
NOT_ELEVATED = "not_elevated"
JUDGMENT_THRESHOLD = 0.5
EMPTY_RATIONALE = ""  # no chains, nothing to explain


@dataclass(frozen=True)
class Edge:
    src: str
    dst: str
    weight: float
    phrase: str = ""
    and_group: str | None = None


@dataclass(frozen=True)
class KnowledgeGraph:
    version: str
    levels: dict[str, int]
    labels: dict[str, str]
    edges: tuple[Edge, ...]
    node_order: tuple[str, ...] = field(default=())

    @property
    def indicator_nodes(self) -> tuple[str, ...]:
        """Level 1-3 nodes in the fixed order used for z_reason."""
        return tuple(n for n in self.node_order if self.levels[n] > 0)

    @property
    def d_reason(self) -> int:
        return len(self.indicator_nodes)

    def incoming(self, node: str) -> list[Edge]:
        return [e for e in self.edges if e.dst == node]

    def outgoing(self, node: str) -> list[Edge]:
        return [e for e in self.edges if e.src == node]

    def label(self, node: str) -> str:
        return self.labels.get(node, node.replace("_", " "))


@dataclass(frozen=True)
class Chain:
    nodes: tuple[str, ...]
    activation: float

    def to_json(self) -> dict:
        return {"nodes": list(self.nodes), "activation": self.activation}


@dataclass(frozen=True)
class ReasoningTrace:
    chains: tuple[Chain, ...]
    indicator_vector: tuple[float, ...]
    indicator_names: tuple[str, ...]
    rationale: str
    judgment: str
    kb_version: str
    source: str = "rule_based"

    def __post_init__(self):
        if len(self.indicator_vector) != len(self.indicator_names):
            raise ValidationError("indicator vector and names differ in length")
        if any(not (0.0 <= v <= 1.0) for v in self.indicator_vector):
            raise ValidationError("indicator entries must lie in [0, 1]")
        if self.judgment not in (ELEVATED, NOT_ELEVATED):
            raise ValidationError(f"unknown judgment {self.judgment!r}")
        if bool(self.chains) != bool(self.rationale.strip()):
            raise ValidationError("rationale must be non-empty exactly when chains are present")

    def activation(self, node: str) -> float:
        return dict(zip(self.indicator_names, self.indicator_vector)).get(node, 0.0)

    def to_json(self) -> dict:
        return {
            "chains": [c.to_json() for c in self.chains],
            "indicator_names": list(self.indicator_names),
            "indicator_vector": list(self.indicator_vector),
            "rationale": self.rationale,
            "judgment": self.judgment,
            "kb_version": self.kb_version,
            "source": self.source,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ReasoningTrace":
        try:
            return cls(
                chains=tuple(Chain(tuple(c["nodes"]), float(c["activation"])) for c in obj["chains"]),
                indicator_vector=tuple(float(v) for v in obj["indicator_vector"]),
                indicator_names=tuple(obj["indicator_names"]),
                rationale=str(obj["rationale"]),
                judgment=obj["judgment"],
                kb_version=str(obj["kb_version"]),
                source=str(obj.get("source", "file")),
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ValidationError):
                raise
            raise SchemaError(f"malformed reasoning trace: {exc}") from exc


# ---------------------------------------------------------------------------
# knowledge base loading
# ---------------------------------------------------------------------------


def parse_knowledge_base(obj: dict, alphabet=FINDINGS) -> KnowledgeGraph:
    if not isinstance(obj, dict) or not {"version", "nodes", "edges"} <= set(obj):
        raise SchemaError("knowledge base needs version, nodes and edges")
    levels: dict[str, int] = {}
    labels: dict[str, str] = {}
    order = []
    for n in obj["nodes"]:
        try:
            name, level = str(n["name"]), int(n["level"])
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"bad node entry {n!r}") from exc
        if name in levels:
            raise ValidationError(f"duplicate node {name!r}")
        if level not in LEVELS:
            raise ValidationError(f"node {name!r} has level {level}, expected 0-3")
        if level == 0 and name not in alphabet:
            raise ValidationError(f"unknown finding node {name!r}")
        levels[name] = level
        labels[name] = str(n.get("label", name.replace("_", " ")))
        order.append(name)

    edges = []
    for e in obj["edges"]:
        try:
            edge = Edge(str(e["from"]), str(e["to"]), float(e["weight"]), str(e.get("phrase", "")), e.get("and_group"))
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"bad edge entry {e!r}") from exc
        for end in (edge.src, edge.dst):
            if end not in levels:
                raise ValidationError(f"edge {edge.src}->{edge.dst} references unknown node {end!r}")
        if not 0.0 < edge.weight <= 1.0:
            raise ValidationError(f"edge {edge.src}->{edge.dst} weight {edge.weight} outside (0, 1]")
        edges.append(edge)

    # Cycle check first so a back edge reports as a cycle when it closes one.
    ts = graphlib.TopologicalSorter({n: set() for n in levels})
    for edge in edges:
        ts.add(edge.dst, edge.src)
    try:
        ts.prepare()
    except graphlib.CycleError as exc:
        raise ValidationError(f"knowledge base has a cycle: {exc.args[1]}") from exc
    for edge in edges:
        if levels[edge.dst] != levels[edge.src] + 1:
            raise ValidationError(
                f"edge {edge.src}(L{levels[edge.src]})->{edge.dst}(L{levels[edge.dst]}) violates level order"
            )
    groups: dict[str, set[str]] = {}
    for edge in edges:
        if edge.and_group is not None:
            groups.setdefault(edge.and_group, set()).add(edge.dst)
    for g, targets in groups.items():
        if len(targets) != 1:
            raise ValidationError(f"AND group {g!r} must point at a single node, got {sorted(targets)}")
    order.sort(key=lambda n: levels[n])  # stable: file order within a level
    return KnowledgeGraph(str(obj["version"]), levels, labels, tuple(edges), tuple(order))


def load_knowledge_base(path=None) -> KnowledgeGraph:
    """Load and validate a KB JSON file; ``None`` loads the shipped default."""
    if path is None:
        return default_knowledge_base()
    try:
        obj = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ValidationError(f"cannot read knowledge base {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise SchemaError(f"knowledge base {path} is not valid JSON: {exc}") from exc
    return parse_knowledge_base(obj)


@lru_cache(maxsize=1)
def default_knowledge_base() -> KnowledgeGraph:
    text = resources.files("cardiopulm").joinpath("data/default_kb.json").read_text()
    return parse_knowledge_base(json.loads(text))


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------


def _activations(seed: dict[str, float], kb: KnowledgeGraph) -> tuple[dict[str, float], dict[tuple[str, str], float]]:
    act = {n: 0.0 for n in kb.node_order}
    for name, score in seed.items():
        if name in act and kb.levels[name] == 0:
            act[name] = score
    group_val: dict[tuple[str, str], float] = {}
    for node in kb.node_order:
        if kb.levels[node] == 0:
            continue
        best = 0.0
        groups: dict[str, list[float]] = {}
        for e in kb.incoming(node):
            v = act[e.src] * e.weight
            if e.and_group is None:
                best = max(best, v)
            else:
                groups.setdefault(e.and_group, []).append(v)
        for g, vals in groups.items():
            group_val[(node, g)] = min(vals)
            best = max(best, min(vals))
        act[node] = best
    return act, group_val


def _chains(start: str, value: float, kb: KnowledgeGraph, group_val) -> list[Chain]:
    out = []
    edges = kb.outgoing(start)
    if kb.levels[start] == 3:
        return [Chain((start,), value)]
    for e in edges:
        v = value * e.weight
        if e.and_group is not None:
            v = min(v, group_val[(e.dst, e.and_group)])
        if v <= 0.0:
            continue
        for tail in _chains(e.dst, v, kb, group_val):
            out.append(Chain((start,) + tail.nodes, tail.activation))
    return out


def reason(findings: FindingSet, kb: KnowledgeGraph | None = None) -> ReasoningTrace:
    kb = kb or default_knowledge_base()
    scores = findings.scores()
    seed = {n: scores[n] for n in findings.retained}
    act, group_val = _activations(seed, kb)
    chains = []
    for name in kb.node_order:
        if kb.levels[name] == 0 and act[name] > 0.0:
            chains.extend(_chains(name, act[name], kb, group_val))
    chains.sort(key=lambda c: (-c.activation, c.nodes))
    names = kb.indicator_nodes
    vec = tuple(float(act[n]) for n in names)
    top = max((act[n] for n in names if kb.levels[n] == 3), default=0.0)
    judgment = ELEVATED if top >= JUDGMENT_THRESHOLD else NOT_ELEVATED
    text = _render(chains, act, kb, seed)
    return ReasoningTrace(tuple(chains), vec, names, text, judgment, kb.version)


def encode_indicators(trace: ReasoningTrace, expected_version: str | None = None, expected_dim: int | None = None) -> np.ndarray:
    """z_reason: the indicator activations in fixed KB node order."""
    if expected_version is not None and trace.kb_version != expected_version:
        raise VersionMismatchError(f"trace built with KB {trace.kb_version}, model expects {expected_version}")
    vec = np.asarray(trace.indicator_vector, dtype=np.float64)
    if expected_dim is not None and vec.size != expected_dim:
        raise VersionMismatchError(f"indicator dimension {vec.size} != expected d_reason {expected_dim}")
    return vec


def _join(items: list[str]) -> str:
    if len(items) <= 1:
        return "".join(items)
    return ", ".join(items[:-1]) + " and " + items[-1]


def _cap(s: str) -> str:
    return s[:1].upper() + s[1:]


def render_rationale(trace: ReasoningTrace, kb: KnowledgeGraph | None = None, seed: dict[str, float] | None = None) -> str:
    """Template rationale: one sentence per active mechanism, one per active
    effect, and a closing sentence naming the consequences."""
    kb = kb or default_knowledge_base()
    if kb.version != trace.kb_version:
        raise VersionMismatchError(f"trace built with KB {trace.kb_version}, renderer has {kb.version}")
    act = dict(zip(trace.indicator_names, trace.indicator_vector))
    return _render(trace.chains, act, kb, seed)


def _render(chains, act: dict[str, float], kb: KnowledgeGraph, seed: dict[str, float] | None = None) -> str:
    if not chains:
        return EMPTY_RATIONALE
    on_chain = {n for c in chains for n in c.nodes}
    seed = seed or {}
    sentences = []
    for level in (1, 2):
        for node in kb.node_order:
            if kb.levels[node] != level or node not in on_chain:
                continue
            clauses = []
            groups: dict[str, list[Edge]] = {}
            for e in kb.incoming(node):
                if e.src not in on_chain:
                    continue
                if e.and_group is not None:
                    groups.setdefault(e.and_group, []).append(e)
                    continue
                subject = kb.label(e.src)
                if level == 1 and seed.get(e.src) is not None:
                    subject += f" (score {seed[e.src]:.2f})"
                clauses.append(f"{subject} {e.phrase or 'contributes to ' + kb.label(node)}")
            for members in groups.values():
                if len(members) == len(_group_edges(kb, node, members[0].and_group)):
                    subject = _join([kb.label(e.src) for e in members])
                    clauses.append(f"{subject} {members[0].phrase or 'jointly produce ' + kb.label(node)}")
            if clauses:
                sentences.append(_cap("; ".join(clauses)) + ".")
    consequences = [
        f"{kb.label(n)} ({act[n]:.2f})"
        for n in kb.node_order
        if kb.levels[n] == 3 and n in on_chain
    ]
    if consequences:
        sentences.append(f"These effects culminate in {_join(consequences)}.")
    return " ".join(sentences)


def _group_edges(kb: KnowledgeGraph, node: str, group: str) -> list[Edge]:
    return [e for e in kb.incoming(node) if e.and_group == group]


def fetch_reasoning_remote(findings: FindingSet, endpoint: str, kb: KnowledgeGraph | None = None,
                           timeout: float = 30.0, scan_ref: str | None = None) -> ReasoningTrace:
    """Delegate reasoning to an external service and validate its reply."""
    kb = kb or default_knowledge_base()
    scores = findings.scores()
    payload = {"findings": [{"name": n, "score": scores[n]} for n in findings.retained], "kb_version": kb.version}
    obj = post_json(endpoint, payload, timeout, scan_ref)
    missing = {"chains", "indicator_vector", "judgment"} - set(obj)
    if missing:
        raise SchemaError(f"reasoning reply lacks {sorted(missing)}")
    vec = obj["indicator_vector"]
    if not isinstance(vec, list) or len(vec) != kb.d_reason:
        got = len(vec) if isinstance(vec, list) else type(vec).__name__
        raise SchemaError(f"reasoning reply indicator dimension {got} != d_reason {kb.d_reason}")
    rationale = obj.get("rationale")
    if rationale is not None and not isinstance(rationale, str):
        raise SchemaError("reasoning reply rationale must be a string")
    if bool(obj["chains"]) != bool((rationale or "").strip()):
        raise SchemaError("reasoning reply rationale must be non-empty exactly when chains are present")
    return ReasoningTrace.from_json({
        "chains": obj["chains"],
        "indicator_vector": vec,
        "indicator_names": list(kb.indicator_nodes),
        "rationale": rationale or EMPTY_RATIONALE,
        "judgment": obj["judgment"],
        "kb_version": kb.version,
        "source": "external_service",
    })
