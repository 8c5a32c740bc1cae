"""Iterative protocol-semantics inference over parsed TLS connections.

Pipeline per connection: application-protocol determination (ALPN with a
record-length fallback), message-type detection over application_data records,
a first semantics pass per problem, then repeated enhanced passes whose extra
features summarize the previous iteration's predictions across the connection,
until the predictions reach a fixed point.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import forest as rf
from .capture import Direction
from .corpus import LabeledConnection
from .features import (SCHEMA_ALP_FALLBACK, SCHEMA_STANDARD, SCHEMA_TOR,
                       alp_fallback_features, assemble_record_sample,
                       record_categorical_indices)
from .registry import (OTHER, Kind, ProblemSpec, Side, enhanced_length,
                       registry)
from .tlsparse import Connection

BUNDLE_FORMAT_VERSION = 1
MAX_ITERS_DEFAULT = 10
TOR_WINDOW = 5

PROTOCOLS = ("http1", "http2")
_ALPN_MAP = {"h2": "http2", "http/1.1": "http1", "http/1.0": "http1"}

DEFAULT_PARAMS = rf.TrainParams(n_trees=20, max_depth=14, min_leaf=2)


class InferenceError(Exception):
    pass


@dataclass
class RecordPrediction:
    index: int
    message_type: bool
    labels: dict[str, str] = field(default_factory=dict)


@dataclass
class ConnectionResult:
    protocol: str
    iterations: int
    converged: bool
    records: list[RecordPrediction]
    connection_id: str = ""

    def header_indices(self) -> list[int]:
        return [r.index for r in self.records if r.message_type]


@dataclass
class ProtocolModels:
    message_type: rf.Forest | None = None
    single: dict[str, rf.Forest] = field(default_factory=dict)
    enhanced: dict[str, rf.Forest] = field(default_factory=dict)


@dataclass
class ModelBundle:
    mode: str  # "standard" | "tor"
    include_etag: bool
    problems: dict[str, list[ProblemSpec]]
    models: dict[str, ProtocolModels]
    alp_fallback: rf.Forest | None = None
    exclude_whole_record: bool = False
    default_protocol: str = "http1"

    def base_schema(self) -> str:
        return SCHEMA_TOR if self.mode == "tor" else SCHEMA_STANDARD


# --- indicator-block layout ---

def indicator_layout(problems: list[ProblemSpec]) -> list[tuple[str, int, tuple[str, ...]]]:
    """(problem id, offset, labels) for each registry entry, in registry order."""
    out = []
    off = 0
    for p in problems:
        out.append((p.id, off, p.labels))
        off += len(p.labels)
    return out


def indicator_vector(problems: list[ProblemSpec], labels: dict[str, str],
                     ) -> np.ndarray:
    """Concatenated one-hot indicators for one record's predicted labels.

    Labels outside a problem's set (the ``other`` class) and problems with no
    prediction on this record contribute zeros.
    """
    vec = np.zeros(enhanced_length(problems), dtype=np.float64)
    for pid, off, labelset in indicator_layout(problems):
        label = labels.get(pid)
        if label is not None and label in labelset:
            vec[off + labelset.index(label)] = 1.0
    return vec


def build_enhanced_features(problems: list[ProblemSpec],
                            header_vectors: list[np.ndarray],
                            target_pos: int, target_problem: str,
                            exclude_whole_record: bool = False,
                            window: tuple[int, int] | None = None,
                            ) -> np.ndarray:
    """Context block for one (record, problem) classification.

    Sums predicted-label indicator vectors over the connection's header
    records; the target record's contribution to the target problem's
    subcomponent is excluded (optionally its entire contribution).  ``window``
    restricts the sum to header positions [lo, hi] (Tor mode).
    """
    width = enhanced_length(problems)
    lo, hi = window if window is not None else (0, len(header_vectors) - 1)
    total = np.zeros(width, dtype=np.float64)
    for pos in range(max(lo, 0), min(hi, len(header_vectors) - 1) + 1):
        total += header_vectors[pos]
    if lo <= target_pos <= hi:
        target = header_vectors[target_pos]
        if exclude_whole_record:
            total -= target
        else:
            for pid, off, labelset in indicator_layout(problems):
                if pid == target_problem:
                    total[off:off + len(labelset)] -= target[off:off + len(labelset)]
                    break
    return total


def tor_enhanced_window(n_headers: int, pos: int,
                        radius: int = TOR_WINDOW) -> tuple[int, int]:
    """Header-position bounds [lo, hi] of the Tor-mode context window."""
    return max(0, pos - radius), min(n_headers - 1, pos + radius)


# --- classification ---

def classify_alp(bundle: ModelBundle, conn: Connection) -> str:
    alpn = conn.handshake.alpn_selected
    if alpn in _ALPN_MAP:
        return _ALPN_MAP[alpn]
    if bundle.alp_fallback is None:
        return bundle.default_protocol
    return rf.predict(bundle.alp_fallback, alp_fallback_features(conn))[0]


def _record_side(direction: Direction) -> Side:
    return Side.CLIENT if direction == Direction.CLIENT_TO_SERVER else Side.SERVER


def _base_matrix(bundle: ModelBundle, conn: Connection,
                 indices: list[int]) -> np.ndarray:
    mode = "tor" if bundle.mode == "tor" else "standard"
    if not indices:
        return np.zeros((0, 0))
    return np.stack([assemble_record_sample(conn, i, mode).values
                     for i in indices])


@dataclass
class _ConnState:
    conn: Connection
    connection_id: str
    protocol: str
    msg_flags: list[bool]
    header_idx: list[int]         # record indices of header records
    base: np.ndarray              # base features, one row per header record
    labels: list[dict[str, str]]  # current predictions per header record
    iterations: int = 1
    converged: bool = False


def _predict_problem_batch(forest: rf.Forest, rows: list[np.ndarray]) -> list:
    if not rows:
        return []
    return rf.predict_labels(forest, np.stack(rows))


SWITCH_MARGIN_DEFAULT = 0.05


def classify_corpus(bundle: ModelBundle, conns: list[Connection],
                    max_iters: int = MAX_ITERS_DEFAULT,
                    connection_ids: list[str] | None = None,
                    switch_margin: float = SWITCH_MARGIN_DEFAULT,
                    ) -> list[ConnectionResult]:
    """Run the full iterative pipeline over a corpus.

    Connections are processed in lockstep so every model is invoked in large
    batches; iteration state is tracked per connection.  During enhanced
    iterations a prediction only changes when the model prefers the new
    label by more than ``switch_margin``; this hysteresis suppresses
    oscillation between near-tied labels without affecting fixed points.
    """
    if max_iters < 1:
        raise InferenceError("max_iters must be >= 1")
    ids = connection_ids or [f"conn-{i}" for i in range(len(conns))]
    states = []
    for conn, cid in zip(conns, ids):
        protocol = classify_alp(bundle, conn)
        states.append(_ConnState(conn=conn, connection_id=cid,
                                 protocol=protocol, msg_flags=[], header_idx=[],
                                 base=np.zeros((0, 0)), labels=[]))

    # message types, batched per protocol
    for protocol in PROTOCOLS:
        members = [s for s in states if s.protocol == protocol]
        model = bundle.models.get(protocol, ProtocolModels()).message_type
        rows, owners = [], []
        for s in members:
            s.msg_flags = [False] * len(s.conn.records)
            if model is None:
                continue
            for rec in s.conn.records:
                if rec.type_code == 23:
                    rows.append(assemble_record_sample(
                        s.conn, rec.index,
                        "tor" if bundle.mode == "tor" else "standard").values)
                    owners.append((s, rec.index))
        for (s, idx), flag in zip(owners, _predict_problem_batch(model, rows)):
            s.msg_flags[idx] = bool(int(flag))

    for s in states:
        s.header_idx = [i for i, f in enumerate(s.msg_flags) if f]
        s.base = _base_matrix(bundle, s.conn, s.header_idx)
        s.labels = [{} for _ in s.header_idx]

    # first semantics pass, batched per (protocol, problem)
    for protocol in PROTOCOLS:
        members = [s for s in states if s.protocol == protocol]
        models = bundle.models.get(protocol, ProtocolModels())
        for p in bundle.problems[protocol]:
            model = models.single.get(p.id)
            if model is None:
                continue
            rows, owners = [], []
            for s in members:
                for pos, idx in enumerate(s.header_idx):
                    if _record_side(s.conn.records[idx].direction) == p.side:
                        rows.append(s.base[pos])
                        owners.append((s, pos))
            for (s, pos), label in zip(owners, _predict_problem_batch(model, rows)):
                s.labels[pos][p.id] = label

    # iterative enhanced passes; records update sequentially within a pass so
    # each classification sees the freshest predictions (this converges far
    # faster than simultaneous updates)
    active = [s for s in states
              if s.header_idx and bundle.models.get(s.protocol)
              and bundle.models[s.protocol].enhanced]
    contexts = {id(s): [indicator_vector(bundle.problems[s.protocol], lab)
                        for lab in s.labels] for s in active}
    while active and max(s.iterations for s in active) < max_iters:
        snapshots = {id(s): [dict(lab) for lab in s.labels] for s in active}
        max_headers = max(len(s.header_idx) for s in active)
        for pos in range(max_headers):
            updates: dict[tuple[int, str], str] = {}
            for protocol in PROTOCOLS:
                problems = bundle.problems[protocol]
                models = bundle.models.get(protocol, ProtocolModels())
                for p in problems:
                    model = models.enhanced.get(p.id)
                    if model is None:
                        continue
                    rows, owners = [], []
                    for s in active:
                        if s.protocol != protocol or pos >= len(s.header_idx):
                            continue
                        idx = s.header_idx[pos]
                        if _record_side(s.conn.records[idx].direction) != p.side:
                            continue
                        vecs = contexts[id(s)]
                        window = tor_enhanced_window(len(vecs), pos) \
                            if bundle.mode == "tor" else None
                        ctx = build_enhanced_features(
                            problems, vecs, pos, p.id,
                            bundle.exclude_whole_record, window)
                        rows.append(np.concatenate([s.base[pos], ctx]))
                        owners.append(s)
                    if not rows:
                        continue
                    scores = rf.predict_scores(model, np.stack(rows))
                    cls_index = {c: k for k, c in enumerate(model.classes)}
                    for s, row in zip(owners, scores):
                        best = int(np.argmax(row))
                        label = model.classes[best]
                        current = s.labels[pos].get(p.id)
                        if current is not None and current != label:
                            cur_score = row[cls_index[current]] \
                                if current in cls_index else 0.0
                            if row[best] - cur_score <= switch_margin:
                                label = current
                        updates[(id(s), p.id)] = label
            for s in active:
                if pos >= len(s.header_idx):
                    continue
                changed = False
                for p in bundle.problems[s.protocol]:
                    label = updates.get((id(s), p.id))
                    if label is not None and s.labels[pos].get(p.id) != label:
                        s.labels[pos][p.id] = label
                        changed = True
                if changed:
                    contexts[id(s)][pos] = indicator_vector(
                        bundle.problems[s.protocol], s.labels[pos])
        still = []
        for s in active:
            s.iterations += 1
            if s.labels == snapshots[id(s)]:
                s.converged = True
            elif s.iterations < max_iters:
                still.append(s)
        active = still

    results = []
    for s in states:
        if not s.header_idx or not (bundle.models.get(s.protocol)
                                    and bundle.models[s.protocol].enhanced):
            s.converged = True
        by_pos = dict(zip(s.header_idx, s.labels))
        recs = [RecordPrediction(index=i, message_type=s.msg_flags[i],
                                 labels=by_pos.get(i, {}))
                for i in range(len(s.conn.records))]
        results.append(ConnectionResult(protocol=s.protocol,
                                        iterations=s.iterations,
                                        converged=s.converged, records=recs,
                                        connection_id=s.connection_id))
    return results


def classify_connection(bundle: ModelBundle, conn: Connection,
                        max_iters: int = MAX_ITERS_DEFAULT) -> ConnectionResult:
    return classify_corpus(bundle, [conn], max_iters)[0]


def single_pass_classify(bundle: ModelBundle, conn: Connection,
                         ) -> ConnectionResult:
    """First-pass predictions only (no enhanced iterations)."""
    return classify_corpus(bundle, [conn], max_iters=1)[0]


def aggregate_predictions(problems: list[ProblemSpec],
                          result: ConnectionResult) -> np.ndarray:
    """Connection-level sum of predicted indicator vectors (Section 5 enrichment)."""
    total = np.zeros(enhanced_length(problems), dtype=np.float64)
    for rec in result.records:
        if rec.message_type:
            total += indicator_vector(problems, rec.labels)
    return total


# --- training ---

def _child_params(params: rf.TrainParams, base_seed: int, index: int,
                  ) -> rf.TrainParams:
    seed = int(np.random.SeedSequence((base_seed, index)).generate_state(1)[0])
    return replace(params, seed=seed)


def train_bundle(train: list[LabeledConnection], mode: str = "standard",
                 params: rf.TrainParams | None = None,
                 include_etag: bool = False, seed: int = 0,
                 exclude_whole_record: bool = False,
                 with_enhanced: bool = True,
                 context_source: str = "cross_fit") -> ModelBundle:
    """Train every model in the bundle from a labeled corpus.

    Enhanced-model training contexts are built with the same exclusion rule
    applied at inference time.  With ``context_source="cross_fit"`` (default)
    the context labels come from held-out first-pass predictions (two folds),
    so the enhanced models see the noisy count distributions they will
    receive when iterating; ``"ground_truth"`` uses the true labels instead.
    """
    if context_source not in ("cross_fit", "ground_truth"):
        raise InferenceError(f"unknown context_source {context_source!r}")
    if mode not in ("standard", "tor"):
        raise InferenceError(f"unknown mode {mode!r}")
    params = params or DEFAULT_PARAMS
    problems = {p: registry(p, include_etag) for p in PROTOCOLS}
    bundle = ModelBundle(mode=mode, include_etag=include_etag,
                         problems=problems, models={},
                         exclude_whole_record=exclude_whole_record)
    cat = record_categorical_indices()
    model_index = 0

    protocols_seen = sorted({lc.protocol for lc in train})
    if not protocols_seen:
        raise InferenceError("empty training corpus")
    bundle.default_protocol = protocols_seen[0]
    if len(protocols_seen) > 1:
        X = np.stack([alp_fallback_features(lc.conn) for lc in train])
        y = [lc.protocol for lc in train]
        bundle.alp_fallback = rf.train(X, y, _child_params(params, seed, model_index),
                                       schema_id=SCHEMA_ALP_FALLBACK)
    model_index += 1

    for protocol in PROTOCOLS:
        members = [lc for lc in train if lc.protocol == protocol]
        pm = ProtocolModels()
        bundle.models[protocol] = pm
        if not members:
            model_index += 1 + 2 * len(problems[protocol])
            continue
        schema = bundle.base_schema()
        fmode = "tor" if mode == "tor" else "standard"

        mt_rows, mt_y = [], []
        conn_headers = []  # (lc, [record indices of headers], base rows, gt labels)
        for lc in members:
            flags = {lr.index: lr.message_type for lr in lc.records}
            header_idx = [lr.index for lr in lc.records if lr.message_type]
            base, labels = [], []
            for rec in lc.conn.records:
                if rec.type_code == 23:
                    row = assemble_record_sample(lc.conn, rec.index, fmode).values
                    mt_rows.append(row)
                    mt_y.append(int(flags.get(rec.index, False)))
            for idx in header_idx:
                base.append(assemble_record_sample(lc.conn, idx, fmode).values)
                labels.append(next(lr.labels for lr in lc.records
                                   if lr.index == idx))
            conn_headers.append((lc, header_idx, base, labels))

        if len(set(mt_y)) > 1:
            pm.message_type = rf.train(np.stack(mt_rows), mt_y,
                                       _child_params(params, seed, model_index),
                                       categorical=cat, schema_id=schema)
        model_index += 1

        context_labels = [[dict(lab) for lab in labels]
                          for _, _, _, labels in conn_headers]
        if with_enhanced and context_source == "cross_fit":
            context_labels = _cross_fit_context(
                conn_headers, problems[protocol], params, seed, cat, schema)
        context_vecs = [[indicator_vector(problems[protocol], lab)
                         for lab in conn] for conn in context_labels]

        for p in problems[protocol]:
            sX, sy, eX = [], [], []
            for m, (lc, header_idx, base, labels) in enumerate(conn_headers):
                vecs = context_vecs[m]
                for pos, idx in enumerate(header_idx):
                    rec = lc.conn.records[idx]
                    if _record_side(rec.direction) != p.side or \
                            p.id not in labels[pos]:
                        continue
                    sX.append(base[pos])
                    sy.append(labels[pos][p.id])
                    if with_enhanced:
                        window = tor_enhanced_window(len(vecs), pos) \
                            if mode == "tor" else None
                        ctx = build_enhanced_features(
                            problems[protocol], vecs, pos, p.id,
                            exclude_whole_record, window)
                        eX.append(np.concatenate([base[pos], ctx]))
            if sX and len(set(sy)) > 1:
                pm.single[p.id] = rf.train(
                    np.stack(sX), sy, _child_params(params, seed, model_index),
                    categorical=cat, schema_id=f"{schema}/{p.id}")
                if with_enhanced:
                    pm.enhanced[p.id] = rf.train(
                        np.stack(eX), sy,
                        _child_params(params, seed, model_index + 1),
                        categorical=cat, schema_id=f"{schema}/{p.id}/enhanced")
            model_index += 2
    return bundle


def _cross_fit_context(conn_headers, problems, params, seed, cat, schema):
    """Held-out first-pass predictions to serve as enhanced-training context.

    Connections are split into two folds; each fold's header records are
    relabeled by per-problem models trained on the other fold.  Records a
    fold model cannot cover keep their ground-truth label.
    """
    context = [[dict(lab) for lab in labels] for _, _, _, labels in conn_headers]
    folds = [m % 2 for m in range(len(conn_headers))]
    for fold in (0, 1):
        train_members = [m for m, f in enumerate(folds) if f != fold]
        predict_members = [m for m, f in enumerate(folds) if f == fold]
        if not train_members or not predict_members:
            continue
        for k, p in enumerate(problems):
            sX, sy = [], []
            for m in train_members:
                lc, header_idx, base, labels = conn_headers[m]
                for pos, idx in enumerate(header_idx):
                    if _record_side(lc.conn.records[idx].direction) == p.side \
                            and p.id in labels[pos]:
                        sX.append(base[pos])
                        sy.append(labels[pos][p.id])
            if not sX or len(set(sy)) < 2:
                continue
            child = _child_params(params, seed, 1000 + 10 * k + fold)
            model = rf.train(np.stack(sX), sy, child, categorical=cat,
                             schema_id=f"{schema}/{p.id}/fold{fold}")
            rows, owners = [], []
            for m in predict_members:
                lc, header_idx, base, labels = conn_headers[m]
                for pos, idx in enumerate(header_idx):
                    if _record_side(lc.conn.records[idx].direction) == p.side \
                            and p.id in labels[pos]:
                        rows.append(base[pos])
                        owners.append((m, pos))
            for (m, pos), label in zip(owners,
                                       rf.predict_labels(model, np.stack(rows))):
                context[m][pos][p.id] = label
    return context


# --- persistence ---

def bundle_to_dict(bundle: ModelBundle) -> dict:
    def opt(f):
        return rf.to_dict(f) if f is not None else None

    return {
        "format_version": BUNDLE_FORMAT_VERSION,
        "mode": bundle.mode,
        "include_etag": bundle.include_etag,
        "exclude_whole_record": bundle.exclude_whole_record,
        "default_protocol": bundle.default_protocol,
        "alp_fallback": opt(bundle.alp_fallback),
        "protocols": {
            protocol: {
                "message_type": opt(pm.message_type),
                "single": {pid: rf.to_dict(f) for pid, f in sorted(pm.single.items())},
                "enhanced": {pid: rf.to_dict(f)
                             for pid, f in sorted(pm.enhanced.items())},
            }
            for protocol, pm in sorted(bundle.models.items())
        },
    }


def bundle_from_dict(data: dict) -> ModelBundle:
    if data.get("format_version") != BUNDLE_FORMAT_VERSION:
        raise InferenceError("unsupported bundle format version")

    def opt(d):
        return rf.from_dict(d) if d is not None else None

    include_etag = data["include_etag"]
    bundle = ModelBundle(
        mode=data["mode"], include_etag=include_etag,
        problems={p: registry(p, include_etag) for p in PROTOCOLS},
        models={}, alp_fallback=opt(data["alp_fallback"]),
        exclude_whole_record=data["exclude_whole_record"],
        default_protocol=data["default_protocol"])
    for protocol, pd in data["protocols"].items():
        bundle.models[protocol] = ProtocolModels(
            message_type=opt(pd["message_type"]),
            single={pid: rf.from_dict(d) for pid, d in pd["single"].items()},
            enhanced={pid: rf.from_dict(d) for pid, d in pd["enhanced"].items()},
        )
    return bundle


def save_bundle(bundle: ModelBundle, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(bundle_to_dict(bundle), fh, sort_keys=True)


def load_bundle(path: str) -> ModelBundle:
    with open(path) as fh:
        return bundle_from_dict(json.load(fh))
