"""End-to-end orchestration: model bundle, two-phase training, evaluation
with matching/pose/bandwidth metrics, packet inference, threshold sweeps
and report files.

Training runs in two phases. Phase 1 fits the matcher encoder and the
consensus encoder with the relaxed matching loss over every pair,
overlapping or not. Phase 2 freezes those weights, caches each overlapping
pair's node embeddings once, and fits the pose network on the pose loss
with ground-truth overlap gating; at evaluation time gating always uses the
predicted overlap flag.
"""

import io
import json
import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape, Tensor
from .config import RunConfig
from .encoder import EncoderParams, encode, encode_arrays, init_encoder_params
from .errors import ConfigError, DataError, DivergenceError
from .matcher import (ConsensusConfig, consensus_difference, detect_overlap,
                      high_loss, match_graphs, similarity)
from .optim import Adam
from .pose import (PoseParams, estimate_pose, init_pose_params, low_loss_tensors,
                   predict_pose, rotation_error_metric)
from . import wire

CHECKPOINT_VERSION = 1


@dataclass
class Model:
    config: RunConfig
    encoder: EncoderParams
    consensus: EncoderParams
    pose: PoseParams
    colorings: np.ndarray     # fixed random matrix for the consensus check
    step: int = 0

    def named_tensors(self):
        yield from self.encoder.named_tensors("enc")
        yield from self.consensus.named_tensors("cons")
        yield from self.pose.named_tensors("pose")

    def consensus_config(self) -> ConsensusConfig:
        c = self.config
        return ConsensusConfig(r=c.consensus_r, tau=c.tau,
                               seed=c.seed, n_max=c.n_max)

    def high_level_tensors(self):
        return self.encoder.tensors() + self.consensus.tensors()


def init_model(config: RunConfig, seed: int | None = None) -> Model:
    cfg = config.validate()
    s = cfg.seed if seed is None else seed
    rng = np.random.default_rng(np.random.SeedSequence([s, 0x1817]))
    enc = init_encoder_params(rng, cfg.d_f, cfg.d, cfg.heads, cfg.layers_high)
    cons = init_encoder_params(rng, cfg.consensus_r, cfg.consensus_width,
                               cfg.consensus_heads, cfg.consensus_layers)
    pose = init_pose_params(rng, cfg.d, cfg.heads, cfg.layers_low, cfg.n_max,
                            cfg.gate_hidden, cfg.head_hidden)
    colorings = np.random.default_rng(
        np.random.SeedSequence([s, 0xC01])).uniform(-1.0, 1.0,
                                                    size=(cfg.n_max, cfg.consensus_r))
    return Model(config=cfg, encoder=enc, consensus=cons, pose=pose,
                 colorings=colorings)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(model: Model, path) -> None:
    arrays = {name: t.data for name, t in model.named_tensors()}
    arrays["colorings"] = model.colorings
    cfg_json = json.dumps(model.config.to_dict(), sort_keys=True)
    arrays["__config__"] = np.frombuffer(cfg_json.encode("utf-8"), dtype=np.uint8)
    arrays["__meta__"] = np.array([CHECKPOINT_VERSION, model.step], dtype=np.int64)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> Model:
    try:
        with np.load(path) as npz:
            arrays = {k: npz[k] for k in npz.files}
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if "__meta__" not in arrays or "__config__" not in arrays:
        raise DataError(f"checkpoint {path} is missing metadata")
    version, step = (int(v) for v in arrays["__meta__"])
    if version != CHECKPOINT_VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    cfg = RunConfig.from_dict(json.loads(arrays["__config__"].tobytes().decode("utf-8")))
    model = init_model(cfg)
    model.step = step
    model.colorings = arrays["colorings"]
    for name, t in model.named_tensors():
        if name not in arrays:
            raise DataError(f"checkpoint {path} is missing tensor {name}")
        if arrays[name].shape != t.data.shape:
            raise DataError(
                f"checkpoint tensor {name} has shape {arrays[name].shape}, "
                f"expected {t.data.shape}")
        t.data = arrays[name].astype(np.float64)
    return model


def _snapshot(model: Model) -> dict:
    snap = {name: t.data.copy() for name, t in model.named_tensors()}
    snap["__step__"] = model.step
    return snap


def _restore(model: Model, snap: dict) -> None:
    for name, t in model.named_tensors():
        t.data = snap[name].copy()
    model.step = snap["__step__"]


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _pair_matching_loss(model: Model, inst, training: bool, rng):
    cfg = model.config
    drop = cfg.dropout_attn if training else 0.0
    h_a = encode(inst.ego, model.encoder, training=training, dropout=drop, rng=rng)
    h_b = encode(inst.mate, model.encoder, training=training, dropout=drop, rng=rng)
    s = similarity(h_a, h_b)
    d = consensus_difference(s, inst.ego, inst.mate, model.consensus,
                             model.consensus_config(), model.colorings)
    return high_loss(s, d, cfg.tau, inst.y_star, beta=cfg.beta)


def train(config: RunConfig, dataset, seed: int | None = None,
          log=print) -> Model:
    """Two-phase training; deterministic per seed.

    Emits one log line per epoch and phase. On a non-finite loss the run
    aborts with DivergenceError carrying the last finite epoch snapshot.
    """
    if not dataset:
        raise DataError("training dataset is empty")
    cfg = config.validate()
    model = init_model(cfg, seed)
    s = cfg.seed if seed is None else seed
    rng = np.random.default_rng(np.random.SeedSequence([s, 0x7247]))

    def run_phase(phase: int, instances, params, loss_fn):
        opt = Adam(params, lr=cfg.lr)
        snap = _snapshot(model)
        try:
            for epoch in range(cfg.epochs):
                order = rng.permutation(len(instances))
                total = 0.0
                seen = 0
                t0 = time.perf_counter()
                for start in range(0, len(order), cfg.batch):
                    chunk = order[start:start + cfg.batch]
                    opt.zero_grad()
                    used = 0
                    for idx in chunk:
                        inst = instances[idx]
                        with Tape() as tape:
                            loss = loss_fn(inst)
                        if loss is None:
                            continue
                        val = float(loss.data)
                        if not np.isfinite(val):
                            raise DivergenceError(
                                f"phase {phase} diverged at epoch {epoch + 1}")
                        tape.backward(loss)
                        total += val
                        used += 1
                        seen += 1
                    if used:
                        inv = 1.0 / used
                        for p in params:
                            if p.grad is not None:
                                p.grad *= inv
                        opt.step()
                        model.step += 1
                mean = total / max(seen, 1)
                snap = _snapshot(model)
                log(f"phase={phase} epoch={epoch + 1}/{cfg.epochs} "
                    f"loss={mean:.6f} time={time.perf_counter() - t0:.1f}s")
        except DivergenceError as exc:
            exc.snapshot = snap    # last finite epoch
            raise

    # phase 1: matcher + consensus encoders on every pair
    def matching_loss(inst):
        if inst.ego.n == 0 or inst.mate.n == 0:
            return None
        return _pair_matching_loss(model, inst, training=True, rng=rng)

    run_phase(1, dataset, model.high_level_tensors(), matching_loss)

    # phase 2: pose network on overlapping pairs, frozen matcher weights,
    # embeddings cached once per instance
    overlapping = [inst for inst in dataset
                   if inst.overlap and inst.ego.n and inst.mate.n]
    cache = [(encode(inst.ego, model.encoder).data,
              encode(inst.mate, model.encoder).data, inst)
             for inst in overlapping]

    def pose_loss(entry):
        h_e, h_m, inst = entry
        p_hat, q_hat = estimate_pose(Tensor(h_e), Tensor(h_m), model.pose,
                                     training=True, dropout=cfg.dropout_mlp,
                                     rng=rng)
        _, _, total = low_loss_tensors(p_hat, q_hat, inst.pose)
        return total

    run_phase(2, cache, model.pose.tensors(), pose_loss)
    return model


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass
class InstanceRow:
    index: int
    n_ego: int
    n_mate: int
    true_overlap: bool
    pred_overlap: bool
    retrieved: int
    correct: int
    gt_pairs: int
    pe: float | None
    re: float | None
    ps: int
    missed_pose: bool

    def to_json(self) -> dict:
        return {
            "index": self.index, "n_ego": self.n_ego, "n_mate": self.n_mate,
            "true_overlap": self.true_overlap, "pred_overlap": self.pred_overlap,
            "retrieved": self.retrieved, "correct": self.correct,
            "gt_pairs": self.gt_pairs,
            "pe": self.pe, "re": self.re, "ps": self.ps,
            "missed_pose": self.missed_pose,
        }


@dataclass
class MetricsReport:
    precision: float
    recall: float
    f1: float
    nda: float
    mean_pe: float | None
    median_pe: float | None
    mean_re: float | None
    mean_ps: float
    missed_pose: int
    instances: int
    rows: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "precision": self.precision, "recall": self.recall, "f1": self.f1,
            "nda": self.nda, "mean_pe": self.mean_pe, "median_pe": self.median_pe,
            "mean_re": self.mean_re, "mean_ps": self.mean_ps,
            "missed_pose": self.missed_pose, "instances": self.instances,
            "rows": [r.to_json() for r in self.rows],
        }

    @staticmethod
    def from_json(obj: dict) -> "MetricsReport":
        rows = [InstanceRow(**r) for r in obj.get("rows", [])]
        return MetricsReport(
            precision=obj["precision"], recall=obj["recall"], f1=obj["f1"],
            nda=obj["nda"], mean_pe=obj["mean_pe"], median_pe=obj["median_pe"],
            mean_re=obj["mean_re"], mean_ps=obj["mean_ps"],
            missed_pose=obj["missed_pose"], instances=obj["instances"],
            rows=rows)


def f1_score(precision: float, recall: float) -> float:
    if precision + recall <= 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def evaluate(model: Model, dataset, *, gate_poses: bool = True,
             use_consensus: bool = True, tau: float | None = None) -> MetricsReport:
    """Run the full pipeline per instance and aggregate the section metrics.

    Poses are only estimated where overlap is predicted (unless
    ``gate_poses`` is off, which forces a pose for every instance — the
    ablation mode). Position/rotation errors average over instances that
    truly overlap and were predicted to; true-overlap pairs predicted
    non-overlapping count as missed poses instead.
    """
    cons_cfg = model.consensus_config()
    if tau is not None:
        cons_cfg.tau = tau
    rows = []
    retrieved = correct = gt_total = 0
    nda_hits = 0
    pes, res = [], []
    ps_list = []
    missed = 0
    for idx, inst in enumerate(dataset):
        nonempty = inst.ego.n > 0 and inst.mate.n > 0
        emb = ((encode(inst.ego, model.encoder), encode(inst.mate, model.encoder))
               if nonempty else None)
        result = match_graphs(inst.ego, inst.mate, model.encoder,
                              model.consensus, cons_cfg, model.colorings,
                              use_consensus=use_consensus, embeddings=emb)
        pred = result.overlap
        y = result.assignment
        inst_retrieved = int(y.sum())
        inst_correct = int((y * inst.y_star).sum()) if y.size else 0
        inst_gt = int(inst.y_star.sum())
        ps = wire.packet_size(inst.mate)
        pe = re = None
        row_missed = False
        if nonempty and (pred or not gate_poses):
            est = predict_pose(emb[0], emb[1], model.pose)
            # errors are only scored against truth when a pose should exist:
            # always in ungated mode, else on predicted true overlaps
            if not gate_poses or inst.overlap:
                pe = float(np.linalg.norm(est.position - inst.pose.position))
                re = rotation_error_metric(est.orientation, inst.pose.orientation)
        if inst.overlap and not pred:
            missed += 1
            row_missed = True
        retrieved += inst_retrieved
        correct += inst_correct
        gt_total += inst_gt
        nda_hits += int(pred == inst.overlap)
        if pe is not None:
            pes.append(pe)
            res.append(re)
        ps_list.append(ps)
        rows.append(InstanceRow(index=idx, n_ego=inst.ego.n, n_mate=inst.mate.n,
                                true_overlap=bool(inst.overlap),
                                pred_overlap=bool(pred),
                                retrieved=inst_retrieved, correct=inst_correct,
                                gt_pairs=inst_gt, pe=pe, re=re, ps=ps,
                                missed_pose=row_missed))
    precision = correct / retrieved if retrieved else 0.0
    recall = correct / gt_total if gt_total else 0.0
    return MetricsReport(
        precision=precision, recall=recall, f1=f1_score(precision, recall),
        nda=nda_hits / len(dataset) if dataset else 0.0,
        mean_pe=float(np.mean(pes)) if pes else None,
        median_pe=float(np.median(pes)) if pes else None,
        mean_re=float(np.mean(res)) if res else None,
        mean_ps=float(np.mean(ps_list)) if ps_list else 0.0,
        missed_pose=missed, instances=len(dataset), rows=rows)


def infer(model: Model, ego_packet: bytes, mate_packet: bytes) -> dict:
    """Decode two packets, decide overlap, and estimate the pose if any."""
    ego = wire.decode(ego_packet)
    mate = wire.decode(mate_packet)
    for g, name in ((ego, "ego"), (mate, "mate")):
        if g.n and g.feature_dim != model.config.d_f:
            raise DataError(
                f"{name} packet has feature width {g.feature_dim}, "
                f"model expects {model.config.d_f}")
    result = match_graphs(ego, mate, model.encoder, model.consensus,
                          model.consensus_config(), model.colorings)
    if not result.overlap:
        return {"overlap": False}
    est = predict_pose(encode(ego, model.encoder),
                       encode(mate, model.encoder), model.pose)
    return est.to_json(overlap=True)


# ---------------------------------------------------------------------------
# threshold sweep
# ---------------------------------------------------------------------------

def sweep_tau(model: Model, dataset, taus) -> list:
    """Re-run the decision stage for each threshold; embeddings computed once.

    Returns rows of (tau, nda, f1, precision, recall).
    """
    taus = list(taus)
    if not taus:
        raise ConfigError("tau grid must be nonempty")
    for t in taus:
        if not 0.0 < t <= 1.0:
            raise ConfigError(f"tau values must be in (0, 1], got {t}")
    from .matcher import assign
    cached = []
    for inst in dataset:
        if inst.ego.n == 0 or inst.mate.n == 0:
            cached.append((None, inst))
            continue
        res = match_graphs(inst.ego, inst.mate, model.encoder, model.consensus,
                           model.consensus_config(), model.colorings)
        cached.append((res.similarity + res.difference, inst))
    out = []
    for t in taus:
        retrieved = correct = gt_total = 0
        hits = 0
        for scores, inst in cached:
            if scores is None:
                pred = False
                y_sum = 0
                inst_correct = 0
            else:
                s_hat = (scores >= t).astype(np.int8)
                y = assign(s_hat, scores)
                pred = detect_overlap(y)
                y_sum = int(y.sum())
                inst_correct = int((y * inst.y_star).sum())
            retrieved += y_sum
            correct += inst_correct
            gt_total += int(inst.y_star.sum())
            hits += int(pred == inst.overlap)
        precision = correct / retrieved if retrieved else 0.0
        recall = correct / gt_total if gt_total else 0.0
        out.append((t, hits / len(dataset) if dataset else 0.0,
                    f1_score(precision, recall), precision, recall))
    return out


def sweep_to_csv(rows) -> str:
    buf = io.StringIO()
    buf.write("tau,nda,f1,precision,recall\n")
    for t, nda, f1, p, r in rows:
        buf.write(f"{t!r},{nda!r},{f1!r},{p!r},{r!r}\n")
    return buf.getvalue()


# ---------------------------------------------------------------------------
# report files
# ---------------------------------------------------------------------------

_CSV_COLUMNS = ["index", "n_ego", "n_mate", "true_overlap", "pred_overlap",
                "retrieved", "correct", "gt_pairs", "pe", "re", "ps",
                "missed_pose"]


def report_to_csv(report: MetricsReport) -> str:
    """Per-instance rows as CSV (summary fields live in the JSON form)."""
    buf = io.StringIO()
    buf.write(",".join(_CSV_COLUMNS) + "\n")
    for r in report.rows:
        vals = []
        for col in _CSV_COLUMNS:
            v = getattr(r, col)
            if v is None:
                vals.append("")
            elif isinstance(v, bool):
                vals.append("1" if v else "0")
            else:
                vals.append(repr(v) if isinstance(v, float) else str(v))
        buf.write(",".join(vals) + "\n")
    return buf.getvalue()


def write_report(report: MetricsReport, fmt: str, path) -> None:
    if fmt == "json":
        payload = json.dumps(report.to_json(), indent=2, sort_keys=False)
    elif fmt == "csv":
        payload = report_to_csv(report)
    else:
        raise ConfigError(f"unknown report format {fmt!r}")
    try:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(payload)
    except OSError as exc:
        raise DataError(f"cannot write report {path}: {exc}") from exc
