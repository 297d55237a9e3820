"""Synthetic chest-X-ray stand-in, a bag-of-prefix decoder, and two-stage training.

The decoder replaces the language model with

    logits = U^T (mean(prefix tokens) + mean(embedded text tokens)) + bias

so that everything learnable of interest lives in the projector while the
full pipeline (fusion -> projector -> decoder -> cross-entropy) stays
differentiable and cheap enough for finite-difference checks.
"""

import csv
import json
import logging
import math
import os
import re
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources

import numpy as np

from . import projector as pj
from .metrics import ONTOLOGY, NO_FINDING, ce_scores, evaluate_corpus, keyword_labeler
from .segstack import MaskStack, read_segstack, shuffle_classes, write_segstack
from .tensor_core import autograd as ag
from .tensor_core.io import load_tensor, save_tensor
from .tensor_core.kernels import adaptive_avg_pool2d
from .tensor_core.optim import OptimState, adam_step
from .vqa import prompt_templates

log = logging.getLogger(__name__)

__all__ = [
    "WORLD_SEED",
    "SyntheticSample",
    "Vocab",
    "ToyLMParams",
    "ReportModel",
    "TrainConfig",
    "GenConfig",
    "TrainingDiverged",
    "TrainResult",
    "grounding_map",
    "gen_synthetic_dataset",
    "split_dataset",
    "toylm_forward",
    "batch_loss",
    "train_two_stage",
    "eval_loss",
    "generate",
    "evaluate",
    "COMPARISON_ARMS",
    "synthetic_comparison",
    "save_dataset",
    "load_dataset",
    "write_loss_curve",
]

# fixed "world": anatomy template, feature matrix A and vision projection
WORLD_SEED = 1729
BOS, EOS = "<bos>", "<eos>"
_WORD = re.compile(r"[a-z]+|\.")


@lru_cache(maxsize=None)
def _asset(name):
    with resources.files("segfusion.data").joinpath(name).open(encoding="utf-8") as fh:
        return json.load(fh)


def grounding_map():
    """Finding -> segmentation class indices (empty list = unmapped)."""
    return {k: tuple(v) for k, v in _asset("grounding_map.json").items()}


@dataclass
class SyntheticSample:
    id: str
    z: tuple
    R: np.ndarray
    F_I: np.ndarray
    masks: MaskStack
    report: str
    prompt: str

    def mask_array(self):
        """Decoded masks ``[n_cls, H, W]`` as ``uint8``."""
        return self.masks.to_array()


class Vocab:
    def __init__(self, words):
        self.tokens = (BOS, EOS) + tuple(words)
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    @property
    def bos(self):
        return self.index[BOS]

    @property
    def eos(self):
        return self.index[EOS]

    def encode(self, text):
        return [self.index[w] for w in _WORD.findall(text.lower())]

    def decode(self, ids):
        out = []
        for i in ids:
            tok = self.tokens[i]
            if tok in (BOS, EOS):
                continue
            if tok == "." and out:
                out[-1] += "."
            else:
                out.append(tok)
        return " ".join(out)

    @classmethod
    def default(cls):
        cfg = _asset("synthetic.json")
        words = set()
        for text in list(cfg["sentences"].values()) + [cfg["normal_sentence"], *prompt_templates()]:
            words.update(_WORD.findall(text.lower()))
        return cls(sorted(words))


def _world(dims, mask_size):
    rng = np.random.default_rng(WORLD_SEED)
    cfg = _asset("synthetic.json")
    A = rng.normal(0.0, cfg["feature_scale"], size=(dims.d_R, len(ONTOLOGY)))
    Wv = rng.normal(0.0, cfg["vision_scale"], size=(dims.T_v, dims.D))
    # anatomy classes get one fixed rectangle each
    template = np.zeros((dims.n_cls, mask_size, mask_size), dtype=np.uint8)
    first_pathology = min(dims.n_cls, 177)
    for c in range(first_pathology):
        h, w = rng.integers(3, mask_size // 2, size=2)
        r0 = rng.integers(0, mask_size - h + 1)
        c0 = rng.integers(0, mask_size - w + 1)
        template[c, r0 : r0 + h, c0 : c0 + w] = 1
    return A, Wv, template


def _vision_grid(T_v):
    side = math.isqrt(T_v)
    return (side, side) if side * side == T_v else (1, T_v)


def _report_text(z, rng):
    # mention order is shuffled so that no position carries information
    cfg = _asset("synthetic.json")
    sentences = [cfg["sentences"][f] for k, f in enumerate(ONTOLOGY) if z[k] and k != NO_FINDING]
    rng.shuffle(sentences)
    return " ".join(sentences) if sentences else cfg["normal_sentence"]


def gen_synthetic_dataset(n, dims, seed, mask_size=None):
    """Deterministic synthetic samples.

    Each of the 13 findings is present with probability 0.25 ("No Finding"
    is set when none is). A present finding with segmentation classes marks
    one of them with a fixed-size square at a random offset inside that
    finding's own region. ``R = A z + noise``; ``F_I`` is a fixed projection
    of the pooled union of all pathology masks, plus noise, so the image
    features show where something is but not which class it belongs to.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    cfg = _asset("synthetic.json")
    size = mask_size or cfg["mask_size"]
    lesion = max(1, round(cfg["lesion_size"] * size / 32))
    A, Wv, template = _world(dims, size)
    gmap = grounding_map()
    noise = cfg["noise_scale"]
    gh, gw = _vision_grid(dims.T_v)
    rng = np.random.default_rng(seed)
    prompt = cfg["prompt"]
    samples = []
    for i in range(n):
        z = rng.random(len(ONTOLOGY)) < cfg["presence_prior"]
        z[NO_FINDING] = not z[np.arange(len(ONTOLOGY)) != NO_FINDING].any()
        masks = template.copy()
        for k, finding in enumerate(ONTOLOGY):
            classes = [c for c in gmap.get(finding, ()) if c < dims.n_cls]
            if not (z[k] and classes):
                continue
            cls_idx = classes[rng.integers(len(classes))]
            regions = cfg["regions"][finding]
            r0, r1, c0, c1 = regions[rng.integers(len(regions))]
            r0, r1, c0, c1 = (round(v * size / 32) for v in (r0, r1, c0, c1))
            h = min(lesion, r1 - r0)
            w = min(lesion, c1 - c0)
            top = rng.integers(r0, r1 - h + 1)
            left = rng.integers(c0, c1 - w + 1)
            masks[cls_idx, top : top + h, left : left + w] = 1
        zf = z.astype(np.float64)
        R = A @ zf + noise * rng.normal(size=dims.d_R)
        union = masks[first_pathology_index(dims) :].any(axis=0).astype(np.float64)
        pooled = adaptive_avg_pool2d(union, gh, gw).reshape(dims.T_v)
        F_I = pooled[:, None] * Wv + noise * rng.normal(size=(dims.T_v, dims.D))
        samples.append(
            SyntheticSample(
                id=f"s{seed}-{i:05d}",
                z=tuple(bool(v) for v in z),
                R=R,
                F_I=F_I,
                masks=MaskStack.from_array(masks),
                report=_report_text(z, rng),
                prompt=prompt,
            )
        )
    return samples


def first_pathology_index(dims):
    return min(dims.n_cls, 177)


def split_dataset(samples, seed):
    """Seeded 80/10/10 train/val/test split."""
    idx = np.random.default_rng(seed).permutation(len(samples))
    n_tr = int(round(0.8 * len(samples)))
    n_va = int(round(0.1 * len(samples)))
    pick = lambda ix: [samples[i] for i in ix]
    return pick(idx[:n_tr]), pick(idx[n_tr : n_tr + n_va]), pick(idx[n_tr + n_va :])


@dataclass
class ToyLMParams:
    E: np.ndarray
    U: np.ndarray
    bias: np.ndarray

    @classmethod
    def init(cls, vocab_size, width, seed):
        if vocab_size < 40:
            raise ValueError(f"vocabulary of {vocab_size} tokens is too small (need >= 40)")
        rng = np.random.default_rng(seed)
        bound = 1.0 / math.sqrt(width)
        return cls(
            E=rng.normal(0.0, 0.02, size=(vocab_size, width)),
            U=rng.uniform(-bound, bound, size=(width, vocab_size)),
            bias=rng.uniform(-bound, bound, size=vocab_size),
        )

    def tensors(self):
        return {"lm.E": self.E, "lm.U": self.U, "lm.bias": self.bias}

    def copy(self):
        return ToyLMParams(self.E.copy(), self.U.copy(), self.bias.copy())


def toylm_forward(lm, prefix, tokens):
    """Next-token logits ``[V]`` for one multimodal prefix ``[T_out, D_llm]``."""
    prefix = np.asarray(prefix, dtype=np.float64)
    if prefix.ndim != 2 or prefix.shape[1] != lm.E.shape[1]:
        raise pj.DimensionError(f"prefix {prefix.shape} does not match decoder width {lm.E.shape[1]}")
    h = prefix.mean(axis=0)
    if len(tokens):
        h = h + lm.E[np.asarray(tokens)].mean(axis=0)
    return h @ lm.U + lm.bias


@dataclass
class ReportModel:
    projector: pj.ProjectorParams
    lm: ToyLMParams
    vocab: Vocab

    def prefix(self, sample, masks=None):
        S = None
        if self.projector.variant.use_segmaps:
            S = (sample.mask_array() if masks is None else masks)[None]
        return pj.projector_forward(self.projector, sample.F_I[None], sample.R[None], S)[0]


def _batch_inputs(batch, use_segmaps):
    F = np.stack([s.F_I for s in batch])
    R = np.stack([s.R for s in batch])
    S = np.stack([s.mask_array() for s in batch]) if use_segmaps else None
    return F, R, S


def _teacher_forcing_layout(batch, vocab):
    """Flattened context ids, averaging matrix, sample selector and targets."""
    ctx_ids, rows, targets, owners = [], [], [], []
    offset = 0
    for i, s in enumerate(batch):
        prompt = vocab.encode(s.prompt) + [vocab.bos]
        report = vocab.encode(s.report) + [vocab.eos]
        seq = prompt + report[:-1]
        ctx_ids.extend(seq)
        for j, tgt in enumerate(report):
            n = len(prompt) + j
            rows.append((offset, n))
            targets.append(tgt)
            owners.append(i)
        offset += len(seq)
    avg = np.zeros((len(rows), len(ctx_ids)))
    for r, (start, n) in enumerate(rows):
        avg[r, start : start + n] = 1.0 / n
    sel = np.zeros((len(rows), len(batch)))
    sel[np.arange(len(rows)), owners] = 1.0
    return np.asarray(ctx_ids), avg, sel, np.asarray(targets)


def batch_loss(tape, pnodes, lnodes, variant, batch, vocab):
    """Mean teacher-forced cross-entropy over every report position in ``batch``."""
    F, R, S = _batch_inputs(batch, variant.use_segmaps)
    out = pj.project_tokens(pj.fuse(variant, pnodes, F, R, S), pnodes)
    prefix_mean = ag.mean(out, axis=1)
    ids, avg, sel, targets = _teacher_forcing_layout(batch, vocab)
    ctx = ag.matmul(avg, ag.gather_rows(lnodes["lm.E"], ids))
    h = ag.add(ag.matmul(sel, prefix_mean), ctx)
    logits = ag.linear(h, lnodes["lm.U"], lnodes["lm.bias"])
    return ag.softmax_cross_entropy(logits, targets)


@dataclass
class TrainConfig:
    variant: str = "concatenation"
    use_segmaps: bool = False
    alpha_init: float = 0.0
    lr: float = 1e-3
    warmup_ratio: float = 0.03
    batch_size: int = 16
    epochs_stage1: int = 1
    epochs_stage2: int = 1
    seed: int = 0
    two_stage: bool = True
    select_on_val: bool = True

    @classmethod
    def paper(cls, **kw):
        return cls(lr=2e-5, **kw)

    @classmethod
    def synthetic(cls, **kw):
        """Schedule used for the desk-scale synthetic comparisons."""
        base = dict(lr=1e-2, epochs_stage1=15, epochs_stage2=30)
        return cls(**{**base, **kw})

    def stage1_variant(self):
        return pj.FusionVariant(self.variant, self.alpha_init, use_segmaps=False)


@dataclass
class GenConfig:
    temperature: float = 0.2
    max_new_tokens: int = 1024
    greedy: bool = False


class TrainingDiverged(RuntimeError):
    def __init__(self, stage, step):
        super().__init__(f"loss became non-finite at {stage} step {step}")
        self.stage = stage
        self.step = step


@dataclass
class TrainResult:
    model: ReportModel
    loss_curve: list = field(default_factory=list)
    alpha_trajectory: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)
    val_curve: list = field(default_factory=list)


def eval_loss(model, samples, batch_size=64):
    """Teacher-forced loss averaged over ``samples`` (no gradients)."""
    total = 0.0
    count = 0
    for b in range(0, len(samples), batch_size):
        batch = samples[b : b + batch_size]
        tape, pnodes = pj.bind(model.projector)
        for node in pnodes.values():
            node.requires_grad = False
        lnodes = {k: tape.const(v) for k, v in model.lm.tensors().items()}
        n = len(_teacher_forcing_layout(batch, model.vocab)[3])
        total += float(batch_loss(tape, pnodes, lnodes, model.projector.variant, batch, model.vocab).value) * n
        count += n
    return total / count


def _run_stage(model, train, cfg, stage, epochs, rng, result, val=None):
    params = model.projector
    lm_names = list(model.lm.tensors())
    flags = pj.freeze_mask(stage, params, lm_names)
    steps_per_epoch = math.ceil(len(train) / cfg.batch_size)
    opt = OptimState(base_lr=cfg.lr, warmup_ratio=cfg.warmup_ratio, total_steps=epochs * steps_per_epoch)
    all_params = {**params.tensors, **model.lm.tensors()}
    variant = params.variant
    select = bool(val) and cfg.select_on_val
    best = (eval_loss(model, val), -1, {k: v.copy() for k, v in all_params.items()}) if select else None
    for epoch in range(epochs):
        order = rng.permutation(len(train))
        for b in range(steps_per_epoch):
            batch = [train[i] for i in order[b * cfg.batch_size : (b + 1) * cfg.batch_size]]
            tape, pnodes = pj.bind(params)
            lnodes = {k: tape.param(v, k, trainable=flags[k]) for k, v in model.lm.tensors().items()}
            loss = batch_loss(tape, pnodes, lnodes, variant, batch, model.vocab)
            value = float(loss.value)
            if not math.isfinite(value):
                raise TrainingDiverged(stage.value, opt.step + 1)
            grads = tape.backward(loss)
            lr = adam_step(opt, all_params, grads, trainable=flags)
            result.loss_curve.append({"step": len(result.loss_curve), "stage": stage.value, "lr": lr, "loss": value})
            if "alpha" in params.tensors:
                result.alpha_trajectory.append(params.alpha)
        if select:
            vl = eval_loss(model, val)
            result.val_curve.append({"stage": stage.value, "epoch": epoch, "loss": vl})
            if vl < best[0]:
                best = (vl, epoch, {k: v.copy() for k, v in all_params.items()})
    if select:
        # roll back to the epoch with the lowest validation loss
        for k, v in best[2].items():
            np.copyto(all_params[k], v)
        log.info("%s: kept epoch %d (val loss %.4f)", stage.value, best[1], best[0])
    log.info("%s finished: last loss %.4f", stage.value, result.loss_curve[-1]["loss"])


def train_two_stage(cfg, train, vocab=None, dims=None, out_dir=None, val=None):
    """Stage 1 trains the features-only pipeline end to end; stage 2 attaches the
    segmentation branch when requested and trains the projector alone.

    With ``val`` samples (and ``cfg.select_on_val``) each stage keeps the
    parameters of its best validation epoch.
    """
    vocab = vocab or Vocab.default()
    dims = dims or pj.preset("desk")
    seeds = np.random.SeedSequence(cfg.seed).spawn(4)
    proj_seed, lm_seed, seg_seed, order_seed = (int(s.generate_state(1)[0]) for s in seeds)
    params = pj.init_params(dims, cfg.stage1_variant(), proj_seed)
    model = ReportModel(params, ToyLMParams.init(len(vocab), dims.D_llm, lm_seed), vocab)
    result = TrainResult(model)
    if "alpha" in params.tensors:
        result.alpha_trajectory.append(params.alpha)
    rng = np.random.default_rng(order_seed)

    _run_stage(model, train, cfg, pj.Stage.STAGE1, cfg.epochs_stage1, rng, result, val)
    model.projector.stage1_complete = True
    if out_dir:
        result.checkpoints.append(_checkpoint(out_dir, "stage1", model))
    if not cfg.two_stage:
        return result
    if cfg.use_segmaps:
        model.projector = model.projector.with_segmaps(seg_seed)
    _run_stage(model, train, cfg, pj.Stage.STAGE2, cfg.epochs_stage2, rng, result, val)
    if out_dir:
        result.checkpoints.append(_checkpoint(out_dir, "stage2", model))
    return result


def _checkpoint(out_dir, tag, model):
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, f"{tag}.asrg")
    pj.save_checkpoint(path, model.projector, model.lm.tensors())
    return path


def load_model(path, vocab=None):
    params, extra = pj.load_checkpoint(path)
    lm = ToyLMParams(extra["lm.E"], extra["lm.U"], extra["lm.bias"])
    return ReportModel(params, lm, vocab or Vocab.default())


def generate(model, sample, gen=None, seed=0, masks=None):
    """Sample report token ids (end token excluded).

    Softmax sampling at ``gen.temperature``, or argmax when ``gen.greedy``.
    """
    gen = gen or GenConfig()
    if not gen.greedy and gen.temperature <= 0:
        raise ValueError("temperature must be positive unless greedy decoding is used")
    vocab, lm = model.vocab, model.lm
    prefix_mean = model.prefix(sample, masks).mean(axis=0)
    ctx = vocab.encode(sample.prompt) + [vocab.bos]
    ctx_sum = lm.E[ctx].sum(axis=0)
    n = len(ctx)
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(gen.max_new_tokens):
        logits = (prefix_mean + ctx_sum / n) @ lm.U + lm.bias
        if gen.greedy:
            tok = int(np.argmax(logits))
        else:
            z = logits / gen.temperature
            p = np.exp(z - z.max())
            tok = int(rng.choice(len(p), p=p / p.sum()))
        if tok == vocab.eos:
            break
        out.append(tok)
        ctx_sum = ctx_sum + lm.E[tok]
        n += 1
    return out


def _shuffle_seed(shuffle_seed, i):
    return int(np.random.SeedSequence((shuffle_seed, i)).generate_state(1)[0])


def evaluate(model, samples, gen=None, seed=0, shuffle_seed=None, lexical=True):
    """Generate for every sample and score against the reference reports.

    With ``shuffle_seed`` the class axis of each sample's masks is permuted
    (a different seeded permutation per sample) before generation.
    """
    gen = gen or GenConfig(max_new_tokens=48)
    cands = []
    for i, s in enumerate(samples):
        masks = None
        if shuffle_seed is not None and model.projector.variant.use_segmaps:
            masks = shuffle_classes(s.masks, _shuffle_seed(shuffle_seed, i)).to_array().astype(np.float64)
        ids = generate(model, s, gen, seed=_shuffle_seed(seed, i), masks=masks)
        cands.append(model.vocab.decode(ids))
    refs = [s.report for s in samples]
    preds = [keyword_labeler(c) for c in cands]
    golds = [tuple(s.z) for s in samples]
    if lexical:
        summary = evaluate_corpus(cands, refs)
        summary["ce"] = ce_scores(preds, golds)
    else:
        summary = {"ce": ce_scores(preds, golds)}
    summary["candidates"] = cands
    return summary


COMPARISON_ARMS = {
    "baseline": dict(variant="baseline"),
    "features": dict(variant="concatenation"),
    "features+segmaps": dict(variant="concatenation", use_segmaps=True),
}


def synthetic_comparison(seeds, n=512, dims=None, shuffle_seed=7, progress=None, **train_kw):
    """Train every arm of :data:`COMPARISON_ARMS` once per seed and score it.

    Each seed draws its own dataset and split. Returns ``{arm: [CE F1 per
    seed]}`` plus ``"shuffled"``: the features+segmaps model evaluated with
    permuted mask classes.
    """
    dims = dims or pj.preset("desk")
    scores = {name: [] for name in (*COMPARISON_ARMS, "shuffled")}
    for seed in seeds:
        train, val, test = split_dataset(gen_synthetic_dataset(n, dims, seed), seed)
        for name, kw in COMPARISON_ARMS.items():
            cfg = TrainConfig.synthetic(seed=seed, **kw, **train_kw)
            model = train_two_stage(cfg, train, dims=dims, val=val).model
            scores[name].append(evaluate(model, test, lexical=False)["ce"]["f1"])
            if cfg.use_segmaps:
                shuffled = evaluate(model, test, shuffle_seed=shuffle_seed, lexical=False)
                scores["shuffled"].append(shuffled["ce"]["f1"])
        if progress:
            progress(seed, {k: v[-1] for k, v in scores.items()})
    return scores


def save_dataset(directory, samples):
    """SSTK masks, float64 TNSR fixtures and an ``index.jsonl``."""
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "index.jsonl"), "w", encoding="utf-8") as idx:
        for s in samples:
            paths = {k: f"{s.id}.{k}" for k in ("sstk", "R.tnsr", "F_I.tnsr")}
            with open(os.path.join(directory, paths["sstk"]), "wb") as fh:
                fh.write(write_segstack(s.masks))
            save_tensor(os.path.join(directory, paths["R.tnsr"]), s.R, version=2)
            save_tensor(os.path.join(directory, paths["F_I.tnsr"]), s.F_I, version=2)
            row = {
                "id": s.id,
                "z": [int(v) for v in s.z],
                "report": s.report,
                "prompt": s.prompt,
                "masks": paths["sstk"],
                "R": paths["R.tnsr"],
                "F_I": paths["F_I.tnsr"],
            }
            idx.write(json.dumps(row) + "\n")


def load_dataset(directory):
    samples = []
    with open(os.path.join(directory, "index.jsonl"), encoding="utf-8") as idx:
        for line in idx:
            if not line.strip():
                continue
            row = json.loads(line)
            with open(os.path.join(directory, row["masks"]), "rb") as fh:
                masks = read_segstack(fh.read())
            samples.append(
                SyntheticSample(
                    id=row["id"],
                    z=tuple(bool(v) for v in row["z"]),
                    R=load_tensor(os.path.join(directory, row["R"])),
                    F_I=load_tensor(os.path.join(directory, row["F_I"])),
                    masks=masks,
                    report=row["report"],
                    prompt=row["prompt"],
                )
            )
    return samples


def write_loss_curve(path, curve):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["step", "stage", "lr", "loss"])
        w.writeheader()
        w.writerows(curve)
