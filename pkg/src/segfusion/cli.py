"""``segfusion`` command line: training, evaluation, ablation, grounding, conversion.

Exit codes: 0 success, 2 validation failure, 3 I/O error.
"""

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field

import numpy as np

from . import metrics as M
from . import projector as pj
from . import stats, toy, vqa
from .segstack import MaskStack, presence, read_segstack
from .tensor_core import autograd as ag
from .tensor_core.gradcheck import grad_check
from .tensor_core.io import FormatError

log = logging.getLogger("segfusion")

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 2, 3

AGREEMENT_LABELS = ("both-positive", "report-only", "segmentation-only", "both-negative")
UNMAPPED = "unmapped"


class ValidationFailure(Exception):
    """Input was readable but failed a check; maps to exit code 2."""


@dataclass
class RunManifest:
    command: str
    config_hash: str
    seed: int
    variant: str
    config: dict
    checkpoints: list = field(default_factory=list)
    outputs: dict = field(default_factory=dict)
    started: float = field(default_factory=time.time)
    finished: float = None

    def write(self, out_dir):
        os.makedirs(out_dir, exist_ok=True)
        path = os.path.join(out_dir, "manifest.json")
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(dataclasses.asdict(self), fh, indent=1, sort_keys=True)
        return path

    @classmethod
    def read(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls(**json.load(fh))


def config_hash(config):
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def _load_json(path):
    with open(path, encoding="utf-8") as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as e:
            raise ValidationFailure(f"{path}: invalid JSON ({e.msg} at line {e.lineno})") from None


def _write_text(path, text):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text if text.endswith("\n") else text + "\n")


# ---------------------------------------------------------------- grounding


def _default_mapping():
    return toy.grounding_map()


def cmd_ground(report, stack, mapping=None, min_area_fraction=0.001):
    """Agreement between report mentions and segmentation presence, per finding.

    ``mapping`` is ``{finding: [class indices]}``; findings missing from it
    (or mapped to an empty list) are labelled ``"unmapped"``.
    """
    mapping = _default_mapping() if mapping is None else mapping
    labels = M.keyword_labeler(report)
    present = presence(stack, min_area_fraction)
    rows = []
    for k, finding in enumerate(M.ONTOLOGY):
        if k == M.NO_FINDING:
            continue
        classes = list(mapping.get(finding) or ())
        row = {"finding": finding, "classes": classes, "report": bool(labels[k])}
        if not classes:
            row.update(segmentation=None, label=UNMAPPED)
        else:
            bad = [c for c in classes if not 0 <= c < stack.n_cls]
            if bad:
                raise ValidationFailure(f"{finding}: class indices {bad} outside stack of {stack.n_cls}")
            seg = any(present[c].present for c in classes)
            rep = row["report"]
            label = AGREEMENT_LABELS[(0 if seg else 1) if rep else (2 if seg else 3)]
            row.update(segmentation=seg, label=label)
        rows.append(row)
    return rows


def _example_stack(nonempty=()):
    masks = np.zeros((212, 16, 16), dtype=np.uint8)
    for c in nonempty:
        masks[c, 4:10, 3:9] = 1
    return MaskStack.from_array(masks)


# the three agreement scenarios checked by the acceptance suite
GROUND_EXAMPLES = (
    {
        "name": "effusion-agrees",
        "report": "There is a left pleural effusion.",
        "nonempty": (182,),
        "expect": {"Pleural Effusion": "both-positive"},
    },
    {
        "name": "pneumothorax-absent",
        "report": "The lungs are clear. Heart size is normal.",
        "nonempty": (),
        "expect": {"Pneumothorax": "both-negative"},
    },
    {
        "name": "atelectasis-unsupported",
        "report": "Bibasilar atelectasis.",
        "nonempty": (),
        "expect": {"Atelectasis": "report-only"},
    },
)


def run_ground_examples():
    """Evaluate every built-in example; returns ``[(name, finding, expected, got)]``."""
    out = []
    for ex in GROUND_EXAMPLES:
        rows = {r["finding"]: r for r in cmd_ground(ex["report"], _example_stack(ex["nonempty"]))}
        for finding, want in ex["expect"].items():
            out.append((ex["name"], finding, want, rows[finding]["label"]))
    return out


def format_ground(rows):
    lines = [f"{'finding':<28} {'classes':<14} {'report':<7} {'seg':<7} label", "-" * 70]
    for r in rows:
        cls = r["classes"]
        cls_txt = "-" if not cls else (str(cls[0]) if len(cls) == 1 else f"{cls[0]}..{cls[-1]}")
        seg = "-" if r["segmentation"] is None else str(r["segmentation"]).lower()
        lines.append(f"{r['finding']:<28} {cls_txt:<14} {str(r['report']).lower():<7} {seg:<7} {r['label']}")
    return "\n".join(lines)


# ---------------------------------------------------------------- commands


def _train_config(args):
    cfg = _load_json(args.config) if args.config else {}
    if not isinstance(cfg, dict):
        raise ValidationFailure("config must be a JSON object")
    known = {f.name for f in dataclasses.fields(toy.TrainConfig)}
    extra = set(cfg) - known - {"n_samples", "dims", "data"}
    if extra:
        raise ValidationFailure(f"unknown config keys: {sorted(extra)}")
    train_kw = {k: v for k, v in cfg.items() if k in known}
    if args.seed is not None:
        train_kw["seed"] = args.seed
    try:
        tc = toy.TrainConfig(**train_kw)
        pj.FusionVariant(tc.variant, tc.alpha_init, tc.use_segmaps)
    except (TypeError, ValueError) as e:
        raise ValidationFailure(f"bad training config: {e}") from None
    dims = pj.preset(args.preset, **cfg.get("dims", {}))
    effective = {
        "train": dataclasses.asdict(tc),
        "preset": args.preset,
        "dims": dataclasses.asdict(dims),
        "n_samples": int(cfg.get("n_samples", 512)),
        "data": cfg.get("data"),
    }
    return tc, dims, effective


def cmd_train(args):
    tc, dims, effective = _train_config(args)
    out = args.out
    variant = pj.FusionVariant(tc.variant, tc.alpha_init, tc.use_segmaps)
    manifest = RunManifest(
        "train", config_hash(effective), tc.seed, _variant_tag(variant), effective,
        outputs={"loss_curve": "loss_curve.csv", "dataset": "data"},
    )
    manifest.write(out)
    if effective["data"]:
        samples = toy.load_dataset(effective["data"])
    else:
        samples = toy.gen_synthetic_dataset(effective["n_samples"], dims, tc.seed)
    train, val, test = toy.split_dataset(samples, tc.seed)
    toy.save_dataset(os.path.join(out, "data"), test)
    result = toy.train_two_stage(tc, train, dims=dims, out_dir=out, val=val)
    toy.write_loss_curve(os.path.join(out, "loss_curve.csv"), result.loss_curve)
    manifest.checkpoints = [os.path.basename(p) for p in result.checkpoints]
    manifest.finished = time.time()
    manifest.write(out)
    print(f"trained {manifest.variant}: final loss {result.loss_curve[-1]['loss']:.4f}; outputs in {out}")
    return manifest


def _variant_tag(v):
    return v.kind.value + ("+segmaps" if v.use_segmaps else "")


def _eval_pairs(path):
    cands, refs = [], []
    with open(path, encoding="utf-8") as fh:
        for no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                cands.append(row["candidate"])
                refs.append(row["reference"])
            except (json.JSONDecodeError, KeyError, TypeError):
                raise ValidationFailure(f"{path}:{no}: expected {{id, candidate, reference}}") from None
    return M.evaluate_corpus(cands, refs)


def cmd_eval(args):
    if args.pairs:
        summary = _eval_pairs(args.pairs)
    else:
        if not (args.checkpoint and args.data):
            raise ValidationFailure("eval needs --pairs, or both --checkpoint and --data")
        model = toy.load_model(args.checkpoint)
        samples = toy.load_dataset(args.data)
        gen = toy.GenConfig(args.temperature, args.max_new_tokens, args.greedy)
        summary = toy.evaluate(model, samples, gen, seed=args.seed or 0, shuffle_seed=args.shuffle_seed)
        summary.pop("candidates")
    text = M.format_summary(summary)
    if args.out:
        _write_text(os.path.join(args.out, "metrics.json"), text)
    print(text)
    return summary


def cmd_ablate_shuffle(args):
    if len(args.checkpoint) < 2:
        raise ValidationFailure("ablate-shuffle needs one checkpoint per seed, at least two")
    samples = toy.load_dataset(args.data)
    gen = toy.GenConfig(max_new_tokens=args.max_new_tokens)
    sorted_f1, shuffled_f1 = [], []
    for k, path in enumerate(args.checkpoint):
        model = toy.load_model(path)
        if not model.projector.variant.use_segmaps:
            raise ValidationFailure(f"{path}: checkpoint has no segmentation branch")
        sorted_f1.append(toy.evaluate(model, samples, gen, seed=k, lexical=False)["ce"]["f1"])
        shuffled_f1.append(
            toy.evaluate(model, samples, gen, seed=k, shuffle_seed=args.shuffle_seed + k, lexical=False)["ce"]["f1"]
        )
    res = stats.welch_from_groups(
        stats.RunGroup("sorted", sorted_f1), stats.RunGroup("shuffled", shuffled_f1), "greater"
    )
    report = {
        "sorted": sorted_f1,
        "shuffled": shuffled_f1,
        "welch": dataclasses.asdict(res),
    }
    if args.out:
        _write_text(os.path.join(args.out, "ablate_shuffle.json"), json.dumps(report, indent=1))
    s, h = stats.summarize(sorted_f1), stats.summarize(shuffled_f1)
    print(f"sorted   CE F1 {s['mean']:.4f} +/- {s['std']:.4f}")
    print(f"shuffled CE F1 {h['mean']:.4f} +/- {h['std']:.4f}")
    print(f"Welch one-sided: t={res.t:.3f} df={res.df:.2f} p={res.p:.4g}")
    return report


def cmd_convert(args):
    counts = vqa.convert_jsonl(args.input, args.output, args.seed or 0)
    with open(args.output, encoding="utf-8") as fh:
        violations = vqa.validate_corpus(fh)
    print(f"wrote {counts['written']} chats, skipped {counts['skipped']}")
    for v in violations:
        print(f"line {v.line}: {v.message}", file=sys.stderr)
    if violations:
        raise ValidationFailure(f"{len(violations)} invariant violations in {args.output}")
    return counts


def cmd_stats(args):
    spec = _load_json(args.json)
    try:
        rows = stats.compare_json(spec)
    except (KeyError, ValueError) as e:
        raise ValidationFailure(str(e)) from None
    if args.out:
        _write_text(os.path.join(args.out, "stats.json"), json.dumps(rows, indent=1))
    print(stats.format_table(rows))
    return rows


def cmd_ground_cli(args):
    if args.examples:
        failed = 0
        for name, finding, want, got in run_ground_examples():
            ok = want == got
            failed += not ok
            print(f"{'ok  ' if ok else 'FAIL'} {name}: {finding} -> {got} (expected {want})")
        if failed:
            raise ValidationFailure(f"{failed} grounding examples disagree")
        return None
    if not (args.segstack and (args.report or args.report_file)):
        raise ValidationFailure("ground needs --segstack and --report/--report-file (or --examples)")
    report = args.report
    if args.report_file:
        with open(args.report_file, encoding="utf-8") as fh:
            report = fh.read()
    with open(args.segstack, "rb") as fh:
        stack = read_segstack(fh.read())
    mapping = _load_json(args.mapping) if args.mapping else None
    rows = cmd_ground(report, stack, mapping, args.min_area)
    if args.out:
        _write_text(os.path.join(args.out, "grounding.json"), json.dumps(rows, indent=1))
    print(format_ground(rows))
    return rows


def cmd_demo_fusion(args):
    dims = pj.preset(args.preset)
    rng = np.random.default_rng(args.seed or 0)
    b = 2
    F_I = rng.normal(size=(b, dims.T_v, dims.D))
    R = rng.normal(size=(b, dims.d_R))
    S = (rng.random((b, dims.n_cls, 32, 32)) < 0.05).astype(np.uint8)
    print(f"preset {args.preset}: T_v={dims.T_v} D={dims.D} T_c={dims.T_c} d={dims.d} D_llm={dims.D_llm}")
    for kind in pj.Variant:
        for seg in (False, True) if kind is pj.Variant.CONCATENATION else (False,):
            v = pj.FusionVariant(kind, 0.0, seg)
            params = pj.init_params(dims, v, args.seed or 0)
            out = pj.projector_forward(params, F_I, R, S if seg else None)
            budget = pj.count_params(v, dims)
            print(
                f"{_variant_tag(v):<24} out {str(tuple(out.shape)):<16} "
                f"added {budget.added:>9,d} ({100 * budget.added_fraction:.4f}% of 7.06e9)"
            )


def grad_check_suite(preset="desk", max_entries=6, seed=0):
    """Finite-difference checks for each op and each variant end to end.

    Returns ``[(name, CheckReport)]``. Elementwise ops run on every entry;
    the end-to-end checks sample ``max_entries`` entries per tensor.
    """
    rng = np.random.default_rng(seed)
    reports = []

    def add(name, fn, params, **kw):
        reports.append((name, grad_check(fn, params, **kw)))

    x = rng.normal(size=(2, 3, 5))
    W, bvec = rng.normal(size=(5, 4)), rng.normal(size=4)
    tgt = rng.integers(0, 4, size=6)

    def ce(logits):
        return ag.softmax_cross_entropy(ag.reshape(logits, (-1, logits.value.shape[-1])), tgt)

    add("linear", lambda t, n: ce(ag.linear(n["x"], n["W"], n["b"])), {"x": x, "W": W, "b": bvec})
    Kc, kb = rng.normal(size=(4, 3, 3)), rng.normal(size=4)
    add("conv1d", lambda t, n: ag.sum_all(ag.mul(ag.conv1d(n["x"], n["K"], n["kb"], pad=1), np.cos(np.arange(5)))),
        {"x": x, "K": Kc, "kb": kb})
    c, s_ = rng.normal(size=(2, 6, 3)), rng.normal(size=(2, 6, 3))
    w = rng.normal(size=(2, 6, 3))
    add("adain", lambda t, n: ag.sum_all(ag.mul(ag.adain(n["c"], n["s"]), w)), {"c": c, "s": s_})
    p1 = rng.normal(size=(3, 7))
    wp = rng.normal(size=(3, 3))
    add("adaptive_avg_pool1d", lambda t, n: ag.sum_all(ag.mul(ag.adaptive_avg_pool1d(n["x"], 3), wp)), {"x": p1})
    q = rng.normal(size=(2, 3, 8, 8))
    wq = rng.normal(size=(2, 3, 3, 3))
    add("adaptive_avg_pool2d", lambda t, n: ag.sum_all(ag.mul(ag.adaptive_avg_pool2d(n["x"], 3), wq)), {"x": q})
    add("concat", lambda t, n: ag.sum_all(ag.mul(ag.concat([n["a"], n["b"]], 1), np.arange(12.0).reshape(2, 6))),
        {"a": rng.normal(size=(2, 2)), "b": rng.normal(size=(2, 4))})
    add("weighted_add", lambda t, n: ag.sum_all(ag.mul(ag.weighted_add(n["a"], n["alpha"], n["e"]), w)),
        {"a": rng.normal(size=w.shape), "alpha": np.array(0.3), "e": rng.normal(size=w.shape)})
    lg = rng.normal(size=(6, 4))
    add("softmax_cross_entropy", lambda t, n: ag.softmax_cross_entropy(n["z"], tgt), {"z": lg})

    dims = pj.preset(preset)
    vocab = toy.Vocab.default()
    samples = toy.gen_synthetic_dataset(2, dims, seed)
    lm = toy.ToyLMParams.init(len(vocab), dims.D_llm, seed)
    for kind in pj.Variant:
        for seg in (False, True) if kind is pj.Variant.CONCATENATION else (False,):
            v = pj.FusionVariant(kind, 0.5, seg)
            params = pj.init_params(dims, v, seed)
            all_p = {**params.tensors, **lm.tensors()}

            def fn(tape, nodes, v=v):
                pn = {k: nodes[k] for k in params.tensors}
                ln = {k: nodes[k] for k in lm.tensors()}
                return toy.batch_loss(tape, pn, ln, v, samples, vocab)

            add(f"end-to-end {_variant_tag(v)}", fn, all_p, max_entries=max_entries, seed=seed)
    return reports


def cmd_grad_check(args):
    t0 = time.perf_counter()
    reports = grad_check_suite(args.preset, args.max_entries, args.seed or 0)
    bad = 0
    for name, rep in reports:
        bad += not rep.passed
        print(f"{'PASS' if rep.passed else 'FAIL'} {name:<36} max rel err {rep.max_error:.2e} ({rep.n_checked} entries)")
    print(f"{len(reports) - bad}/{len(reports)} passed in {time.perf_counter() - t0:.1f} s")
    if bad:
        raise ValidationFailure(f"{bad} gradient checks failed")
    return reports


# ---------------------------------------------------------------- parser


def _global_flags(suppress):
    # subcommands repeat the global flags; SUPPRESS keeps them from resetting
    # values already given before the subcommand name
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", default=d(None), help="JSON configuration file")
    common.add_argument("--seed", type=int, default=d(None), help="unsigned 64-bit seed")
    common.add_argument("--out", metavar="DIR", default=d(None), help="output directory")
    common.add_argument("--preset", choices=("desk", "paper"), default=d("desk"))
    common.add_argument("-v", "--verbose", action="store_true", default=d(False))
    return common


def build_parser():
    common = _global_flags(suppress=True)
    ap = argparse.ArgumentParser(
        prog="segfusion", description=__doc__.splitlines()[0], parents=[_global_flags(suppress=False)]
    )
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="two-stage training on synthetic data")
    p.set_defaults(func=cmd_train, out_default="runs/train")

    p = sub.add_parser("eval", parents=[common], help="metrics for a checkpoint or a pairs file")
    p.add_argument("--checkpoint")
    p.add_argument("--data", help="dataset directory written by train")
    p.add_argument("--pairs", help="JSONL of {id, candidate, reference}")
    p.add_argument("--shuffle-seed", type=int, default=None)
    p.add_argument("--temperature", type=float, default=0.2)
    p.add_argument("--max-new-tokens", type=int, default=48)
    p.add_argument("--greedy", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate-shuffle", parents=[common], help="sorted vs shuffled segmentation maps")
    p.add_argument("--checkpoint", action="append", required=True, help="repeat once per seed")
    p.add_argument("--data", required=True)
    p.add_argument("--shuffle-seed", type=int, default=0)
    p.add_argument("--max-new-tokens", type=int, default=48)
    p.set_defaults(func=cmd_ablate_shuffle)

    p = sub.add_parser("convert-vqa", parents=[common], help="reports JSONL -> single-turn chats JSONL")
    p.add_argument("input")
    p.add_argument("output")
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("stats", parents=[common], help="Welch tests from a groups/comparisons JSON")
    p.add_argument("json")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("ground", parents=[common], help="report vs segmentation agreement")
    p.add_argument("--report")
    p.add_argument("--report-file")
    p.add_argument("--segstack")
    p.add_argument("--mapping", help="JSON {finding: [class indices]}")
    p.add_argument("--min-area", type=float, default=0.001)
    p.add_argument("--examples", action="store_true", help="run the built-in example cases")
    p.set_defaults(func=cmd_ground_cli)

    p = sub.add_parser("demo-fusion", parents=[common], help="forward every fusion variant once")
    p.set_defaults(func=cmd_demo_fusion)

    p = sub.add_parser("grad-check", parents=[common], help="finite-difference gradient checks")
    p.add_argument("--max-entries", type=int, default=6)
    p.set_defaults(func=cmd_grad_check)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.out is None:
        args.out = getattr(args, "out_default", None)
    if args.seed is not None and not 0 <= args.seed < 2**64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_INVALID
    try:
        args.func(args)
    except OSError as e:
        where = f": {e.filename}" if getattr(e, "filename", None) else ""
        print(f"I/O error{where}: {e.strerror or e}", file=sys.stderr)
        return EXIT_IO
    except (ValidationFailure, FormatError, pj.ConfigError, stats.DegenerateTestError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
