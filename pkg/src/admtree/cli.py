"""Command-line surface: train, compress, generate, inspect, and the
property and positional-bias probes.

Exit codes: 0 success, 1 usage error, 2 data/IO error, 3 property-suite
failure. Every command logs its fully resolved configuration to stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .autodiff import Tape, Tensor, backward, finite_difference_grad, no_grad
from .checkpoint import FormatError
from .compressor import (CompressConfig, achieved_ratio, compress_document,
                         context_attention_scores, generate, load_session,
                         save_session)
from .model import (TEXT, BackboneConfig, NodeContext, ParameterSet,
                    causal_layout, encode_window)
from .training import (TrainConfig, gist_loss, load_corpus,
                       make_needle_corpus, make_repetition_corpus,
                       train_backbone, train_gist)
from .tree import SemanticTree, build_batch

PROBE_DEPTHS = (0.0, 0.25, 0.5, 0.75, 1.0)

CONFIG_KEYS = {
    # backbone
    "d_model", "n_layers", "n_heads", "vocab_size", "max_window", "d_agg",
    "leaf_ctx", "rope_base", "norm_eps", "ffn_mult",
    # training
    "phase", "lr", "steps", "batch_size", "seed", "corpus",
    "beta1", "beta2", "eps",
    # compression
    "tau", "segment_len", "lambda_ent", "keep_fraction",
    # probes
    "probe_count", "probe_haystack", "probe_max_new",
}

DEFAULTS = {
    "d_model": 64, "n_layers": 2, "n_heads": 4, "vocab_size": 257,
    "max_window": 128, "d_agg": 16, "leaf_ctx": "projected",
    "rope_base": 10000.0, "norm_eps": 1e-6, "ffn_mult": 4,
    "phase": "gist", "lr": 3e-4, "steps": 100, "batch_size": 8, "seed": 0,
    "corpus": None, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8,
    "tau": 4.0, "segment_len": 128, "lambda_ent": 0.1, "keep_fraction": None,
    "probe_count": 4, "probe_haystack": 256, "probe_max_new": 12,
}


class UsageError(Exception):
    pass


class ProbeFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def resolve_config(path: str | None, overrides: dict) -> dict:
    """File values under CLI overrides under defaults; unknown keys rejected."""
    cfg = dict(DEFAULTS)
    if path:
        p = Path(path)
        if not p.exists():
            raise OSError(f"config file not found: {path}")
        loaded = json.loads(p.read_text(encoding="utf-8"))
        unknown = set(loaded) - CONFIG_KEYS
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(loaded)
    for key, val in overrides.items():
        if val is not None:
            cfg[key] = val
    return cfg


def _log_config(cfg: dict, out_dir: str | None = None) -> None:
    line = json.dumps(cfg, sort_keys=True, default=str)
    print(f"resolved config: {line}", file=sys.stderr)
    if out_dir:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "resolved_config.json").write_text(line, encoding="utf-8")


def _backbone_config(cfg: dict) -> BackboneConfig:
    return BackboneConfig(
        d_model=int(cfg["d_model"]), n_layers=int(cfg["n_layers"]),
        n_heads=int(cfg["n_heads"]), vocab_size=int(cfg["vocab_size"]),
        max_window=int(cfg["max_window"]), d_agg=int(cfg["d_agg"]),
        leaf_ctx=cfg["leaf_ctx"], rope_base=float(cfg["rope_base"]),
        norm_eps=float(cfg["norm_eps"]), ffn_mult=int(cfg["ffn_mult"]))


def _train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(
        phase=cfg["phase"], lr=float(cfg["lr"]), steps=int(cfg["steps"]),
        batch_size=int(cfg["batch_size"]), seed=int(cfg["seed"]),
        corpus=cfg["corpus"], tau=float(cfg["tau"]),
        segment_len=int(cfg["segment_len"]), lambda_ent=float(cfg["lambda_ent"]),
        beta1=float(cfg["beta1"]), beta2=float(cfg["beta2"]), eps=float(cfg["eps"]))


def _compress_config(cfg: dict) -> CompressConfig:
    kf = cfg["keep_fraction"]
    return CompressConfig(
        lambda_ent=float(cfg["lambda_ent"]), tau=float(cfg["tau"]),
        segment_len=int(cfg["segment_len"]),
        keep_fraction=None if kf is None else float(kf))


def _resolve_corpus(spec: str | None):
    """A file path, or an inline synthetic spec like
    'repetition:count=64,prefix=256,seed=0'."""
    if spec is None:
        raise UsageError("a corpus is required (config key or --corpus)")
    if isinstance(spec, str) and spec.startswith("repetition:"):
        kv = dict(part.split("=") for part in spec[len("repetition:"):].split(","))
        return make_repetition_corpus(int(kv.get("count", 64)),
                                      int(kv.get("prefix", 256)),
                                      int(kv.get("seed", 0)))
    return load_corpus(spec)


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    cfg = resolve_config(args.config, {
        "phase": args.phase, "seed": args.seed, "corpus": args.corpus,
        "tau": args.tau, "segment_len": args.segment_len,
        "lambda_ent": args.lambda_ent, "steps": args.steps, "lr": args.lr,
    })
    _log_config(cfg, args.out)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_cfg = _train_config(cfg)
    corpus = _resolve_corpus(train_cfg.corpus)
    if train_cfg.phase == "backbone":
        model = ParameterSet.init(_backbone_config(cfg), seed=train_cfg.seed)
        train_backbone(model, train_cfg, corpus, report_path=out / "report.jsonl")
        model.save(out / "backbone.ckpt", include_trainable=False)
        print(json.dumps({"checkpoint": str(out / "backbone.ckpt"),
                          "steps": train_cfg.steps}))
    else:
        if not args.checkpoint:
            raise UsageError("gist training requires --checkpoint with a backbone model")
        model = ParameterSet.load(args.checkpoint, seed=train_cfg.seed)
        train_gist(model, train_cfg, corpus, report_path=out / "report.jsonl")
        model.save(out / "gist.ckpt")
        print(json.dumps({"checkpoint": str(out / "gist.ckpt"),
                          "steps": train_cfg.steps}))
    return 0


def cmd_compress(args) -> int:
    cfg = resolve_config(args.config, {
        "tau": args.tau, "segment_len": args.segment_len,
        "lambda_ent": args.lambda_ent, "seed": args.seed,
    })
    if float(cfg["tau"]) < 1:
        raise UsageError(f"compression ratio must be >= 1, got {cfg['tau']}")
    _log_config(cfg)
    model = ParameterSet.load(args.checkpoint)
    tokens = np.frombuffer(Path(args.input).read_bytes(), dtype=np.uint8).astype(np.int64)
    if tokens.size == 0:
        raise OSError(f"input document is empty: {args.input}")
    session = compress_document(tokens, model, _compress_config(cfg))
    save_session(session, args.out)
    print(json.dumps({"tokens": int(tokens.size),
                      "leaves": session.tree.leaf_count,
                      "nodes": session.tree.node_count,
                      "achieved_ratio": achieved_ratio(session)}))
    return 0


def cmd_generate(args) -> int:
    cfg = resolve_config(args.config, {"keep_fraction": args.keep_fraction,
                                       "seed": args.seed})
    _log_config(cfg)
    model = ParameterSet.load(args.checkpoint)
    session = load_session(args.session, model)
    if args.prompt_hex:
        prompt = list(bytes.fromhex(args.prompt_hex))
    else:
        prompt = list(args.prompt.encode("utf-8"))
    if not prompt:
        raise UsageError("an empty prompt cannot seed generation")
    kf = cfg["keep_fraction"]
    out = generate(session, prompt, args.max_new, model,
                   keep_fraction=None if kf is None else float(kf))
    print(json.dumps({"tokens": out,
                      "text": bytes(out).decode("utf-8", errors="replace")}))
    return 0


def cmd_inspect(args) -> int:
    model = None
    if args.checkpoint:
        model = ParameterSet.load(args.checkpoint)
    if model is None:
        if args.attention:
            raise UsageError("--attention needs --checkpoint to run the probe forward")
        # tree/plan inspection only needs the stored structure; borrow a
        # minimal model so the session can be instantiated
        model = _session_probe_model(args.session)
    session = load_session(args.session, model)
    report: dict = {}
    wants_all = not (args.tree or args.plan or args.attention)
    if args.plan or wants_all:
        report["plan"] = [t.plan.to_dict() for t in session.turns]
    if args.tree or wants_all:
        report["tree"] = session.tree.to_dict()
    if args.attention:
        nodes = session.tree.flatten()
        probe = session.turns[-1].tokens[-min(8, session.turns[-1].tokens.size):]
        scores = context_attention_scores(model, nodes, probe)
        report["attention"] = {str(n.id): float(s) for n, s in zip(nodes, scores)}
    print(json.dumps(report))
    return 0


def _session_probe_model(session_path) -> ParameterSet:
    """Smallest model whose width matches the stored node vectors."""
    from . import checkpoint as ckpt_mod
    import struct
    raw = Path(session_path).read_bytes()
    if len(raw) < 16 or raw[:4] != ckpt_mod.MAGIC_SESSION:
        raise FormatError(f"bad session magic {raw[:4]!r}", 0)
    _, json_len = struct.unpack_from("<IQ", raw, 4)
    tensors = ckpt_mod.unpack_tensors(raw[16 + json_len:])
    widths = {arr.shape[1] for name, arr in tensors.items() if name.startswith("node/")}
    d = widths.pop() if widths else 8
    heads = 2 if d % 2 == 0 else 1
    return ParameterSet.init(BackboneConfig(d_model=d, n_layers=1, n_heads=heads,
                                            d_agg=max(2, d // 8)), seed=0)


def cmd_probe_position(args) -> int:
    cfg = resolve_config(args.config, {"seed": args.seed, "tau": args.tau,
                                       "segment_len": args.segment_len})
    _log_config(cfg, args.out)
    model = ParameterSet.load(args.checkpoint)
    depths = ([float(d) for d in args.depths.split(",")]
              if args.depths else list(PROBE_DEPTHS))
    samples = make_needle_corpus(int(cfg["probe_count"]), int(cfg["probe_haystack"]),
                                 depths, int(cfg["seed"]))
    ccfg = _compress_config(cfg)
    max_new = int(cfg["probe_max_new"])

    def run_one(sample):
        session = compress_document(sample.doc, model, ccfg)
        out = generate(session, sample.query, max_new, model)
        got = np.asarray(out[:sample.value.size])
        return sample.depth, bool(np.array_equal(got, sample.value))

    workers = max(1, int(os.environ.get("ADMTREE_THREADS", "1")))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_one, samples))
    else:
        results = [run_one(s) for s in samples]

    acc: dict[float, list[bool]] = {d: [] for d in depths}
    for depth, hit in results:
        acc[depth].append(hit)
    rows = [{"depth": d, "accuracy": float(np.mean(acc[d])), "n": len(acc[d])}
            for d in depths]
    spread = max(r["accuracy"] for r in rows) - min(r["accuracy"] for r in rows)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "depths.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["depth", "accuracy", "n"])
        writer.writeheader()
        writer.writerows(rows)
    report = {"rows": rows, "spread": spread}
    (out_dir / "report.json").write_text(json.dumps(report), encoding="utf-8")
    print(json.dumps(report))
    return 0


# ---------------------------------------------------------------------------
# property probe


def _probe_model(seed: int = 0) -> ParameterSet:
    return ParameterSet.init(BackboneConfig(d_model=16, n_layers=2, n_heads=2,
                                            max_window=32, d_agg=4), seed=seed)


def _check_tree_identity(rng, fault) -> None:
    model = _probe_model()
    for m in (1, 2, 3, 5, 8, 13, 21, 33, 64):
        leaves = [Tensor(rng.normal(size=(1, 16))) for _ in range(m)]
        tree = build_batch(leaves, model.aggregator)
        if tree.node_count != 2 * m - 1 or tree.internal_count() != m - 1:
            raise ProbeFailure(f"node-count identity failed for {m} leaves")


def _check_incremental_matches_batch(rng, fault) -> None:
    model = _probe_model(seed=3)
    agg = model.aggregator
    with no_grad():
        for m in (1, 2, 3, 5, 6, 7, 12, 16):
            leaves = [Tensor(rng.normal(size=(1, 16))) for _ in range(m)]
            inc = SemanticTree(agg)
            for leaf in leaves:
                inc.append_leaf(Tensor(leaf.data))
            inc.seal()
            bat = build_batch(leaves, agg)
            inc_f = inc.flatten()
            bat_f = bat.flatten()
            if len(inc_f) != len(bat_f):
                raise ProbeFailure(f"size mismatch at {m} leaves")
            for a, b in zip(inc_f, bat_f):
                if a.span != b.span or a.height != b.height or \
                        a.hidden.data.tobytes() != b.hidden.data.tobytes():
                    raise ProbeFailure(f"incremental/batch divergence at {m} leaves")


def _check_causality(rng, fault) -> None:
    model = _probe_model(seed=5)
    ctx = [NodeContext(i, Tensor(rng.normal(size=(1, 16))), position=i)
           for i in range(3)]
    ids = list(rng.integers(0, 256, size=10))
    layout = causal_layout(ids, [TEXT] * 10, n_context=3)
    if fault == "flip-mask":
        layout.allow[2, 3 + 7] = True    # let query 2 peek at future key 7
    with no_grad():
        h1, _ = encode_window(model, layout, ctx, _validate=fault != "flip-mask")
        ids2 = list(ids)
        ids2[7] = (ids2[7] + 1) % 256
        layout2 = causal_layout(ids2, [TEXT] * 10, n_context=3)
        if fault == "flip-mask":
            layout2.allow[2, 3 + 7] = True
        h2, _ = encode_window(model, layout2, ctx, _validate=fault != "flip-mask")
    if h1.data[:7].tobytes() != h2.data[:7].tobytes():
        raise ProbeFailure("outputs before a perturbed future token changed")


def _check_ratio(rng, fault) -> None:
    model = ParameterSet.init(BackboneConfig(d_model=16, n_layers=1, n_heads=2,
                                             max_window=512, d_agg=4), seed=7)
    cfg = CompressConfig(tau=4.0, segment_len=128)
    for _ in range(3):
        tokens = rng.integers(0, 256, size=int(rng.integers(1024, 2048)))
        session = compress_document(tokens, model, cfg)
        ratio = achieved_ratio(session)
        if not 3.5 <= ratio <= 4.5:
            raise ProbeFailure(f"achieved ratio {ratio:.3f} outside [3.5, 4.5]")


def _check_gradients(rng, fault) -> None:
    model = _probe_model(seed=11)
    tokens = rng.integers(0, 256, size=48)
    cfg = CompressConfig(tau=2.0, segment_len=16)
    with Tape():
        loss = gist_loss(model, tokens, cfg)
        backward(loss)
    for name in ("l0.wq_gt", "agg.wv", "gt_emb", "l1.wk_node"):
        p = model.trainable[name]
        flat = np.argsort(-np.abs(p.grad.reshape(-1)))[:3]
        for fi in flat:
            idx = np.unravel_index(fi, p.data.shape)

            def f(t, _p=p, _idx=idx):
                orig = _p.data[_idx]
                _p.data[_idx] = t.item()
                try:
                    return gist_loss(model, tokens, cfg)
                finally:
                    _p.data[_idx] = orig

            fd = finite_difference_grad(f, Tensor([p.data[idx]]), 1e-5).item()
            an = p.grad[idx]
            if abs(an - fd) > 1e-4 * max(1.0, abs(fd)):
                raise ProbeFailure(f"gradient mismatch on {name}{idx}: {an} vs {fd}")
    model.zero_grads()


def cmd_probe_properties(args) -> int:
    rng = np.random.default_rng(args.seed or 0)
    checks = [
        ("semtree", "node-count identity", _check_tree_identity),
        ("semtree", "incremental equals batch", _check_incremental_matches_batch),
        ("backbone", "causality under perturbation", _check_causality),
        ("compressor", "ratio accounting", _check_ratio),
        ("numeric-core", "gradient finite-difference", _check_gradients),
    ]
    results = []
    failed = False
    for module, name, fn in checks:
        try:
            fn(rng, args.fault)
            results.append({"module": module, "invariant": name, "status": "pass"})
        except Exception as exc:                 # report, never crash the suite
            failed = True
            results.append({"module": module, "invariant": name,
                            "status": "fail", "detail": str(exc)})
    report = {"fault": args.fault, "invariants": results}
    print(json.dumps(report))
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(json.dumps(report), encoding="utf-8")
    return 3 if failed else 0


# ---------------------------------------------------------------------------
# wiring


def build_parser() -> _Parser:
    parser = _Parser(prog="admtree", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config")
        p.add_argument("--seed", type=int)

    p = sub.add_parser("train", help="run backbone or gist training")
    common(p)
    p.add_argument("--phase", choices=["backbone", "gist"])
    p.add_argument("--corpus")
    p.add_argument("--checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--segment-len", dest="segment_len", type=int)
    p.add_argument("--lambda-ent", dest="lambda_ent", type=float)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("compress", help="compress one document into a session file")
    common(p)
    p.add_argument("--input", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--tau", type=float)
    p.add_argument("--segment-len", dest="segment_len", type=int)
    p.add_argument("--lambda-ent", dest="lambda_ent", type=float)
    p.set_defaults(fn=cmd_compress)

    p = sub.add_parser("generate", help="greedy decoding conditioned on a session")
    common(p)
    p.add_argument("--session", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--prompt", default="")
    p.add_argument("--prompt-hex", dest="prompt_hex")
    p.add_argument("--max-new", dest="max_new", type=int, default=32)
    p.add_argument("--keep-fraction", dest="keep_fraction", type=float)
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("inspect", help="dump plan, tree or attention scores")
    common(p)
    p.add_argument("--session", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--tree", action="store_true")
    p.add_argument("--plan", action="store_true")
    p.add_argument("--attention", action="store_true")
    p.set_defaults(fn=cmd_inspect)

    p = sub.add_parser("probe-position", help="needle recovery accuracy per depth")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--depths")
    p.add_argument("--tau", type=float)
    p.add_argument("--segment-len", dest="segment_len", type=int)
    p.set_defaults(fn=cmd_probe_position)

    p = sub.add_parser("probe-properties", help="run the cross-module invariant suite")
    common(p)
    p.add_argument("--out")
    p.add_argument("--fault", choices=["flip-mask"])
    p.set_defaults(fn=cmd_probe_properties)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (OSError, FormatError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
