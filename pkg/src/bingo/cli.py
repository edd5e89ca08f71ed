"""Command-line driver: ``bingo <command> ...``.

Exit codes: 0 success, 2 finished with per-function warnings, 1 fatal error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor

from bingo.asm import ParseError
from bingo.flowgraphs import SliceConfig, cpg_to_dot
from bingo.gnn import TrainConfig
from bingo.patchdiff import DatasetManifest, Label, dumps_twin, load_twin

log = logging.getLogger("bingo")

EXIT_OK, EXIT_FATAL, EXIT_WARN = 0, 1, 2


def _read(path: str) -> str:
    with open(path, encoding="utf-8") as fh:
        return fh.read()


def _write(path: str, text: str) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


def _dump_json(obj, path: str) -> None:
    _write(path, json.dumps(obj, indent=1) + "\n")


def _slice_config(args) -> SliceConfig:
    return SliceConfig(stride_n=args.slice_stride, time_limit_seconds=args.time_limit_s)


def _train_config(args) -> TrainConfig:
    return TrainConfig(batch_size=args.batch, lr=args.lr, max_epochs=args.epochs, seed=args.seed)


def _load_manifest(args) -> DatasetManifest:
    m = DatasetManifest.load(args.manifest)
    if getattr(args, "split", None) is not None:
        m = DatasetManifest(m.entries, args.split, m.seed, m.root)
    if getattr(args, "split_seed", None) is not None:
        m = DatasetManifest(m.entries, m.split_ratio, args.split_seed, m.root)
    return m


# ---------------------------------------------------------------- extract


def _extract_one(job: dict) -> dict:
    """Runs in a worker process; returns plain data only."""
    from bingo.asm import Side, parse_program
    from bingo.pipeline import extract

    try:
        pre_text, post_text = _read(job["pre"]), _read(job["post"])
    except OSError as exc:
        return {"pair": job["pair"], "fatal": str(exc)}
    changed = None
    if job["changed"] is not None:
        try:
            obj = json.loads(_read(job["changed"]))
            changed = (obj.get("pre", []), obj.get("post", []))
        except (OSError, ValueError, AttributeError) as exc:
            return {"pair": job["pair"], "fatal": f"{job['changed']}: {exc}"}
    label = Label(job["label"]) if job["label"] else None
    programs = []
    for path, text, side in ((job["pre"], pre_text, Side.PRE_PATCH), (job["post"], post_text, Side.POST_PATCH)):
        try:
            programs.append(parse_program(text, job["commit"], side))
        except ParseError as exc:
            return {"pair": job["pair"], "fatal": f"{path}: ParseError: {exc}"}
    try:
        twins, warnings, _ = extract(programs[0], programs[1], changed, SliceConfig(**job["slice"]),
                                     label, job["commit"], job["internal_only"])
    except ValueError as exc:
        return {"pair": job["pair"], "fatal": f"{type(exc).__name__}: {exc}"}
    out = []
    for t in twins:
        path = os.path.join(job["out"], f"{job['stem']}{t.function}.twin.json")
        _write(path, dumps_twin(t))
        out.append(path)
    return {"pair": job["pair"], "written": out, "warnings": [list(w) for w in warnings]}


def cmd_extract(args) -> int:
    pres, posts = args.pre, args.post
    if len(pres) != len(posts):
        print("error: --pre and --post must be given the same number of times", file=sys.stderr)
        return EXIT_FATAL
    if args.changed is not None and len(args.changed) != len(pres):
        print("error: give one --changed file per input pair", file=sys.stderr)
        return EXIT_FATAL
    if args.changed is None and not args.diff:
        print("error: either --changed or --diff is required", file=sys.stderr)
        return EXIT_FATAL
    jobs = []
    for i, (pre, post) in enumerate(zip(pres, posts)):
        stem = "" if len(pres) == 1 else f"pair{i:04d}__"
        jobs.append({
            "pair": i, "pre": pre, "post": post, "stem": stem, "out": args.out,
            "changed": None if args.changed is None else args.changed[i],
            "slice": {"stride_n": args.slice_stride, "time_limit_seconds": args.time_limit_s},
            "label": args.label, "commit": args.commit_id or os.path.basename(pre),
            "internal_only": args.internal_only,
        })
    if args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            results = list(pool.map(_extract_one, jobs))
    else:
        results = [_extract_one(j) for j in jobs]
    code = EXIT_OK
    for r in results:
        if "fatal" in r:
            print(f"error: {r['fatal']}", file=sys.stderr)
            code = EXIT_FATAL
            continue
        for fn, msg in r["warnings"]:
            print(f"warning: pair {r['pair']}: {fn}: {msg}", file=sys.stderr)
            if fn != "*" and code == EXIT_OK:
                code = EXIT_WARN
        for path in r["written"]:
            print(path)
    return code


# ---------------------------------------------------------------- synth / train / eval


def cmd_synth(args) -> int:
    from bingo.synthetic import write_dataset

    m = write_dataset(args.out, args.count, args.seed, args.split, _slice_config(args))
    print(os.path.join(args.out, "manifest.json"))
    log.info("wrote %d synthetic twin graphs", len(m.entries))
    return EXIT_OK


def cmd_train(args) -> int:
    from bingo.pipeline import run_training

    manifest = _load_manifest(args)

    def progress(rec):
        test = rec.get("test", {}).get("accuracy")
        print(f"epoch {rec['epoch']:3d}  loss {rec['train_loss']:.4f}"
              + ("" if test is None else f"  test_acc {test:.4f}"), file=sys.stderr)

    history = run_training(manifest, _train_config(args), args.embedder, args.out,
                           None if args.quiet else progress)
    final = history["final"]["test"]
    print(f"test accuracy={final['accuracy']} f1={final['f1']} fnr={final['fnr']} fpr={final['fpr']}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from bingo.pipeline import run_eval

    metrics = run_eval(args.checkpoint, _load_manifest(args), args.subset)
    text = json.dumps(metrics, indent=1) + "\n"
    if args.out:
        _write(args.out, text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_export_dot(args) -> int:
    twin = load_twin(args.twin)
    out = args.out or os.path.dirname(os.path.abspath(args.twin))
    for side, graph in (("pre", twin.pre_graph), ("post", twin.post_graph)):
        path = os.path.join(out, f"{side}.dot")
        _write(path, cpg_to_dot(graph, f"{twin.function}_{side}"))
        print(path)
    return EXIT_OK


def cmd_report(args) -> int:
    from bingo.plotting import render_report

    with open(args.history, encoding="utf-8") as fh:
        history = json.load(fh)
    out = args.out or os.path.dirname(os.path.abspath(args.history))
    for path in render_report(history, out):
        print(path)
    return EXIT_OK


def cmd_pretrain(args) -> int:
    from bingo.asm import parse_program
    from bingo.embedding import Vocabulary
    from bingo.embedding.encoder import BlockEncoder, EncoderConfig, pretrain, save_encoder

    blocks = []
    for path in args.asm:
        prog = parse_program(_read(path))
        for fn in prog.functions:
            for b in fn.blocks:
                blocks.append([[t.text for t in ins] for ins in b.token_lists])
    if not blocks:
        print("error: no basic blocks in the given files", file=sys.stderr)
        return EXIT_FATAL
    vocab = Vocabulary.build(ins for b in blocks for ins in b)
    cfg = EncoderConfig(vocab_size=len(vocab), layers=args.layers, heads=args.heads,
                        embed_dim=args.dim, max_seq=args.max_seq)
    import torch

    torch.manual_seed(args.seed)
    model = BlockEncoder(cfg)
    losses = pretrain(model, vocab, blocks, args.steps, args.seed, args.batch_size, args.lr)
    save_encoder(args.out, model, vocab)
    if losses:
        print(f"steps={len(losses)} first_loss={losses[0]:.4f} last_loss={losses[-1]:.4f}", file=sys.stderr)
    print(args.out)
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _slice_flags(p):
    p.add_argument("--slice-stride", type=int, default=2, help="slicing hops (default 2)")
    p.add_argument("--time-limit-s", type=float, default=900, help="slicing time limit in seconds (default 900)")


def _train_flags(p):
    p.add_argument("--embedder", default="hashed", help="hashed | encoder:PATH")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", type=float, default=None, help="train fraction (overrides the manifest; default 0.8)")
    p.add_argument("--split-seed", type=int, default=None, help="shuffle seed for the split (overrides the manifest)")
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch", type=int, default=128)
    p.add_argument("--lr", type=float, default=0.001)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bingo", description="Binary security-patch detection pipeline.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="assembly pair -> twin graph JSON per affected function")
    p.add_argument("--pre", action="append", required=True, help="pre-patch ASM-TEXT (repeatable)")
    p.add_argument("--post", action="append", required=True, help="post-patch ASM-TEXT (repeatable)")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--changed", action="append", help='JSON {"pre": [lines], "post": [lines]} (repeatable)')
    g.add_argument("--diff", action="store_true", help="locate patch blocks by fingerprint diff")
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("--label", choices=[lbl.value for lbl in Label])
    p.add_argument("--commit-id", default="")
    p.add_argument("--internal-only", action="store_true", help="keep only patch nodes and their CFG edges")
    p.add_argument("-j", "--jobs", type=int, default=1, help="worker processes across input pairs")
    _slice_flags(p)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("synth", help="write a synthetic labeled twin-graph dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=400)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--split", type=float, default=0.8)
    _slice_flags(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the siamese classifier on a manifest")
    p.add_argument("manifest")
    p.add_argument("--out", default=".", help="directory for checkpoint.bin and history.json")
    p.add_argument("-q", "--quiet", action="store_true")
    _train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="metrics of a checkpoint on a manifest")
    p.add_argument("checkpoint")
    p.add_argument("manifest")
    p.add_argument("--subset", choices=("all", "train", "test"), default="all")
    p.add_argument("--split", type=float, default=None)
    p.add_argument("--split-seed", type=int, default=None)
    p.add_argument("--out", help="write metrics.json here as well")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-dot", help="twin graph JSON -> pre.dot and post.dot")
    p.add_argument("twin")
    p.add_argument("--out", help="output directory (default: next to the input)")
    p.set_defaults(func=cmd_export_dot)

    p = sub.add_parser("report", help="history.json -> history.csv, loss.png, metrics.png")
    p.add_argument("history")
    p.add_argument("--out", help="output directory (default: next to the input)")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("pretrain", help="pretrain the block encoder on ASM-TEXT files")
    p.add_argument("asm", nargs="+")
    p.add_argument("--out", required=True, help="encoder checkpoint path")
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--dim", type=int, default=128)
    p.add_argument("--max-seq", type=int, default=64)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_pretrain)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ParseError as exc:
        print(f"error: ParseError: {exc}", file=sys.stderr)
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
    return EXIT_FATAL


if __name__ == "__main__":
    sys.exit(main())
