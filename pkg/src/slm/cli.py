"""Command line front end: preprocess, train, ppl, em, inspect.

Every subcommand accepts ``--config FILE`` with ``key = value`` lines whose
keys are the long option names; flags given on the command line win.

Exit codes: 0 success, 1 usage error, 2 data error, 3 internal error.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import math
import os
import sys
import tempfile
from contextlib import contextmanager
from pathlib import Path

from . import __version__
from .decoder import ConfigError, DecoderConfig, SearchError, perplexity
from .em import EMConfig, train_em
from .estimation import SLM, Trigram, split_heldout, train_trigram
from .transform import (SCHEMES, BinarizationRules, DerivationError, HeadRules, binarize, display,
                        enrich, nt_labels, op_vocabulary, percolate, transform_tree,
                        tree_to_derivation)
from .treebank import (TreebankError, Tree, Vocabulary, build_label_vocab, build_vocab,
                       read_treebank, read_treebank_files, write_treebank)

log = logging.getLogger("slm")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3

# published UPenn perplexities (scheme, EM iteration) -> {lambda: PPL}
REFERENCE_PPL = {
    ("baseline", 0): {0.0: 167.38, 0.6: 151.89, 1.0: 166.63},
    ("baseline", 3): {0.0: 158.75, 0.6: 148.67, 1.0: 166.63},
    ("opposite", 0): {0.0: 157.61, 0.6: 146.99, 1.0: 166.63},
    ("opposite", 3): {0.0: 150.83, 0.6: 144.08, 1.0: 166.63},
    ("same", 0): {0.0: 163.31, 0.6: 149.56, 1.0: 166.63},
    ("same", 3): {0.0: 155.29, 0.6: 146.39, 1.0: 166.63},
    ("both", 0): {0.0: 160.48, 0.6: 147.52, 1.0: 166.63},
    ("both", 3): {0.0: 153.30, 0.6: 144.99, 1.0: 166.63},
}
# published UPenn NT-label / constructor-op vocabulary sizes
REFERENCE_SIZES = {"baseline": (52, 157), "opposite": (954, 2863), "same": (712, 2137),
                   "both": (3816, 11449)}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


@contextmanager
def atomic_open(path, mode="w"):
    """Write to a temporary file next to `path` and rename on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, mode, encoding="utf-8", newline="") as f:
            yield f
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def read_config(path) -> dict[str, str]:
    out = {}
    with open(path, encoding="utf-8") as f:
        for n, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{n}: expected key = value")
            k, v = line.split("=", 1)
            out[k.strip().replace("-", "_")] = v.strip()
    return out


def _split_list(value) -> list[str]:
    if value is None:
        return []
    if isinstance(value, list):
        return value
    return [x for x in value.replace(",", " ").split() if x]


def _floats(value) -> list[float]:
    return [float(x) for x in _split_list(value)]


def _beam(value) -> float:
    v = str(value).lower()
    return math.inf if v in ("inf", "none", "0") else int(v)


def _delta(value) -> float:
    v = str(value).lower()
    return math.inf if v in ("inf", "none") else float(v)


# --- shared pipeline pieces -------------------------------------------------

def _rules(args):
    return HeadRules.load(args.head_rules), BinarizationRules.load(args.bin_rules)


def _trees(paths, args, what: str) -> list[Tree]:
    for p in paths:
        if not Path(p).exists():
            raise FileNotFoundError(f"{what} file not found: {p}")
    stats = {}
    trees = read_treebank_files(paths, lowercase=not args.no_lowercase, stats=stats)
    if stats.get("skipped"):
        log.warning("%s: skipped %d empty trees", what, stats["skipped"])
    return trees


def _sentences(paths, words: Vocabulary, args) -> list[list[int]]:
    """Word-id sentences from treebank files or plain one-sentence-per-line
    text (files whose first non-blank character is not '(')."""
    out = []
    for p in paths:
        text = Path(p).read_text(encoding="utf-8")
        if text.lstrip().startswith("("):
            trees = read_treebank(text, lowercase=not args.no_lowercase)
            out.extend(words.ids(t.words()) for t in trees)
        else:
            for line in text.splitlines():
                toks = line.split()
                if toks:
                    if not args.no_lowercase:
                        toks = [t.lower() for t in toks]
                    out.append(words.ids(toks))
    return out


def _decoder_config(args) -> DecoderConfig:
    return DecoderConfig(beam=_beam(args.beam), delta=_delta(args.delta),
                         right_branching=args.right_branching)


def _config_header(args) -> str:
    keys = sorted(k for k in vars(args) if k not in ("func", "config"))
    lines = [f"# slm {__version__} {args.command}"]
    for k in keys:
        v = getattr(args, k)
        if isinstance(v, list):
            v = " ".join(map(str, v))
        lines.append(f"# {k} = {v}")
    return "\n".join(lines) + "\n"


def _load_slm(path) -> SLM:
    with open(path, encoding="utf-8") as f:
        return SLM.load(f)


def _load_trigram(path) -> Trigram:
    with open(path, encoding="utf-8") as f:
        return Trigram.load(f)


def _save(obj, path) -> None:
    with atomic_open(path) as f:
        obj.dump(f)


# --- subcommands ------------------------------------------------------------

def cmd_preprocess(args) -> int:
    hr, br = _rules(args)
    trees = _trees(args.input, args, "input")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with atomic_open(out / "trees.clean") as f:
        write_treebank(trees, f)
    rows = []
    for scheme in args.schemes:
        bins = [transform_tree(t, hr, br, scheme) for t in trees]
        with atomic_open(out / f"trees.{scheme}") as f:
            for b in bins:
                f.write(display(b) + "\n")
        nts = nt_labels(bins)
        with atomic_open(out / f"nts.{scheme}.vocab") as f:
            build_label_vocab(nts).write(f)
        rows.append((scheme, len(nts), len(op_vocabulary(nts))))
    words = build_vocab(trees, args.cap)
    with atomic_open(out / "words.vocab") as f:
        words.write(f)
    with atomic_open(out / "tags.vocab") as f:
        build_label_vocab(tag for t in trees for tag in t.tags()).write(f)
    report = io.StringIO()
    report.write(_config_header(args))
    report.write(f"# trees = {len(trees)}\n")
    report.write(f"# words = {len(words)}\n")
    report.write("scheme\tnt\tops\tref_nt\tref_ops\n")
    for scheme, n_nt, n_ops in rows:
        ref = REFERENCE_SIZES.get(scheme, ("", ""))
        report.write(f"{scheme}\t{n_nt}\t{n_ops}\t{ref[0]}\t{ref[1]}\n")
    with atomic_open(out / "sizes.txt") as f:
        f.write(report.getvalue())
    sys.stdout.write(report.getvalue())
    return EXIT_OK


def build_models(trees: list[Tree], heldout: list[Tree] | None, scheme: str, cap: int,
                 hr: HeadRules, br: BinarizationRules, heldout_every: int = 10):
    """Initialize the SLM and the trigram from gold trees. Without explicit
    held-out trees every `heldout_every`-th training tree is held out."""
    if heldout is None:
        trees, heldout = split_heldout(trees, heldout_every)
    words = build_vocab(trees, cap)
    bins = [transform_tree(t, hr, br, scheme) for t in trees]
    held_bins = [transform_tree(t, hr, br, scheme) for t in heldout]
    tags = {leaf.label for b in bins for leaf in b.leaves()}
    slm = SLM(words, tags, nt_labels(bins))
    slm.meta = {"scheme": scheme, "iteration": "0"}
    slm.accumulate(tree_to_derivation(b) for b in bins)
    slm.estimate_weights([tree_to_derivation(b) for b in held_bins])
    tri = train_trigram([words.ids(t.words()) for t in trees], words,
                        [words.ids(t.words()) for t in heldout])
    return slm, tri


def cmd_train(args) -> int:
    hr, br = _rules(args)
    trees = _trees(args.train, args, "train")
    heldout = _trees(args.heldout, args, "heldout") if args.heldout else None
    slm, tri = build_models(trees, heldout, args.scheme, args.cap, hr, br, args.heldout_every)
    out = Path(args.out)
    _save(slm, out / "slm.model")
    _save(tri, out / "trigram.model")
    with atomic_open(out / "words.vocab") as f:
        slm.words.write(f)
    print(f"wrote {out / 'slm.model'} ({len(slm.words)} words, {len(slm.tags)} tags, "
          f"{len(slm.nts)} NT labels, {len(slm.ops)} ops) and {out / 'trigram.model'}")
    return EXIT_OK


def format_report(report, scheme: str, iteration: int, header: str) -> str:
    out = io.StringIO()
    out.write(header)
    failures = report.failures
    if failures:
        out.write(f"# search failures (finished with trigram): {' '.join(map(str, failures))}\n")
    out.write("# ref = published UPenn perplexity for this scheme and iteration\n")
    out.write(f"{'model':<10} {'iter':>4} {'lambda':>6} {'tokens':>8} {'logprob':>14} {'PPL':>10} {'ref':>8}\n")
    ref = REFERENCE_PPL.get((scheme, iteration), {})
    for r in report.rows:
        rv = ref.get(r.lam)
        rs = f"{rv:8.2f}" if rv is not None else f"{'-':>8}"
        out.write(f"{scheme:<10} {iteration:>4} {r.lam:6.2f} {r.tokens:8d} {r.logprob:14.4f} {r.ppl:10.3f} {rs}\n")
    return out.getvalue()


def cmd_ppl(args) -> int:
    lambdas = _floats(args.lambdas)
    for lam in lambdas:
        if not 0.0 <= lam <= 1.0:
            raise UsageError(f"lambda {lam} outside [0, 1]")
    need_slm = any(lam < 1.0 for lam in lambdas)
    slm = _load_slm(args.slm_model) if need_slm else None
    tri = _load_trigram(args.trigram_model)
    words = slm.words if slm is not None else tri.words
    corpus = _sentences(args.test, words, args)
    report = perplexity(corpus, slm, tri, lambdas, _decoder_config(args), workers=args.workers)
    meta = slm.meta if slm is not None else {}
    scheme = meta.get("scheme") or args.scheme or "baseline"
    iteration = int(meta.get("iteration", 0))
    text = format_report(report, scheme, iteration, _config_header(args))
    sys.stdout.write(text)
    if args.report:
        with atomic_open(args.report) as f:
            f.write(text)
    if args.csv:
        with atomic_open(args.csv) as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["model", "iter", "lambda", "tokens", "logprob", "ppl"])
            for r in report.rows:
                w.writerow([scheme, iteration, r.lam, r.tokens, repr(r.logprob), repr(r.ppl)])
    return EXIT_OK


def cmd_em(args) -> int:
    slm = _load_slm(args.slm_model)
    corpus = _sentences(args.train, slm.words, args)
    if args.heldout:
        heldout = _sentences(args.heldout, slm.words, args)
    else:
        corpus, heldout = split_heldout(corpus, args.heldout_every)
    cfg = EMConfig(iterations=args.iterations,
                   nbest=None if args.nbest is None else _beam(args.nbest),
                   decoder=_decoder_config(args), refit_weights=args.refit_weights,
                   workers=args.workers)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    start = int(slm.meta.get("iteration", 0))

    def checkpoint(k, model, stats):
        model.meta = dict(slm.meta, iteration=str(start + k))
        _save(model, out / f"model.iter{start + k}")

    _, history = train_em(corpus, slm, cfg, heldout, checkpoint)
    with atomic_open(out / "em_log.csv") as f:
        f.write(_config_header(args))
        f.write(f"# weights = {'refit on held-out each iteration' if cfg.refit_weights else 'carried over from the initial model'}\n")
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["iter", "tokens", "lnL", "train_ppl"])
        for k, st in enumerate(history):
            w.writerow([start + k, st.tokens, repr(st.loglik), repr(st.ppl)])
    for k, st in enumerate(history):
        print(f"iter {start + k}: lnL = {st.loglik:.6f} tokens = {st.tokens} train PPL = {st.ppl:.3f}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    hr, br = _rules(args)
    if args.tree:
        trees = read_treebank(args.tree, lowercase=not args.no_lowercase)
    else:
        trees = _trees(args.input, args, "input")
    for t in trees:
        print(f"cleaned:   {t}")
        b = binarize(percolate(t, hr), br)
        print(f"binarized: {display(b)}")
        for scheme in args.schemes:
            e = transform_tree(t, hr, br, scheme)
            if scheme != "baseline":
                print(f"{scheme + ':':<10} {display(enrich(b, scheme))}")
            d = tree_to_derivation(e)
            print(f"derivation ({scheme}):")
            for s in d.steps:
                print(f"  {s.word}/{s.tag}: " + " ".join(map(str, s.ops)))
        print()
    return EXIT_OK


# --- argument parsing ---------------------------------------------------------

def _common(p, trees=True):
    p.add_argument("--config", help="key = value file with defaults for these options")
    p.add_argument("--no-lowercase", action="store_true", help="keep word case")
    if trees:
        p.add_argument("--head-rules", help="head rules file (default: shipped table)")
        p.add_argument("--bin-rules", help="binarization rules file (default: shipped table)")


def _search(p):
    p.add_argument("--beam", default="128", help="hypotheses per stack ('inf' for no limit)")
    p.add_argument("--delta", default=repr(math.log(1000.0)),
                   help="log-probability window per stack ('inf' for no limit)")
    p.add_argument("--right-branching", action="store_true",
                   help="test mode: never adjoin before </s>")
    p.add_argument("--workers", type=int, default=1, help="decoding processes")


def make_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="slm", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"slm {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("preprocess", help="clean, binarize and enrich trees; write vocabularies")
    _common(p)
    p.add_argument("input", nargs="*", help="treebank files")
    p.add_argument("--out", default="preprocessed")
    p.add_argument("--scheme", dest="schemes", action="append", choices=SCHEMES,
                   help="enrichment scheme (repeatable; default: all)")
    p.add_argument("--cap", type=int, default=10_000, help="word vocabulary size")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="initialize the SLM and trigram from trees")
    _common(p)
    p.add_argument("train", nargs="*", help="training treebank files")
    p.add_argument("--heldout", nargs="*", default=None, help="held-out treebank files")
    p.add_argument("--heldout-every", type=int, default=10,
                   help="without --heldout, hold out every N-th training tree (0: none)")
    p.add_argument("--scheme", default="baseline", choices=SCHEMES)
    p.add_argument("--cap", type=int, default=10_000)
    p.add_argument("--out", default="model")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ppl", help="perplexity over a grid of interpolation weights")
    _common(p, trees=False)
    _search(p)
    p.add_argument("test", nargs="*", help="test files (treebank or one sentence per line)")
    p.add_argument("--slm-model", default="model/slm.model")
    p.add_argument("--trigram-model", default="model/trigram.model")
    p.add_argument("--lambdas", default="0.0,0.6,1.0", help="comma-separated trigram weights")
    p.add_argument("--scheme", help="report label for models without scheme metadata (default: baseline)")
    p.add_argument("--report", help="also write the text report here")
    p.add_argument("--csv", help="also write the rows as CSV")
    p.set_defaults(func=cmd_ppl)

    p = sub.add_parser("em", help="N-best EM reestimation")
    _common(p, trees=False)
    _search(p)
    p.add_argument("train", nargs="*", help="training files (treebank or plain text)")
    p.add_argument("--heldout", nargs="*", default=None)
    p.add_argument("--heldout-every", type=int, default=10)
    p.add_argument("--slm-model", default="model/slm.model")
    p.add_argument("--iterations", type=int, default=3)
    p.add_argument("--nbest", default=None, help="parses per sentence (default: beam)")
    p.add_argument("--refit-weights", action="store_true",
                   help="re-fit interpolation weights on held-out data every iteration")
    p.add_argument("--out", default="em")
    p.set_defaults(func=cmd_em)

    p = sub.add_parser("inspect", help="show a tree through every preprocessing stage")
    _common(p)
    p.add_argument("input", nargs="*")
    p.add_argument("--tree", help="bracketed tree given inline")
    p.add_argument("--scheme", dest="schemes", action="append", choices=SCHEMES)
    p.set_defaults(func=cmd_inspect)
    return parser


_LIST_KEYS = {"input", "train", "test", "heldout", "schemes"}
_BOOL_KEYS = {"no_lowercase", "right_branching", "refit_weights"}


def parse_args(argv) -> argparse.Namespace:
    parser = make_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help(sys.stderr)
        raise UsageError("no command given")
    if args.config:
        conf = read_config(args.config)
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        defaults = {}
        for k, v in conf.items():
            if k == "scheme" and "schemes" in known:
                k = "schemes"
            if k not in known:
                raise UsageError(f"{args.config}: unknown key {k!r} for {args.command}")
            if k in _LIST_KEYS:
                v = _split_list(v)
            elif k in _BOOL_KEYS:
                v = v.lower() in ("1", "true", "yes", "on")
            defaults[k] = v
        sub.set_defaults(**defaults)
        args = parser.parse_args(argv)
    for key in ("input", "train", "test"):
        if hasattr(args, key) and not getattr(args, key) and args.command != "inspect":
            if args.command == "preprocess" and key == "input":
                continue
            raise UsageError(f"{args.command}: no {key} files given")
    if hasattr(args, "schemes") and not args.schemes:
        args.schemes = list(SCHEMES)
    for key in ("cap", "iterations", "workers"):
        v = getattr(args, key, None)
        if v is not None and int(v) < (0 if key == "iterations" else 1):
            raise UsageError(f"--{key} out of range: {v}")
    return args


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        args = parse_args(argv)
    except UsageError as e:
        print(f"slm: {e}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"slm: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (TreebankError, DerivationError, ConfigError, SearchError, FileNotFoundError,
            ValueError) as e:
        print(f"slm: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except Exception as e:  # noqa: BLE001
        log.exception("internal error")
        print(f"slm: internal error: {e}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
