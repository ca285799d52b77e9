"""
Command-line surface: one subcommand per pipeline stage.

    stats | train-vocab | pretrain | finetune | attack | eval | predict
    | split | synth | scale | gradcheck

Exit codes: 0 success, 1 invalid usage or option values, 2 runtime failure.
"""

import argparse
import json
import logging
import math
import sys
from pathlib import Path
from typing import Dict, List, Optional

from config.errors import CurlIpError, UsageError, ValidationError
from config.settings import RunConfig, load_run_config, resolve_seed
from data_processing.adversary import build_adversarial_set, check_evasion_char
from data_processing.ip_featurizer import IpEmbeddingTable
from data_processing.synthetic import generate_corpus
from data_processing.tokenizer import Vocab, train_vocab
from data_processing.url_corpus import AsnMap, dataset_stats, load_dataset, split_dataset, write_dataset
from neural.checkpoint import load_checkpoint, save_checkpoint
from neural.state import ModelState
from url_detection.finetune import Finetuner, start_state
from url_detection.integrity import end_to_end_grad_check
from url_detection.model import VOCAB_META_KEY, run_config_of, vocab_of
from url_detection.predictor import UrlPredictor, print_report, write_errors
from url_detection.pretrain import Pretrainer
from url_detection.scale_study import run_scale_study

logger = logging.getLogger("curlip")

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2
GRADCHECK_THRESHOLD = 1e-4


class CurlIpArgumentParser(argparse.ArgumentParser):
    """argparse exits with 2 on usage errors; here those are validation errors (1)."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


def setup_logging(verbose: bool = False, quiet: bool = False) -> None:
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s", force=True)


def write_json(data: Dict, path: str) -> None:
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(data, indent=2, sort_keys=True), encoding="utf-8")


def sibling(path: str, suffix: str) -> str:
    p = Path(path)
    return str(p.with_name(p.stem + suffix))


# ---------------------------------------------------------------------------
# shared loaders


def run_config(args) -> RunConfig:
    return load_run_config(args.config, args.preset)


def load_vocab(args, state: Optional[ModelState] = None) -> Vocab:
    if getattr(args, "vocab", None):
        return Vocab.load(args.vocab)
    if state is not None and VOCAB_META_KEY in state.meta:
        return vocab_of(state)
    raise UsageError("a vocabulary is required: pass --vocab (or a checkpoint that embeds one)")


def load_ip_table(args, cfg: RunConfig) -> Optional[IpEmbeddingTable]:
    if not getattr(args, "ip_embeddings", None):
        return None
    return IpEmbeddingTable.from_csv(args.ip_embeddings, cfg.bmmc.ip_dim)


def progress_enabled(args) -> bool:
    return not args.quiet and sys.stderr.isatty()


# ---------------------------------------------------------------------------
# subcommands


def cmd_stats(args) -> int:
    ds = load_dataset(args.data)
    asn_map = AsnMap.from_csv(args.asn_map) if args.asn_map else None
    report = dataset_stats(ds, asn_map, top_k=args.top_k).to_dict()
    report["n_records"] = len(ds)
    report["skipped"] = {"total": ds.skipped, "reasons": ds.skip_reasons}
    write_json(report, args.out)
    logger.info("Wrote dataset statistics to %s", args.out)
    return EXIT_OK


def cmd_train_vocab(args) -> int:
    cfg = run_config(args)
    ds = load_dataset(args.data)
    size = args.vocab_size or cfg.encoder.vocab_size
    vocab = train_vocab((r.raw for r in ds.records), size, seed=resolve_seed(args.seed))
    vocab.save(args.out)
    logger.info("Saved vocab (%d pieces, %d merges) to %s", len(vocab), len(vocab.merges), args.out)
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = run_config(args).override("train", tacl_lambda=args.lam, tacl_tau=args.tau, teacher_ema=args.teacher_ema)
    seed = resolve_seed(args.seed, cfg.train.seed)
    ds = load_dataset(args.data)
    vocab = load_vocab(args)
    log_file = args.loss_log or sibling(args.out, "_loss.csv")

    trainer = Pretrainer(cfg, vocab, seed=seed, log_file=log_file, progress=progress_enabled(args))
    state = trainer.run(ds, epochs=args.epochs, batch_size=args.batch_size, max_steps=args.max_steps)
    save_checkpoint(state, args.out)
    logger.info("Saved encoder checkpoint to %s (loss log %s)", args.out, log_file)
    if not args.quiet:
        trainer.loss_log.print_session_summary()
    return EXIT_OK


def cmd_finetune(args) -> int:
    pretrained = load_checkpoint(args.pretrained) if args.pretrained else None
    if pretrained is not None and not args.config and not args.preset:
        cfg = run_config_of(pretrained)
    else:
        cfg = run_config(args)
    seed = resolve_seed(args.seed, cfg.train.seed)
    vocab = load_vocab(args, pretrained)
    train = load_dataset(args.data)
    val = load_dataset(args.val) if args.val else None
    log_file = args.loss_log or sibling(args.out, "_loss.csv")

    state = start_state(cfg, vocab, seed, pretrained)
    trainer = Finetuner(cfg, vocab, state, seed=seed, ip_table=load_ip_table(args, cfg), zero_ip=args.zero_ip,
                        log_file=log_file, progress=progress_enabled(args))
    state = trainer.run(train, val, epochs=args.epochs, batch_size=args.batch_size, lr=args.lr)
    save_checkpoint(state, args.out)
    logger.info("Saved model checkpoint to %s (loss log %s)", args.out, log_file)
    if not args.quiet:
        trainer.loss_log.print_session_summary()
    return EXIT_OK


def cmd_attack(args) -> int:
    state = load_checkpoint(args.checkpoint) if args.checkpoint else None
    vocab = load_vocab(args, state)
    ds = load_dataset(args.data)
    attacked = build_adversarial_set(ds, vocab, args.fraction, seed=resolve_seed(args.seed),
                                     evasion_char=args.evasion_char, max_insertions=args.max_insertions)
    write_dataset(attacked, args.out, include_origin=True)
    logger.info("Wrote %d records (%d adversarial) to %s", len(attacked), len(attacked) - len(ds), args.out)
    return EXIT_OK


def _predictor(args) -> UrlPredictor:
    state = load_checkpoint(args.checkpoint)
    cfg = run_config_of(state)
    vocab = Vocab.load(args.vocab) if args.vocab else None
    # without --zero-ip the checkpoint's own setting applies
    return UrlPredictor(state, vocab, ip_table=load_ip_table(args, cfg), zero_ip=args.zero_ip or None,
                        batch_size=args.batch_size, progress=progress_enabled(args))


def cmd_eval(args) -> int:
    predictor = _predictor(args)
    ds = load_dataset(args.data)
    result = predictor.evaluate(ds, threshold=args.threshold)

    extra = {"by_origin": result.to_dict()["by_origin"]} if result.by_origin else None
    result.report.write_json(args.out, extra=extra)
    roc_out = args.roc_out or sibling(args.out, "_roc.csv")
    result.report.write_roc_csv(roc_out)
    if args.errors_out:
        write_errors(UrlPredictor.misclassified(ds, result), args.errors_out)
    logger.info("Wrote report to %s and ROC points to %s", args.out, roc_out)

    if not args.quiet:
        print_report(result.report)
        for origin, report in result.by_origin.items():
            print_report(report, title=f"EVALUATION [{origin}]")
        predictor.print_session_summary()
    return EXIT_OK


def cmd_predict(args) -> int:
    predictor = _predictor(args)
    ds = load_dataset(args.data)
    df = predictor.predict_dataset(ds, args.out)
    if not args.quiet:
        predictor.print_session_summary()
        print("\nPREDICTED CLASSES")
        for name, count in df["pred"].value_counts().items():
            print(f"{name.upper():10s}: {count:5d} ({count / len(df) * 100:5.1f}%)")
    return EXIT_OK


def cmd_split(args) -> int:
    ds = load_dataset(args.data)
    parts = split_dataset(ds, tuple(args.ratios), resolve_seed(args.seed))
    out_dir = Path(args.out)
    for name, part in zip(("train", "val", "test"), parts):
        write_dataset(part, str(out_dir / f"{name}.csv"))
    logger.info("Split %d records into train/val/test = %s under %s", len(ds), [len(p) for p in parts], out_dir)
    return EXIT_OK


def cmd_synth(args) -> int:
    ds = generate_corpus(args.n, seed=resolve_seed(args.seed), n_classes=args.n_classes,
                         malicious_fraction=args.malicious_fraction, ip_only=args.ip_only)
    write_dataset(ds, args.out)
    logger.info("Wrote %d synthetic records to %s", len(ds), args.out)
    return EXIT_OK


def cmd_scale(args) -> int:
    pretrained = load_checkpoint(args.pretrained) if args.pretrained else None
    cfg = run_config(args)
    seed = resolve_seed(args.seed, cfg.train.seed)
    vocab = load_vocab(args, pretrained)
    table = run_scale_study(load_dataset(args.data), load_dataset(args.test), args.sizes, cfg, vocab, seed=seed,
                            pretrained=pretrained, epochs=args.epochs, ip_table=load_ip_table(args, cfg),
                            zero_ip=args.zero_ip, progress=progress_enabled(args))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    table.to_csv(out, index=False)
    if not args.quiet:
        print("\nTRAINING-SIZE STUDY")
        print(table.to_string(index=False, float_format=lambda v: f"{v:.4f}"))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = run_config(args)
    base = resolve_seed(args.seed)
    reports = {}
    for seed in range(base, base + args.seeds):
        reports[seed] = end_to_end_grad_check(seed, cfg, batch_size=args.batch_size, max_coords=args.max_coords)
    worst = max(r.max_rel_err for r in reports.values())
    passed = worst < args.threshold
    summary = {"threshold": args.threshold, "max_rel_err": worst, "passed": passed,
               "seeds": {str(s): r.to_dict() for s, r in reports.items()}}
    if args.out:
        write_json(summary, args.out)
    if not args.quiet:
        print("\nGRADIENT CHECK")
        for seed, report in reports.items():
            print(f"seed {seed}: max rel err {report.max_rel_err:.3e} ({report.worst})")
        print(f"{'PASSED' if passed else 'FAILED'} (threshold {args.threshold:g})")
    return EXIT_OK if passed else EXIT_RUNTIME


# ---------------------------------------------------------------------------
# parser


def _ratios(text: str) -> List[float]:
    try:
        return [float(x) for x in text.split(",")]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"ratios must be comma-separated numbers, got {text!r}") from e


def _sizes(text: str) -> List[int]:
    try:
        return [int(x) for x in text.split(",")]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"sizes must be comma-separated integers, got {text!r}") from e


def _in_range(cast, low: float, high: float, closed: bool = True):
    """argparse type: cast, then reject values outside [low, high] (or (low, high))."""

    def parse(text: str):
        try:
            value = cast(text)
        except ValueError as e:
            raise argparse.ArgumentTypeError(f"expected {cast.__name__}, got {text!r}") from e
        inside = low <= value <= high if closed else low < value < high
        if not inside:
            bounds = f"[{low}, {high}]" if closed else f"({low}, {high})"
            raise argparse.ArgumentTypeError(f"{value} is outside {bounds}")
        return value

    return parse


def _evasion_char(text: str) -> str:
    try:
        return check_evasion_char(text)
    except ValueError as e:
        raise argparse.ArgumentTypeError(str(e)) from e


def build_parser() -> argparse.ArgumentParser:
    common = CurlIpArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML file overriding preset values")
    common.add_argument("--preset", help="named preset (desk, full)")
    common.add_argument("--seed", type=int, help="seed; CURLIP_SEED overrides it when set")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    common.add_argument("--quiet", action="store_true", help="warnings only, no progress bars or summaries")

    parser = CurlIpArgumentParser(prog="curlip", description="Desk-scale URL + IP malicious URL detection")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name: str, func, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.set_defaults(func=func)
        return p

    p = command("stats", cmd_stats, "TLD shares, IP classes and top ASNs per label")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--asn-map", help="CSV of prefix,asn")
    p.add_argument("--top-k", type=int, default=5)

    p = command("train-vocab", cmd_train_vocab, "train the byte-level BPE vocabulary")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--vocab-size", type=int)

    p = command("pretrain", cmd_pretrain, "MLM + token-contrastive pretraining of the encoder")
    p.add_argument("--data", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--loss-log")
    p.add_argument("--epochs", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lambda", dest="lam", type=_in_range(float, 0.0, math.inf))
    p.add_argument("--tau", type=_in_range(float, 0.0, math.inf, closed=False))
    p.add_argument("--teacher-ema", type=float)

    p = command("finetune", cmd_finetune, "train the full detector")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--val")
    start = p.add_mutually_exclusive_group(required=True)
    start.add_argument("--pretrained", help="encoder checkpoint from pretrain")
    start.add_argument("--from-scratch", action="store_true")
    p.add_argument("--vocab")
    p.add_argument("--loss-log")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--zero-ip", action="store_true", help="replace f_ip with zeros (ablation)")
    p.add_argument("--ip-embeddings", help="CSV ip,v1..vF replacing the built-in IP features")

    p = command("attack", cmd_attack, "write an adversarial copy of a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--vocab")
    p.add_argument("--checkpoint", help="take the vocabulary from a checkpoint")
    p.add_argument("--fraction", type=_in_range(float, 0.0, 1.0), default=0.5)
    p.add_argument("--max-insertions", type=int)
    p.add_argument("--evasion-char", type=_evasion_char, default="-")

    for name, func, help_text in (("eval", cmd_eval, "evaluate a checkpoint on a labelled CSV"),
                                  ("predict", cmd_predict, "score URLs, one JSON object per line")):
        p = command(name, func, help_text)
        p.add_argument("--data", required=True)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--vocab")
        p.add_argument("--batch-size", type=int)
        p.add_argument("--zero-ip", action="store_true", help="zero f_ip even if the checkpoint was trained with it")
        p.add_argument("--ip-embeddings")
        if name == "eval":
            p.add_argument("--threshold", type=float)
            p.add_argument("--roc-out")
            p.add_argument("--errors-out", help="CSV of misclassified url,label,p_malicious")

    p = command("split", cmd_split, "write train/val/test CSVs")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--ratios", type=_ratios, default=[0.8, 0.1, 0.1])

    p = command("synth", cmd_synth, "generate the synthetic desk corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=_in_range(int, 1, math.inf), default=2000)
    p.add_argument("--n-classes", type=int, choices=(2, 3), default=2)
    p.add_argument("--malicious-fraction", type=_in_range(float, 0.0, 1.0, closed=False), default=0.5)
    p.add_argument("--ip-only", action="store_true", help="URL text carries no label signal")

    p = command("scale", cmd_scale, "fine-tune on nested training subsets")
    p.add_argument("--data", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--sizes", type=_sizes, required=True)
    p.add_argument("--pretrained")
    p.add_argument("--vocab")
    p.add_argument("--epochs", type=int)
    p.add_argument("--zero-ip", action="store_true")
    p.add_argument("--ip-embeddings")

    p = command("gradcheck", cmd_gradcheck, "end-to-end gradient check in 64-bit")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--max-coords", type=int, default=4)
    p.add_argument("--threshold", type=float, default=GRADCHECK_THRESHOLD)
    p.add_argument("--out")

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.verbose, args.quiet)
    try:
        return args.func(args)
    except ValidationError as e:
        print(f"curlip {args.command}: error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except (CurlIpError, OSError, ValueError) as e:
        print(f"curlip {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
