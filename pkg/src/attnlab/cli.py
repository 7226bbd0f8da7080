"""Command-line entry point: ``attnlab <command> [flags]``.

Exit status is 0 on success, 1 on usage errors and 2 on data or format
errors (missing files, malformed inputs).
"""

from __future__ import annotations

import argparse
import logging
import shutil
import sys
from pathlib import Path

import numpy as np

from . import bpe as bpe_mod
from .checkpoint import CheckpointError
from .config import Config, ConfigError, dump_text, parse_config, parse_text
from .data import DataError, load_features_for, make_toy_data, read_manifest, read_transcripts
from .features import FormatError, MfccConfig, save_features
from .lm import (LmFormatError, LstmLM, LstmLMConfig, NGramLM, lm_events, load_lm, perplexity,
                 train_lstm_lm)
from .model import AttentionModel, ModelConfig
from .search import (FusionConfig, beam_search, corpus_wer, score_sequence, search_error_analysis)

log = logging.getLogger("attnlab")

DATA_ERRORS = (FileNotFoundError, IsADirectoryError, FormatError, DataError, ConfigError, CheckpointError,
               LmFormatError, ValueError, UnicodeDecodeError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# shared helpers -------------------------------------------------------------------------


def _config(args) -> Config:
    cfg = parse_config(args.config) if getattr(args, "config", None) else Config.defaults()
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    return cfg


def _mfcc_config(cfg) -> MfccConfig:
    return MfccConfig(num_filters=cfg["features.num_filters"], preemphasis=cfg["features.preemphasis"],
                      normalize=cfg["features.normalize"])


def _codec_from_files(merges_path, vocab_path) -> bpe_mod.BpeCodec:
    for p in (merges_path, vocab_path):
        if not Path(p).exists():
            raise FileNotFoundError(f"no such file: {p}")
    return bpe_mod.BpeCodec(bpe_mod.Merges.load(merges_path), bpe_mod.BpeVocab.load(vocab_path))


def _codec_from_doc(doc: dict) -> bpe_mod.BpeCodec:
    return bpe_mod.BpeCodec(bpe_mod.Merges(tuple(p) for p in doc["bpe.merge_list"]),
                            bpe_mod.BpeVocab(doc["bpe.vocab"]))


def load_recognizer(path):
    """(float64 AttentionModel, codec, resolved config) from a training checkpoint."""
    from .trainer import read_training_checkpoint

    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    doc, params, _, _ = read_training_checkpoint(path)
    if doc.get("checkpoint.kind") != "asr":
        raise CheckpointError(f"{path}: not a recognizer checkpoint")
    cfg = Config.from_dict({k: v for k, v in doc.items() if k in Config.defaults()})
    mc = ModelConfig(vocab_size=doc["model.vocab_size"], input_dim=doc["model.input_dim"],
                     enc_layers=doc["model.current_layers"], enc_units=cfg["model.enc_units"],
                     pooling=tuple(doc["model.current_pooling"]), dec_units=cfg["model.dec_units"],
                     embed_dim=cfg["model.embed_dim"], att_dim=cfg["model.att_dim"])
    return AttentionModel(mc, params).as_dtype(np.float64), _codec_from_doc(doc), cfg


def _codec_for_lm(args) -> bpe_mod.BpeCodec:
    if args.checkpoint:
        return load_recognizer(args.checkpoint)[1]
    if not (args.merges and args.vocab):
        raise UsageError("give --checkpoint or both --merges and --vocab")
    return _codec_from_files(args.merges, args.vocab)


def _fusion(args, codec) -> FusionConfig:
    if not args.lm:
        if args.lm_weight:
            raise UsageError("--lm-weight needs --lm")
        return FusionConfig()
    return FusionConfig(load_lm(args.lm, codec.vocab.tokens), args.lm_weight)


def _utterances(manifest, cfg):
    utts = read_manifest(manifest, cfg["data.max_chars"])
    return load_features_for(utts, _mfcc_config(cfg))


def _emit(lines, out):
    text = "".join(line + "\n" for line in lines)
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


# commands -------------------------------------------------------------------------------


def cmd_make_toy_data(args):
    paths = make_toy_data(args.out, args.num_train, args.num_dev, args.seed or 0)
    print(f"wrote {paths['train']} and {paths['dev']}")


def cmd_featurize(args):
    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    utts = _utterances(args.manifest, cfg)
    for u in utts:
        save_features(out / f"{u.id}.feat", u.features)
    print(f"featurized {len(utts)} utterances into {out}")


def cmd_bpe_learn(args):
    if args.manifest:
        corpus = [u.words for u in read_manifest(args.manifest)]
    elif args.text:
        corpus = [words for _, words in read_transcripts(args.text)]
    else:
        raise UsageError("give --text or --manifest")
    merges, vocab = bpe_mod.learn_bpe(corpus, args.merges)
    merges.save(args.out_merges)
    vocab.save(args.out_vocab)
    print(f"learned {len(merges)} merges, vocabulary of {len(vocab)} tokens")


def cmd_bpe_apply(args):
    codec = _codec_from_files(args.merges, args.vocab)
    lines = []
    for uid, words in read_transcripts(args.text):
        enc = codec.encode(words) if args.ids else codec.encode_tokens(words)
        body = " ".join(str(x) for x in enc)
        lines.append(f"{uid}\t{body}" if uid is not None else body)
    _emit(lines, args.out)


def cmd_train(args):
    from .trainer import train

    cfg = _config(args)
    if args.epochs is not None:
        cfg["train.epochs"] = args.epochs
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_utts = _utterances(args.train, cfg)
    dev_utts = _utterances(args.dev, cfg)
    if args.resume:
        doc = parse_text(_read_ckpt_text(args.resume), args.resume)
        codec = _codec_from_doc(doc)
    elif args.merges and args.vocab:
        codec = _codec_from_files(args.merges, args.vocab)
    else:
        merges, vocab = bpe_mod.learn_bpe([u.words for u in train_utts], cfg["bpe.merges"])
        codec = bpe_mod.BpeCodec(merges, vocab)
    codec.merges.save(out / "merges.txt")
    codec.vocab.save(out / "vocab.txt")
    for u in train_utts + dev_utts:
        u.tokens = codec.encode(u.words)
    extra = {"bpe.vocab": codec.vocab.tokens, "bpe.merge_list": [list(p) for p in codec.merges]}
    result = train(train_utts, dev_utts, cfg, len(codec.vocab), out, args.resume, extra)
    if result.checkpoints:
        shutil.copyfile(result.checkpoints[-1], out / "final.ckpt")
    print(f"trained {len(result.metrics)} epochs; metrics in {out / 'metrics.tsv'}")


def _read_ckpt_text(path) -> str:
    from .checkpoint import load_checkpoint

    return load_checkpoint(path)[0]


def cmd_decode(args):
    model, codec, cfg = load_recognizer(args.checkpoint)
    fusion = _fusion(args, codec)
    utts = _utterances(args.manifest, cfg)
    beam = args.beam or cfg["search.beam"]
    lines = []
    for u in utts:
        hyps = beam_search(model, u.features, beam, fusion, slack=cfg["search.max_len_slack"])
        for h in hyps[:args.nbest]:
            lines.append(f"{u.id}\t{h.score:.6f}\t{' '.join(codec.decode(h.tokens))}")
    _emit(lines, args.out)


def cmd_score(args):
    model, codec, cfg = load_recognizer(args.checkpoint)
    fusion = _fusion(args, codec)
    lines = []
    for u in _utterances(args.manifest, cfg):
        h = score_sequence(model, u.features, codec.encode(u.words), fusion)
        lines.append(f"{u.id}\t{h.score:.6f}\t{' '.join(u.words)}")
    _emit(lines, args.out)


def cmd_analyze_search(args):
    model, codec, cfg = load_recognizer(args.checkpoint)
    fusion = _fusion(args, codec)
    utts = _utterances(args.manifest, cfg)
    result = search_error_analysis(model, utts, codec, args.beam or cfg["search.beam"], fusion,
                                   cfg["search.max_len_slack"])
    _emit(result.lines(), args.out)


def _lm_corpus(args, codec):
    return [codec.encode_tokens(words) for _, words in read_transcripts(args.text)]


def cmd_lm_train_ngram(args):
    cfg = _config(args)
    codec = _codec_for_lm(args)
    order = args.order or cfg["lm.order"]
    lm = NGramLM.train(_lm_corpus(args, codec), order, lm_events(codec.vocab.tokens))
    lm.write_arpa(args.out)
    print(f"wrote {order}-gram model to {args.out}")


def cmd_lm_train_lstm(args):
    cfg = _config(args)
    codec = _codec_for_lm(args)
    config = LstmLMConfig(cfg["lm.proj"], cfg["lm.layers"], cfg["lm.units"], cfg["lm.dropout"], cfg["lm.lr"],
                          cfg["lm.clip_norm"], args.epochs or cfg["lm.epochs"], cfg["lm.batch_size"])
    corpus = [codec.encode(words) for _, words in read_transcripts(args.text)]
    lm = train_lstm_lm(corpus, len(codec.vocab), config, cfg["seed"], log=log.info)
    lm.save(args.out, codec.vocab.tokens)
    print(f"wrote LSTM LM to {args.out}")


def cmd_ppl(args):
    codec = _codec_for_lm(args)
    path = Path(args.lm)
    if not path.exists():
        raise FileNotFoundError(f"language model not found: {path}")
    with open(path, "rb") as f:
        is_ckpt = f.read(8) == b"ATTNASR1"
    if is_ckpt:
        model = LstmLM.load(path).as_dtype(np.float64)
        corpus = [codec.encode(words) for _, words in read_transcripts(args.text)]
    else:
        model = NGramLM.read_arpa(path)
        corpus = _lm_corpus(args, codec)
    print(f"ppl={perplexity(model, corpus):.4f}")


def cmd_wer(args):
    refs = read_transcripts(args.ref)
    hyps = read_transcripts(args.hyp)
    if all(uid is not None for uid, _ in refs + hyps):
        hyp_map = {}
        for uid, words in hyps:
            hyp_map.setdefault(uid, words)  # first (best) entry per id
        missing = [uid for uid, _ in refs if uid not in hyp_map]
        if missing:
            raise DataError(f"{args.hyp}: no hypothesis for {missing[0]!r}")
        pairs = [(words, hyp_map[uid]) for uid, words in refs]
    else:
        if len(refs) != len(hyps):
            raise DataError(f"{len(refs)} reference lines but {len(hyps)} hypothesis lines")
        pairs = [(r, h) for (_, r), (_, h) in zip(refs, hyps)]
    print(f"wer={corpus_wer(pairs):.4f}")


# parser -----------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="attnlab", description="Attention-based speech recognition toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def command(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--seed", type=int, default=None, help="random seed (default 0)")
        p.set_defaults(func=fn)
        return p

    def lm_flags(p):
        p.add_argument("--lm", help="ARPA file or LSTM LM checkpoint for shallow fusion")
        p.add_argument("--lm-weight", type=float, default=0.0)

    def bpe_source(p):
        p.add_argument("--checkpoint", help="take the BPE vocabulary from a recognizer checkpoint")
        p.add_argument("--merges")
        p.add_argument("--vocab")

    p = command("make-toy-data", cmd_make_toy_data, "generate the synthetic tone corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--num-train", type=int, default=200)
    p.add_argument("--num-dev", type=int, default=40)

    p = command("featurize", cmd_featurize, "extract MFCC feature files for a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")

    p = command("bpe-learn", cmd_bpe_learn, "learn BPE merges and vocabulary")
    p.add_argument("--text")
    p.add_argument("--manifest")
    p.add_argument("--merges", type=int, required=True)
    p.add_argument("--out-merges", required=True)
    p.add_argument("--out-vocab", required=True)

    p = command("bpe-apply", cmd_bpe_apply, "segment transcripts into BPE units")
    p.add_argument("--merges", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--text", required=True)
    p.add_argument("--ids", action="store_true", help="print ids instead of tokens")
    p.add_argument("--out")

    p = command("train", cmd_train, "train a recognizer with the pretraining schedule")
    p.add_argument("--config")
    p.add_argument("--train", required=True)
    p.add_argument("--dev", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--merges")
    p.add_argument("--vocab")
    p.add_argument("--resume", help="continue from an epoch-<n>.ckpt")
    p.add_argument("--epochs", type=int)

    for name, fn, text in (("decode", cmd_decode, "beam-search decode a manifest"),
                           ("score", cmd_score, "score reference transcripts"),
                           ("analyze-search", cmd_analyze_search, "count reference-related search errors")):
        p = command(name, fn, text)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--manifest", required=True)
        p.add_argument("--out")
        lm_flags(p)
        if name != "score":
            p.add_argument("--beam", type=int)
        if name == "decode":
            p.add_argument("--nbest", type=int, default=1)

    p = command("lm-train-ngram", cmd_lm_train_ngram, "train a Kneser-Ney n-gram LM (ARPA output)")
    p.add_argument("--text", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--order", type=int)
    p.add_argument("--config")
    bpe_source(p)

    p = command("lm-train-lstm", cmd_lm_train_lstm, "train an LSTM LM with SGD")
    p.add_argument("--text", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--config")
    bpe_source(p)

    p = command("ppl", cmd_ppl, "perplexity of a text under an LM")
    p.add_argument("--lm", required=True)
    p.add_argument("--text", required=True)
    bpe_source(p)

    p = command("wer", cmd_wer, "word error rate between two transcript files")
    p.add_argument("--ref", required=True)
    p.add_argument("--hyp", required=True)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            parser.print_help(sys.stderr)
            return 1
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s", stream=sys.stderr)
        args.func(args)
        return 0
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
