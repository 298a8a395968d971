"""``seqdelta`` command-line entry point.

Exit codes: 0 success, 1 usage error, 2 bad input data or I/O failure,
3 a check that ran but did not pass (``gradcheck``).
"""
from __future__ import annotations

import argparse
import dataclasses
import re
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import load_config
from .dataio import (
    Dataset,
    generate_synthetic,
    load_checkpoint,
    load_dataset,
    read_descriptors,
    read_poses,
    save_checkpoint,
    save_dataset,
    window_sequences,
    write_descriptors,
)
from .dsd import DsdEncoder, init_dsd_params
from .errors import ConfigError, DataError, ShapeMismatch
from .evalkit import GroundTruth, Pipeline, emit_report, latency_profile, recall_at_k, stored_latency
from .retrieval import (
    DescriptorIndex,
    RetrievalConfig,
    load_index,
    query_rows,
    read_results,
    retrieve_all,
    save_index,
    write_results,
)
from .trainer import pipeline_gradcheck, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CHECK = 0, 1, 2, 3


class UsageError(Exception):
    def __init__(self, message: str, usage: str | None = None):
        super().__init__(message)
        self.usage = usage


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}", self.format_usage())


def _ks(text: str) -> list[int]:
    try:
        ks = [int(k) for k in text.split(",") if k.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not ks or min(ks) < 1:
        raise argparse.ArgumentTypeError("K values must be positive")
    return ks


def _variants(text: str) -> list[str]:
    out = [v.strip() for v in text.split(",") if v.strip()]
    for v in out:
        if not re.fullmatch(r"s\d+(to1)?", v):
            raise argparse.ArgumentTypeError(f"unknown variant {v!r} (use s1, s<L>, s<L>to1)")
    return out


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="seqdelta", description="Sequence-delta place recognition toolkit.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("gen-synth", help="write a synthetic reference/query traverse pair")
    s.add_argument("--spec", type=Path, help="config file; its [synthetic] section is used")
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--seed", type=int)

    s = sub.add_parser("train", help="train the sequence encoder with the quadruplet loss")
    s.add_argument("--config", type=Path)
    s.add_argument("--data", type=Path, required=True, help="dataset directory (see gen-synth)")
    s.add_argument("--out", type=Path, required=True, help="checkpoint for the best validation epoch")
    s.add_argument("--resume", type=Path, help="continue from this checkpoint")
    s.add_argument("--seed", type=int)
    s.add_argument("--quiet", action="store_true")

    s = sub.add_parser("encode", help="turn frame descriptors into sequence or frame descriptors")
    s.add_argument("--ckpt", type=Path, required=True)
    s.add_argument("--frames", type=Path, required=True)
    s.add_argument("--mode", choices=("seq", "frame"), default="seq")
    s.add_argument("--seq-len", type=int, help="window length if the checkpoint does not record one")
    s.add_argument("--out", type=Path, required=True)

    s = sub.add_parser("index", help="bundle descriptors and poses into an index directory")
    s.add_argument("--seq", type=Path, required=True)
    s.add_argument("--frame", type=Path, required=True)
    s.add_argument("--poses", type=Path)
    s.add_argument("--out", type=Path, required=True)

    s = sub.add_parser("retrieve", help="hierarchical retrieval of every query against an index")
    s.add_argument("--index", type=Path, required=True)
    s.add_argument("--query", type=Path, required=True, help="index directory of the query traverse")
    s.add_argument("--k", type=int, default=RetrievalConfig.k)
    s.add_argument("--lm", type=int, default=RetrievalConfig.lm)
    s.add_argument("--depth", type=int, default=20, help="ranking length written per query")
    s.add_argument("--threads", type=int, default=1)
    s.add_argument("--out", type=Path, required=True)

    s = sub.add_parser("eval", help="Recall@K of a results file")
    s.add_argument("--results", type=Path, required=True)
    s.add_argument("--poses", type=Path, required=True, help="database poses")
    s.add_argument("--query-poses", type=Path, help="query poses (default: --poses)")
    s.add_argument("--radius", type=float, default=1.0)
    s.add_argument("--metric", choices=("frames", "meters"), default="frames")
    s.add_argument("--ks", type=_ks, default=[1, 5, 10, 20])
    s.add_argument("--out", type=Path, required=True)

    s = sub.add_parser("gradcheck", help="finite-difference check of the encoder and loss")
    s.add_argument("--config", type=Path)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--epsilon", type=float, default=1e-5)
    s.add_argument("--tolerance", type=float, default=1e-4)

    s = sub.add_parser("bench", help="per-query latency of retrieval variants")
    s.add_argument("--index", type=Path, required=True)
    s.add_argument("--query", type=Path, required=True)
    s.add_argument("--variants", type=_variants, default=["s1", "s5", "s5to1"])
    s.add_argument("--reps", type=int, default=10)
    s.add_argument("--ckpt", type=Path, help="also time encoding of each query window")
    s.add_argument("--k", type=int, default=RetrievalConfig.k)
    s.add_argument("--lm", type=int, default=RetrievalConfig.lm)
    s.add_argument("--max-queries", type=int, default=200)
    s.add_argument("--out", type=Path, help="optional CSV of the latency table")
    return p


# --------------------------------------------------------------------------
# commands


def cmd_gen_synth(args) -> int:
    spec = load_config(args.spec).synthetic
    if args.seed is not None:
        spec = _replace(spec, seed=args.seed)
    save_dataset(generate_synthetic(spec), args.out)
    print(f"wrote {spec.frames} reference and query frames to {args.out}")
    return EXIT_OK


def _replace(obj, **changes):
    try:
        return dataclasses.replace(obj, **changes)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    tcfg = cfg.train if args.seed is None else _replace(cfg.train, seed=args.seed)
    data = load_dataset(args.data)
    if args.resume is not None:
        params, state = load_checkpoint(args.resume)
    else:
        m = cfg.model
        params = init_dsd_params(
            data.ref_frames.shape[1],
            tcfg.seq_len,
            hidden_dim=m.hidden_dim or None,
            kernel_mode=m.kernel_mode,
            kernel_width=tcfg.kernel_width,
            kernel_learnable=m.kernel_learnable,
            force_projection=m.force_projection,
            l2_normalize=m.l2_normalize,
            seed=tcfg.seed,
        )
        state = None

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    latest = out.with_name(out.stem + ".last" + out.suffix)
    result = train(
        data,
        params,
        tcfg,
        cfg.loss,
        state=state,
        on_epoch=lambda p, s: save_checkpoint(p, s, latest),
        echo=None if args.quiet else print,
    )
    save_checkpoint(result.best_params, result.state, out)
    print(f"best val_recall1={result.state.best_recall:.4f} at epoch {result.state.best_epoch}; wrote {out}")
    return EXIT_OK


def cmd_encode(args) -> int:
    params, _ = load_checkpoint(args.ckpt)
    frames = read_descriptors(args.frames).astype(np.float64)
    if frames.shape[1] != params.input_dim:
        raise ShapeMismatch(f"frames have {frames.shape[1]} columns, checkpoint expects {params.input_dim}")
    seq_len = params.seq_len or args.seq_len
    if seq_len is None:
        raise ConfigError("checkpoint records no window length; pass --seq-len")
    encoder = DsdEncoder(params)
    if args.mode == "seq":
        out = encoder.encode(window_sequences(frames, seq_len))
    elif seq_len == 1:
        out = encoder.encode(frames[:, None, :])
    else:
        # frame descriptors of a sequence model are the raw frames
        out = frames
    write_descriptors(out, args.out)
    print(f"wrote {out.shape[0]}x{out.shape[1]} descriptors to {args.out}")
    return EXIT_OK


def cmd_index(args) -> int:
    poses = read_poses(args.poses) if args.poses else None
    index = DescriptorIndex(read_descriptors(args.seq), read_descriptors(args.frame), poses)
    save_index(index, args.out)
    print(f"index: {len(index)} sequence rows, {index.frames.shape[0]} frames, offset {index.offset}")
    return EXIT_OK


def _ids(index: DescriptorIndex) -> np.ndarray:
    return index.poses.frames if index.poses is not None else np.arange(index.frames.shape[0])


def cmd_retrieve(args) -> int:
    if args.threads < 1:
        raise UsageError("--threads must be >= 1")
    try:
        cfg = RetrievalConfig(args.k, args.lm)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    index = load_index(args.index)
    queries = load_index(args.query)
    if queries.seq.shape[1] != index.seq.shape[1] or queries.frames.shape[1] != index.frames.shape[1]:
        raise ShapeMismatch("query and database descriptors have different widths")
    rows = query_rows(queries, cfg.lm)
    results = retrieve_all(queries, index, cfg, rows=rows, depth=args.depth, threads=args.threads)
    write_results(results, _ids(queries)[rows], _ids(index), args.out)
    print(f"wrote {len(results)} queries to {args.out}")
    return EXIT_OK


def _positions_by_id(poses, ids, what):
    lookup = {int(f): i for i, f in enumerate(poses.frames)}
    try:
        return np.array([lookup[int(i)] for i in ids], dtype=np.int64)
    except KeyError as exc:
        raise DataError(f"{what} id {exc.args[0]} not in the pose file") from None


def cmd_eval(args) -> int:
    db_poses = read_poses(args.poses)
    q_poses = read_poses(args.query_poses) if args.query_poses else db_poses
    want = "frame_difference" if args.metric == "frames" else "euclidean_meters"
    for poses in (db_poses, q_poses):
        if poses.metric != want:
            raise DataError(f"--metric {args.metric} does not match pose files of kind {poses.metric}")
    if not args.radius > 0:
        raise UsageError("--radius must be > 0")
    qids, rankings = read_results(args.results)
    q_rows = _positions_by_id(q_poses, qids, "query")
    ranked_rows = [_positions_by_id(db_poses, r, "database") for r in rankings]
    gt = GroundTruth(q_poses.positions[q_rows], db_poses.positions, args.radius, want)
    curve = recall_at_k(ranked_rows, gt, args.ks)
    csv_path, svg_path = emit_report([curve], [args.results.stem], args.out)
    for k, r in zip(curve.ks, curve.recalls):
        print(f"recall@{k}={r:.4f}")
    print(f"wrote {csv_path} and {svg_path}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = load_config(args.config)
    m = cfg.model
    report = pipeline_gradcheck(
        seed=args.seed,
        loss_cfg=cfg.loss,
        epsilon=args.epsilon,
        tolerance=args.tolerance,
        kernel_mode=m.kernel_mode,
        kernel_learnable=m.kernel_learnable,
        force_projection=m.force_projection,
        l2_normalize=m.l2_normalize,
    )
    for name, err in report.errors.items():
        print(f"{name:12s} {err:.3e}")
    print(f"max_rel_error={report.max_error:.3e} tolerance={report.tolerance:g} {'PASS' if report.passed else 'FAIL'}")
    return EXIT_OK if report.passed else EXIT_CHECK


def cmd_bench(args) -> int:
    if args.reps < 5:
        raise UsageError("--reps must be >= 5")
    try:
        cfg = RetrievalConfig(args.k, args.lm)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    index = load_index(args.index)
    queries = load_index(args.query)
    if args.ckpt is None:
        table = stored_latency(args.variants, index, queries, cfg, args.reps, args.max_queries)
    else:
        params, _ = load_checkpoint(args.ckpt)
        table = latency_profile(
            _pipelines(args.variants, DsdEncoder(params).encode, cfg), _as_dataset(index, queries),
            args.reps, args.max_queries,
        )
    lines = ["variant,mean_ms,stdev_ms,median_ms"]
    lines += [f"{r.variant},{r.mean_ms:.4f},{r.stdev_ms:.4f},{r.median_ms:.4f}" for r in table]
    print("\n".join(lines))
    if args.out:
        Path(args.out).write_text("\n".join(lines) + "\n")
    return EXIT_OK


def _pipelines(variants, encode, cfg):
    out = []
    for v in variants:
        ell = int(re.match(r"s(\d+)", v).group(1))
        if ell == 1 and not v.endswith("to1"):
            out.append(Pipeline(v))
        else:
            out.append(Pipeline(v, ell, encode, hierarchical=v.endswith("to1"), retrieval=cfg))
    return out


def _as_dataset(index, queries):
    return Dataset(index.frames, queries.frames, index.poses, queries.poses)


COMMANDS = {
    "gen-synth": cmd_gen_synth,
    "train": cmd_train,
    "encode": cmd_encode,
    "index": cmd_index,
    "retrieve": cmd_retrieve,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "bench": cmd_bench,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc.usage or parser.format_usage(), end="", file=sys.stderr)
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except (DataError, OSError, ValueError) as exc:
        print(f"seqdelta: error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run())
