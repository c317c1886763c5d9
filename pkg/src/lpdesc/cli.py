"""Command-line entry point: ``lpdesc <command> [options]``.

Exit status: 0 on success, 1 on invalid input or configuration, 2 on a
runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import checks, evalsuite as ev, experiment as ex
from .config import ConfigError, RunConfig, format_config, load_config
from .geometry import GridSpec, read_keypoints
from .imagecore import read_image
from .datagen import image_patches, parse_correspondences
from .network import DescriptorNet, describe_array, read_descriptors, write_descriptors

log = logging.getLogger("lpdesc")

IMAGE_SUFFIXES = (".pgm", ".raw")
KEYPOINT_SUFFIXES = (".kp", ".txt")
SNAPSHOT = "config.resolved"


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--out", help="output directory or file")
    p.add_argument("--threads", type=int, default=1, help="BLAS threads (default 1, deterministic)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lpdesc", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate the synthetic desk dataset")
    _common(p)

    p = sub.add_parser("train", help="train a descriptor network")
    _common(p)
    p.add_argument("--data", help="dataset directory written by synth (default: config data_dir)")

    p = sub.add_parser("describe", help="compute descriptors for images + keypoints")
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--images", required=True, help="image file or directory")
    p.add_argument("--keypoints", required=True, help="keypoint file or directory")

    for name, text in (("eval-fpr95", "false positive rate at 95%% recall"),
                       ("eval-bins", "FPR95 binned by scale ratio and orientation residual")):
        p = sub.add_parser(name, help=text)
        _common(p)
        p.add_argument("--scores", help="CSV with label,distance[,scale_ratio,orientation_residual]")
        p.add_argument("--desc-a", help="LPDESC1 file for view a keypoints")
        p.add_argument("--desc-b", help="LPDESC1 file for view b keypoints")
        p.add_argument("--corr", help="correspondence file linking the two")
        p.add_argument("--neg-shifts", type=int, default=10)
        p.add_argument("--method", default="model")

    p = sub.add_parser("eval-retrieval", help="rank of true matches among all candidates")
    _common(p)
    p.add_argument("--desc-a", required=True)
    p.add_argument("--desc-b", required=True)
    p.add_argument("--corr", required=True)
    p.add_argument("--distractors", help="LPDESC1 file of distractor descriptors")

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    _common(p)
    p = sub.add_parser("selfcheck", help="run the invariant suite")
    _common(p)
    return parser


def _config(args) -> RunConfig:
    overrides = {} if args.seed is None else {"seed": args.seed}
    return load_config(args.config, overrides)


def _out_dir(args, cfg: RunConfig) -> Path:
    out = args.out or cfg.out_dir
    if not out:
        raise ConfigError("out_dir", "no output directory (use --out or out_dir)")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _snapshot(directory: Path, cfg: RunConfig):
    (directory / SNAPSHOT).write_text(format_config(cfg))


# -- commands -----------------------------------------------------------------------

def cmd_synth(args, cfg):
    out = _out_dir(args, cfg)
    ds = ex.build_desk_dataset(cfg)
    ex.write_sources(out / "train", ds.train)
    ex.write_sources(out / "test", ds.test)
    _snapshot(out, cfg)
    print(f"wrote {ds.n_train_pairs} training and {sum(s.size for s in ds.test)} test correspondences to {out}")


def _load_split(data: str, split: str):
    root = Path(data)
    path = root / split if (root / split).is_dir() else root
    sources = ex.load_sources(path)
    if not sources:
        raise FileNotFoundError(f"no sources under {path}")
    return sources


def cmd_train(args, cfg):
    data = args.data or cfg.data_dir
    if not data:
        raise ConfigError("data_dir", "no training data (use --data or data_dir)")
    out = _out_dir(args, cfg)
    sources = _load_split(data, "train")
    _snapshot(out, cfg)
    meta = {"lambda": float(cfg.lam), "L": float(cfg.L), "logpolar": float(cfg.grid_kind == "logpolar")}
    with open(out / "loss.log", "w") as loss_log:
        loss_log.write("epoch mean_loss active_fraction batches\n")

        def on_epoch(epoch, net, stats):
            with open(out / f"epoch_{epoch + 1:03d}.lpnet", "wb") as f:
                net.save(f, {**meta, "epoch": float(epoch + 1)})
            loss_log.write(f"{epoch + 1} {stats.mean_loss!r} {stats.active_fraction!r} {stats.batches}\n")
            loss_log.flush()
            print(f"epoch {epoch + 1}: loss {stats.mean_loss:.4f}")

        net, _ = ex.train_model(cfg, sources, on_epoch)
    with open(out / "model.lpnet", "wb") as f:
        net.save(f, meta)


def _pair_files(images: Path, keypoints: Path):
    if images.is_file():
        return [(images, keypoints)]
    kp_by_stem = {p.stem: p for p in keypoints.iterdir() if p.suffix in KEYPOINT_SUFFIXES}
    out = []
    for img in sorted(p for p in images.iterdir() if p.suffix in IMAGE_SUFFIXES):
        if img.stem in kp_by_stem:
            out.append((img, kp_by_stem[img.stem]))
    return out


def write_sidecar(path: Path, cfg: RunConfig, counts: list):
    lines = [f"grid_kind = {cfg.grid_kind}", f"lambda = {cfg.lam!r}", f"L = {cfg.L}"]
    lines += [f"image = {name} {n}" for name, n in counts]
    Path(str(path) + ".meta").write_text("\n".join(lines) + "\n")


def read_sidecar(path) -> dict:
    meta = Path(str(path) + ".meta")
    if not meta.exists():
        return {}
    out = {}
    for line in meta.read_text().splitlines():
        key, _, val = line.partition("=")
        if key.strip() in ("grid_kind", "lambda", "L"):
            out[key.strip()] = val.strip()
    return out


def cmd_describe(args, cfg):
    if not args.out:
        raise UsageError("describe needs --out FILE")
    images, keypoints = Path(args.images), Path(args.keypoints)
    for p in (images, keypoints):
        if not p.exists():
            raise FileNotFoundError(p)
    jobs = [(img, read_keypoints(kp)) for img, kp in _pair_files(images, keypoints)]
    total = sum(len(k) for _, k in jobs)
    net = None
    if total:
        if not args.checkpoint:
            raise ConfigError("checkpoint", "describing keypoints needs --checkpoint")
        with open(args.checkpoint, "rb") as f:
            net, _ = DescriptorNet.load(f)
    spec = GridSpec(cfg.L, cfg.lam, cfg.grid_kind)
    descs, counts = [], []
    for img_path, kps in jobs:
        counts.append((img_path.name, len(kps)))
        if kps:
            patches = image_patches(read_image(img_path), kps, spec)
            descs.append(describe_array(net, patches))
    desc = np.concatenate(descs) if descs else np.zeros((0, 128), np.float32)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "wb") as f:
        write_descriptors(f, desc)
    write_sidecar(out, cfg, counts)
    _snapshot(out.parent, cfg)
    print(f"wrote {len(desc)} descriptors to {out}")


def _load_desc(path) -> np.ndarray:
    with open(path, "rb") as f:
        return read_descriptors(f)


def _check_compatible(*paths):
    metas = [read_sidecar(p) for p in paths if p]
    metas = [m for m in metas if m]
    for key in ("grid_kind", "lambda", "L"):
        vals = {m.get(key) for m in metas}
        if len(vals) > 1:
            raise ConfigError(key, f"descriptor files disagree: {sorted(vals)}")
    return metas[0] if metas else {}


def _scores_from_args(args) -> tuple[ev.MatchScores, dict]:
    if args.scores:
        return ev.read_scores_csv(args.scores), {}
    if not (args.desc_a and args.desc_b and args.corr):
        raise UsageError("give --scores, or all of --desc-a, --desc-b and --corr")
    meta = _check_compatible(args.desc_a, args.desc_b)
    da, db = _load_desc(args.desc_a), _load_desc(args.desc_b)
    corr = parse_correspondences(Path(args.corr).read_text()).records
    if not corr:
        raise ValueError("correspondence file is empty")
    ia = np.array([c.idx_a for c in corr])
    ib = np.array([c.idx_b for c in corr])
    if ia.max() >= len(da) or ib.max() >= len(db):
        raise ValueError("correspondence index beyond the descriptor files")
    fa, fb = da[ia], db[ib]
    pos = np.linalg.norm(fa - fb, axis=1)
    neg = [np.linalg.norm(fa - np.roll(fb, -s, 0), axis=1)
           for s in range(1, min(args.neg_shifts, len(corr) - 1) + 1)]
    if not neg:
        raise ValueError("need at least two correspondences to form negatives")
    return ev.MatchScores(pos, np.concatenate(neg), [c.scale_ratio for c in corr],
                          [c.orientation_residual for c in corr]), meta


def _out_file(args, default: str) -> Path | None:
    if not args.out:
        return None
    out = Path(args.out)
    if out.suffix != ".csv":
        out.mkdir(parents=True, exist_ok=True)
        out = out / default
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
    return out


def cmd_eval_fpr95(args, cfg):
    scores, meta = _scores_from_args(args)
    rate = ev.fpr95(scores)
    print(rate)
    out = _out_file(args, "fpr95.csv")
    if out:
        ev.write_global_csv(out, [{"method": args.method, "lambda": meta.get("lambda", ""),
                                   "grid_kind": meta.get("grid_kind", ""), "fpr95": repr(rate),
                                   "positives": scores.positive.size,
                                   "negatives": scores.negative.size}])
        _snapshot(out.parent, cfg)


def cmd_eval_bins(args, cfg):
    scores, _ = _scores_from_args(args)
    grid = ev.binned_fpr95(scores)
    for c in grid.cells:
        if c.fpr95 is not None:
            flag = " (low confidence)" if c.low_confidence else ""
            print(f"r [{c.scale_lo}, {c.scale_hi}] orient [{c.orient_lo}, {c.orient_hi}]: "
                  f"{c.fpr95:.4f} n={c.count}{flag}")
    out = _out_file(args, "bins.csv")
    if out:
        ev.write_bins_csv(out, grid)
        _snapshot(out.parent, cfg)


def cmd_eval_retrieval(args, cfg):
    meta = _check_compatible(args.desc_a, args.desc_b, args.distractors)
    da, db = _load_desc(args.desc_a), _load_desc(args.desc_b)
    corr = parse_correspondences(Path(args.corr).read_text()).records
    if not corr:
        raise ValueError("correspondence file is empty")
    q = da[[c.idx_a for c in corr]]
    m = db[[c.idx_b for c in corr]]
    dis = _load_desc(args.distractors) if args.distractors else None
    res = ev.retrieval_ranks(q, m, dis)
    print(f"rank-1 {res.rank1:.4f} mean rank {res.ranks.mean():.2f} over {len(res.ranks)} queries")
    out = _out_file(args, "retrieval.csv")
    if out:
        ev.write_global_csv(out, [{"method": "model", "lambda": meta.get("lambda", ""),
                                   "grid_kind": meta.get("grid_kind", ""), "rank1": repr(res.rank1),
                                   "positives": len(q)}])
        with open(out.with_name(out.stem + "_cdf.csv"), "w") as f:
            f.write("rank,cdf\n")
            for k, v in enumerate(res.cdf(), 1):
                f.write(f"{k},{v!r}\n")
        _snapshot(out.parent, cfg)


def cmd_gradcheck(args, cfg):
    errs = checks.gradcheck(cfg.seed)
    for name, err in errs.items():
        print(f"{name:20s} {err:.3e}")
    worst = max(errs.values())
    print(f"worst relative error {worst:.3e}")
    if worst >= checks.GRAD_TOL:
        raise RuntimeError(f"gradient check failed: {worst:.3e} >= {checks.GRAD_TOL}")


def cmd_selfcheck(args, cfg):
    results = checks.selfcheck(cfg.seed)
    for name, ok in results.items():
        print(f"{'PASS' if ok else 'FAIL'}  {name}")
    if not all(results.values()):
        raise RuntimeError("selfcheck failed")


COMMANDS = {
    "synth": cmd_synth, "train": cmd_train, "describe": cmd_describe,
    "eval-fpr95": cmd_eval_fpr95, "eval-bins": cmd_eval_bins,
    "eval-retrieval": cmd_eval_retrieval, "gradcheck": cmd_gradcheck, "selfcheck": cmd_selfcheck,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args = build_parser().parse_args(argv)
        cfg = _config(args)
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
    except (UsageError, ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    try:
        with threadpool_limits(args.threads):
            COMMANDS[args.command](args, cfg)
    except (ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - any other failure is a runtime error
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
