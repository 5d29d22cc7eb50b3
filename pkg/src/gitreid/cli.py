"""Command-line entry point: ``gitreid {train,eval,gradcheck,ablate,params}``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as D
from . import retrieval as R
from .config import RunConfig
from .model import (GitConfig, build_model, count_params, inference_features,
                    load_checkpoint, preset, progressive_stages, save_checkpoint)
from .training import SGD, gradcheck_table, gradient_check, train_loop

logger = logging.getLogger("gitreid")


# -- datasets -----------------------------------------------------------------------------
def _load_split(cfg: RunConfig, root: str, size) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    records, _ = D.load_folder(root)
    return D.stack(records, size)


def load_train_data(cfg: RunConfig, gcfg: GitConfig):
    """Raw training images ``[B, C, H, W]`` in [0, 1], ids and cameras."""
    size = (gcfg.image_height, gcfg.image_width)
    if cfg["data.source"] == "synthetic":
        return D.stack(D.synth_dataset(cfg.synthetic_spec(*size, gcfg.channels)))
    if cfg["data.source"] == "folder":
        if not cfg["data.root"]:
            raise ValueError("data.source = folder needs data.root")
        return _load_split(cfg, cfg["data.root"], size)
    raise ValueError(f"unknown data.source {cfg['data.source']!r}")


def _stats_path(out_dir: Path) -> Path:
    return out_dir / "norm_stats.json"


def _features(model, images, mean, std):
    return inference_features(model, D.normalize(images, mean, std))


# -- commands ------------------------------------------------------------------------------
def cmd_train(cfg: RunConfig, out_dir: Path | None = None) -> dict:
    out_dir = Path(out_dir or cfg["output.dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    probe = cfg.git_config(classes=1)
    images, ids, cams = load_train_data(cfg, probe)
    labels, _ = D.relabel(ids)
    gcfg = cfg.git_config(classes=int(labels.max()) + 1)
    model = build_model(gcfg, seed=cfg["train.seed"])
    mean, std = D.channel_stats(images)
    _stats_path(out_dir).write_text(json.dumps({"mean": mean.tolist(), "std": std.tolist()}))
    (out_dir / "config.txt").write_text(cfg.dump())

    seed = cfg["train.seed"]
    flip_p, erase_p = cfg["augment.flip_p"], cfg["augment.erase_p"]

    def prepare(batch, step):
        return D.augment_batch(batch, seed, step, mean, std, flip_p, erase_p)

    def evaluate(m):
        rep = R.self_retrieval(_features(m, images, mean, std), labels)
        return {"rank1": rep.rank1, "mAP": rep.mAP}

    sampler = D.PKSampler(labels, cfg["train.p_ids"], cfg["train.k_imgs"], seed=seed)
    optimizer = SGD(model.parameters(), momentum=cfg["optim.momentum"], weight_decay=cfg["optim.weight_decay"])
    history = train_loop(model, images, labels, sampler, cfg.schedule(), cfg["train.epochs"], optimizer, out_dir,
                         prepare=prepare, evaluate=evaluate, eval_every=cfg["train.eval_every"],
                         alpha=cfg["train.alpha"], beta=cfg["train.beta"], triplet_mode=cfg["train.triplet_mode"])
    save_checkpoint(model, out_dir / "checkpoint.bin")
    final = evaluate(model)
    logger.info("trained %d steps, final loss %.4f, rank1 %.4f, mAP %.4f",
                len(history), history[-1]["loss"], final["rank1"], final["mAP"])
    return {"model": model, "history": history, "final": final, "out_dir": out_dir}


def cmd_eval(cfg: RunConfig, checkpoint, out_dir: Path | None = None) -> R.EvalReport:
    model = load_checkpoint(checkpoint)
    gcfg = model.config
    out_dir = Path(out_dir or cfg["output.dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    size = (gcfg.image_height, gcfg.image_width)
    stats_file = _stats_path(Path(checkpoint).parent)
    protocol = cfg["eval.protocol"]
    if protocol == "veri":
        q_img, q_ids, q_cams = _load_split(cfg, cfg["data.query_root"], size)
        g_img, g_ids, g_cams = _load_split(cfg, cfg["data.gallery_root"], size)
        pool = np.concatenate([q_img, g_img])
    else:
        pool, ids, cams = load_train_data(cfg, gcfg)
    if stats_file.exists():
        stats = json.loads(stats_file.read_text())
        mean, std = np.array(stats["mean"], np.float32), np.array(stats["std"], np.float32)
    else:
        mean, std = D.channel_stats(pool)
    if protocol == "veri":
        report = R.evaluate(_features(model, q_img, mean, std), q_ids, q_cams,
                            _features(model, g_img, mean, std), g_ids, g_cams,
                            cross_camera_filter=cfg["eval.cross_camera"])
    elif protocol == "vehicleid":
        report, _ = R.vehicleid_protocol(_features(model, pool, mean, std), ids, draws=cfg["eval.draws"],
                                         seed=cfg["train.seed"], split=cfg["eval.split"])
    elif protocol == "self":
        report = R.self_retrieval(_features(model, pool, mean, std), ids)
    else:
        raise ValueError(f"unknown eval.protocol {protocol!r}")
    (out_dir / "eval_report.txt").write_text(report.to_text() + "\n")
    report.write_csv(out_dir / "eval_report.csv")
    return report


def cmd_gradcheck(cfg: RunConfig, out_dir: Path | None = None) -> list[dict]:
    probe = cfg.git_config(classes=1)
    images, ids, _ = load_train_data(cfg, probe)
    labels, _ = D.relabel(ids)
    gcfg = cfg.git_config(classes=int(labels.max()) + 1)
    model = build_model(gcfg, seed=cfg["gradcheck.seed"])
    mean, std = D.channel_stats(images)
    batch = D.PKSampler(labels, cfg["train.p_ids"], cfg["train.k_imgs"], seed=cfg["gradcheck.seed"]).epoch(0)[0]
    x = D.normalize(images[batch], mean, std)
    report = gradient_check(model, x, labels[batch], samples=cfg["gradcheck.samples"],
                            seed=cfg["gradcheck.seed"], step=cfg["gradcheck.step"])
    rows = gradcheck_table(report)
    _write_rows(Path(out_dir or cfg["output.dir"]) / "gradcheck.csv", rows)
    return rows


def cmd_ablate(cfg: RunConfig, out_dir: Path | None = None) -> list[dict]:
    out_dir = Path(out_dir or cfg["output.dir"])
    rows = []
    for mode in ("baseline_global", "none", "global_to_local", "local_to_global", "interactive"):
        sub = RunConfig(dict(cfg.values), set(cfg.explicit))
        sub.set("model.coupling", mode)
        res = cmd_train(sub, out_dir / mode)
        rows.append({"coupling": mode, "final_loss": res["history"][-1]["loss"],
                     "rank1": res["final"]["rank1"], "mAP": res["final"]["mAP"]})
    _write_rows(out_dir / "ablation.csv", rows)
    return rows


def cmd_params(cfg: RunConfig | None = None) -> list[dict]:
    """Parameter counts (classifier head excluded) for the full-scale presets."""
    rows = []
    for size in ("tiny", "small", "base"):
        vit, git = preset(f"vit-{size}"), preset(size)
        rows.append({"model": f"{size}", "heads": git.heads, "depth": git.depth, "width": git.width,
                     "vit_params": count_params(vit, include_head=False),
                     "git_params": count_params(git, include_head=False)})
    for heads in (3, 6, 12):
        for depth in (12, 15, 18):
            git = GitConfig(image_height=256, image_width=256, patch=16, width=64 * heads, heads=heads,
                            depth=depth, stages=progressive_stages(depth // 3), classes=576)
            vit = GitConfig(**{**git.to_dict(), "coupling": "baseline_global"})
            rows.append({"model": f"H{heads}-D{depth}", "heads": heads, "depth": depth, "width": git.width,
                         "vit_params": count_params(vit, include_head=False),
                         "git_params": count_params(git, include_head=False)})
    if cfg is not None:
        g = cfg.git_config()
        rows.append({"model": "config", "heads": g.heads, "depth": g.depth, "width": g.width,
                     "vit_params": count_params(GitConfig(**{**g.to_dict(), "coupling": "baseline_global"}),
                                                include_head=False),
                     "git_params": count_params(g, include_head=False)})
    return rows


# -- output helpers -------------------------------------------------------------------------
def _write_rows(path: Path, rows: list[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def _print_rows(rows: list[dict]) -> None:
    cols = list(rows[0])

    def cell(v):
        if isinstance(v, float):
            return f"{v:.6g}"
        return str(v)

    widths = [max(len(c), *(len(cell(r[c])) for r in rows)) for c in cols]
    print("  ".join(c.ljust(w) for c, w in zip(cols, widths)))
    for r in rows:
        print("  ".join(cell(r[c]).ljust(w) for c, w in zip(cols, widths)))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gitreid", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("train", "eval", "gradcheck", "ablate", "params"):
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="key = value configuration file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        if name == "eval":
            p.add_argument("--checkpoint", type=Path, required=True)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    cfg = RunConfig.load(args.config, args.set)
    if args.command == "train":
        res = cmd_train(cfg)
        print(f"checkpoint: {res['out_dir'] / 'checkpoint.bin'}")
        _print_rows([{"final_loss": res["history"][-1]["loss"], **res["final"]}])
    elif args.command == "eval":
        report = cmd_eval(cfg, args.checkpoint)
        print(report.to_text())
    elif args.command == "gradcheck":
        rows = cmd_gradcheck(cfg)
        _print_rows(rows)
        return 0 if all(r["passed"] for r in rows) else 1
    elif args.command == "ablate":
        _print_rows(cmd_ablate(cfg))
    elif args.command == "params":
        rows = cmd_params(cfg)
        _print_rows(rows)
        out = Path(cfg["output.dir"])
        _write_rows(out / "params.csv", rows)
    return 0


if __name__ == "__main__":
    sys.exit(main())
