"""Operator entry point: partition | train | gradcheck | inspect | report.

Every command is deterministic under a fixed configuration and seed, and
persists the fully resolved configuration next to its outputs.  Exit codes:
0 success, 1 validation error, 2 runtime or numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as C
from . import data as D
from . import fed as F
from . import interpret as I
from . import loss as L
from . import model as M
from . import tensor as T
from .errors import (ConfigurationError, DataError, FormatError, NumericError,
                     ProtoFedError, ProtocolError)

TEST_DIR = "site_test"
PRETRAIN_DIR = "pretrain"


def _load_config(args) -> C.RunConfig:
    cfg = C.load_config(args.config) if getattr(args, "config", None) else C.RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.fed.master_seed = args.seed
    if getattr(args, "rounds", None) is not None:
        cfg.fed.rounds = args.rounds
    if getattr(args, "variant", None):
        name = args.variant
        if name not in F.VARIANTS:
            raise ConfigurationError(
                f"unknown variant '{name}'; choose from {', '.join(sorted(F.VARIANTS))}"
            )
        ca, cp, prox = F.VARIANTS[name]
        cfg.fed = replace(cfg.fed, communicate_adapters=ca,
                          communicate_prototypes=cp, use_prox=prox)
    cfg.validate()
    return cfg


def build_datasets(cfg: C.RunConfig, data_dir=None):
    """(train sites, test site, pretrain site), generated or read from disk."""
    if data_dir is not None:
        root = Path(data_dir)
        train = []
        for i in range(cfg.fed.num_clients):
            site_dir = root / f"site_{i}"
            if not site_dir.exists():
                raise DataError(f"missing site directory {site_dir}")
            train.append(D.read_site(site_dir))
        test = D.read_site(root / TEST_DIR)
        pretrain_dir = root / PRETRAIN_DIR
        pretrain = D.read_site(pretrain_dir) if pretrain_dir.exists() else None
        return train, test, pretrain
    specs, test_spec, pretrain_spec = cfg.site_specs()
    hw = (cfg.data.image_size, cfg.data.image_size)
    glyph = cfg.glyph()
    cells = cfg.data.background_cells
    tex = cfg.data.texture_std
    train = [D.generate_site(s, hw, glyph=glyph, background_cells=cells, texture_std=tex)
             for s in specs]
    test = D.generate_site(test_spec, hw, glyph=glyph, background_cells=cells, texture_std=tex)
    pretrain = D.generate_site(pretrain_spec, hw, glyph=glyph, background_cells=cells,
                               texture_std=tex)
    if cfg.data.augment:
        train = [D.augmented_copy(ds, seed=cfg.fed.master_seed + i)
                 for i, ds in enumerate(train)]
    return train, test, pretrain


def _prepare_out(path: Path, force: bool, sentinel: str):
    path.mkdir(parents=True, exist_ok=True)
    if (path / sentinel).exists() and not force:
        raise ConfigurationError(
            f"output {path / sentinel} already exists; pass --force to overwrite"
        )


def cmd_partition(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise ConfigurationError(f"output directory {out} is not empty; pass --force")
    train, test, pretrain = build_datasets(cfg)
    for i, ds in enumerate(train):
        D.write_site(ds, out / f"site_{i}")
    D.write_site(test, out / TEST_DIR)
    D.write_site(pretrain, out / PRETRAIN_DIR)
    C.write_resolved(cfg, out / "resolved.cfg")
    print(f"wrote {len(train)} training sites + 1 test site to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    _prepare_out(out, args.force, "metrics.csv" if not args.grid else "variants.csv")
    train, test, pretrain = build_datasets(cfg, data_dir=args.data_dir)
    if cfg.model.freeze_mode == "warmup-pretrained" and pretrain is None:
        raise ConfigurationError("warmup-pretrained mode needs a pretrain dataset "
                                 "(regenerate the partition or drop --data-dir)")
    C.write_resolved(cfg, out / "resolved.cfg")
    model_cfg = cfg.model_config()
    if args.grid:
        rows = F.compare_variants(model_cfg, cfg.fed, cfg.loss, train, test,
                                  pretrain_site=pretrain, warmup_cfg=cfg.warmup_config(),
                                  out_dir=out, workers=args.workers)
        for row in rows:
            accs = " ".join(f"{k}={row[k]:.4f}" for k in row if k.startswith("client"))
            print(f"{row['variant']:16s} avg={row['avg']:.4f} {accs} "
                  f"payload={row['payload_bytes']}B ratio={row['payload_ratio']:.4f}")
        return 0
    report = F.run_federation(model_cfg, cfg.fed, cfg.loss, train, test,
                              pretrain_site=pretrain, warmup_cfg=cfg.warmup_config(),
                              out_dir=out, workers=args.workers,
                              dump_payloads=args.dump_payloads)
    print(f"finished {cfg.fed.rounds} rounds in {report.wall_seconds:.1f}s; "
          f"held-out accuracy per client: "
          + " ".join(f"{cid}={acc:.4f}" for cid, acc in sorted(report.final_test_acc.items()))
          + f" avg={report.avg_test_acc:.4f}")
    print(f"payload {report.payload_bytes} bytes/round/client; "
          f"checkpoint {report.checkpoint_bytes} bytes; "
          f"ratio {report.payload_ratio:.4f}")
    return 0


def _gradcheck_model():
    backbone = M.BackboneConfig(num_blocks=2, channels=(8, 8), in_channels=1,
                                image_hw=(16, 16), freeze_mode="frozen-random")
    return M.ModelConfig(backbone=backbone, adapter_rank=2, protos_per_class=2,
                         num_classes=2)


def run_gradcheck(seeds: int = 20, step: float = 1e-6, tolerance: float = 1e-5,
                  quiet: bool = False) -> bool:
    """Finite-difference checks for every primitive op and the composite loss."""
    overall = True

    def show(tag: str, seed: int, report):
        nonlocal overall
        overall = overall and report.passed
        if not quiet or not report.passed:
            status = "pass" if report.passed else "FAIL"
            print(f"[{status}] seed {seed:3d} {tag:16s} max_rel_err={report.max_rel_err:.3e}")
            if not report.passed:
                print(report.summary())

    def mean_of(node):
        # keep |f| ~ O(1): the finite-difference roundoff floor scales with
        # |f|, and per-coordinate gradients must stay above it
        return T.scale(T.sum_all(node), 1.0 / node.data.size)

    for seed in range(seeds):
        rng = np.random.default_rng(seed)
        x = T.Tensor(rng.normal(size=(1, 2, 5, 5)))
        k = T.Tensor(rng.normal(size=(3, 2, 3, 3)) * 0.4)
        b = T.Tensor(rng.normal(size=3) * 0.1)
        show("conv2d", seed, T.grad_check(
            lambda p: mean_of(T.conv2d(p["x"], p["k"], p["b"], stride=2, padding=1)),
            {"x": x, "k": k, "b": b}, step, tolerance))
        x2 = T.Tensor(rng.normal(size=(2, 2, 4, 4)))
        show("relu", seed, T.grad_check(
            lambda p: mean_of(T.relu(p["x"])), {"x": x2}, step, tolerance))
        x3 = T.Tensor(rng.normal(size=(1, 2, 6, 6)))
        show("maxpool2d", seed, T.grad_check(
            lambda p: mean_of(T.maxpool2d(p["x"], 2, 2)), {"x": x3}, step, tolerance))
        xl = T.Tensor(rng.normal(size=(3, 4)))
        wl = T.Tensor(rng.normal(size=(4, 2)))
        show("linear", seed, T.grad_check(
            lambda p: mean_of(T.linear(p["x"], p["w"])), {"x": xl, "w": wl},
            step, tolerance))
        xf = T.Tensor(rng.normal(size=(1, 3, 4, 4)))
        tf = T.Tensor(rng.normal(size=(3, 2, 2)))
        show("sliding_sq_l2", seed, T.grad_check(
            lambda p: mean_of(T.sliding_sq_l2(p["f"], p["t"])), {"f": xf, "t": tf},
            step, tolerance))

        model = M.PrototypeModel(_gradcheck_model(), seed=seed)
        for ad in model.adapters:
            ad.up.data[:] = rng.normal(size=ad.up.data.shape) * 0.1
        xin = T.Tensor(rng.uniform(size=(2, 1, 16, 16)))
        labels = rng.integers(0, 2, size=2)
        weights = L.LossWeights(beta=0.3, lambda_clst=0.8, lambda_sep=0.08,
                                gamma=0.05, mu1=0.2, mu2=0.4)
        ag = {kk: rng.normal(size=v.shape) for kk, v in model.params.arrays("alpha").items()}
        pg = {kk: rng.normal(size=v.shape) for kk, v in model.params.arrays("phi").items()}

        def composite(_):
            logits, dmaps, _ = model.forward(xin)
            total, _ = L.local_loss(logits, dmaps, labels, model.params,
                                    model.proto_layer, model.head, weights,
                                    alpha_global=ag, phi_global=pg)
            return total

        point = {**model.params.alpha, **model.params.phi}
        show("composite_loss", seed, T.grad_check(composite, point, step, tolerance))
    return overall


def cmd_gradcheck(args) -> int:
    ok = run_gradcheck(seeds=args.seeds, step=args.step, tolerance=args.tolerance,
                       quiet=args.quiet)
    print("gradcheck: " + ("all checks passed" if ok else "FAILED"))
    if not ok:
        raise NumericError("gradient check failed")
    return 0


def _load_run_models(run_dir: Path):
    cfg = C.load_config(run_dir / "resolved.cfg")
    model_cfg = cfg.model_config()
    ckpt_dir = run_dir / "checkpoints"
    if not ckpt_dir.exists():
        raise ConfigurationError(f"{run_dir} has no checkpoints/ directory")

    def load(path):
        template = M.PrototypeModel(model_cfg, seed=cfg.fed.master_seed)
        template.freeze_backbone()
        M.apply_checkpoint(template, M.load_checkpoint(path))
        return template

    global_model = load(ckpt_dir / "global.ckpt")
    clients = []
    for i in range(cfg.fed.num_clients):
        path = ckpt_dir / f"client_{i}.ckpt"
        if path.exists():
            clients.append(load(path))
    return cfg, global_model, clients


def cmd_inspect(args) -> int:
    run_dir = Path(args.run)
    cfg, global_model, clients = _load_run_models(run_dir)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    percentile = args.percentile if args.percentile is not None else cfg.interpret.percentile
    top_k = args.top_k if args.top_k is not None else cfg.interpret.top_k

    if args.images:
        images = [D.load_pnm(p) for p in args.images]
        boxes = [None] * len(images)
    else:
        if args.data_dir:
            test = D.read_site(Path(args.data_dir) / TEST_DIR)
        else:
            _, test, _ = build_datasets(cfg)
        keep = [i for i in range(len(test)) if test.labels[i] == 1]
        if args.limit:
            keep = keep[: args.limit]
        images = [test.images[i] for i in keep]
        boxes = [test.boxes[i] for i in keep]

    models = {"global": global_model}
    models.update({f"client_{i}": m for i, m in enumerate(clients)})

    iou_rows = []
    agree_rows = []
    for idx, (img, truth) in enumerate(zip(images, boxes)):
        for tag, m in models.items():
            I.explain(img, m, top_k=top_k, out_dir=out, stem=f"img{idx:04d}_{tag}",
                      percentile=percentile)
        if truth is not None:
            act = I.top_activation_for_class(img, global_model, class_id=1,
                                             percentile=percentile)
            iou_rows.append({"image": idx, "iou": I.iou(act.box, truth),
                             "box_x": act.box[0], "box_y": act.box[1],
                             "box_w": act.box[2], "box_h": act.box[3]})
        if len(clients) >= 2:
            mat = I.cross_client_agreement(img, clients, percentile=percentile)
            agree_rows.append({"image": idx, "mean_iou": I.mean_off_diagonal(mat)})
            with open(out / f"img{idx:04d}_agreement.csv", "w", newline="") as f:
                w = csv.writer(f)
                w.writerow([f"client_{j}" for j in range(len(clients))])
                for row in mat:
                    w.writerow([repr(v) for v in row])

    if iou_rows:
        with open(out / "iou_summary.csv", "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=list(iou_rows[0]))
            w.writeheader()
            w.writerows(iou_rows)
        hits = sum(1 for r in iou_rows if r["iou"] >= 0.3)
        print(f"localization: {hits}/{len(iou_rows)} diseased images with IoU >= 0.3 "
              f"({hits / len(iou_rows):.1%})")
    if agree_rows:
        mean_agree = float(np.mean([r["mean_iou"] for r in agree_rows]))
        print(f"cross-client agreement: mean off-diagonal IoU {mean_agree:.4f} "
              f"over {len(agree_rows)} images")
    print(f"explanations written to {out}")
    return 0


def cmd_report(args) -> int:
    rows = []
    for run in args.runs:
        run_dir = Path(run)
        metrics = run_dir / "metrics.csv"
        if not metrics.exists():
            raise DataError(f"run {run_dir} has no metrics.csv")
        with open(metrics, newline="") as f:
            records = list(csv.DictReader(f))
        if not records:
            raise DataError(f"{metrics} is empty")
        last_round = max(int(r["round"]) for r in records)
        final = {int(r["client"]): r for r in records if int(r["round"]) == last_round}
        row = {"run": run_dir.name}
        for cid in sorted(final):
            row[f"client_{cid}"] = float(final[cid]["test_acc"])
        accs = [float(final[cid]["test_acc"]) for cid in sorted(final)]
        row["avg"] = float(np.mean(accs))
        payload = [int(final[cid]["payload_bytes"]) for cid in sorted(final)
                   if final[cid]["payload_bytes"]]
        row["payload_bytes"] = payload[0] if payload else 0
        ckpt = run_dir / "checkpoints" / "global.ckpt"
        row["payload_ratio"] = (row["payload_bytes"] / ckpt.stat().st_size
                                if ckpt.exists() and row["payload_bytes"] else 0.0)
        rows.append(row)

    fields: list[str] = []
    for row in rows:
        for k in row:
            if k not in fields:
                fields.append(k)
    for row in rows:
        line = " ".join(f"{k}={row.get(k, '')}" for k in fields)
        print(line)
        if row["payload_ratio"]:
            print(f"  payload/checkpoint ratio: {row['payload_ratio']:.4f}")
    if args.out:
        with open(args.out, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=fields)
            w.writeheader()
            for row in rows:
                w.writerow(row)
        print(f"table written to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="protofed",
        description="Desk-scale federated learning simulator with prototype-based "
                    "interpretability and adapter-only communication.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("partition", help="generate the synthetic multi-site dataset")
    p.add_argument("--config", help="configuration file (defaults apply if omitted)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="override the master seed")
    p.add_argument("--force", action="store_true", help="overwrite a non-empty directory")
    p.set_defaults(fn=cmd_partition)

    p = sub.add_parser("train", help="run the federated protocol")
    p.add_argument("--config", help="configuration file")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--data-dir", help="read sites written by 'partition' instead of generating")
    p.add_argument("--rounds", type=int, help="override the round count")
    p.add_argument("--seed", type=int, help="override the master seed")
    p.add_argument("--workers", type=int, default=1, help="concurrent clients per round")
    p.add_argument("--variant", help=f"algorithm variant: {', '.join(sorted(F.VARIANTS))}")
    p.add_argument("--grid", action="store_true", help="run the full variant grid")
    p.add_argument("--dump-payloads", action="store_true", help="write per-round payloads")
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--step", type=float, default=1e-6)
    p.add_argument("--tolerance", type=float, default=1e-5)
    p.add_argument("--quiet", action="store_true", help="print failures only")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("inspect", help="render prototype explanations for a run")
    p.add_argument("--run", required=True, help="run directory from 'train'")
    p.add_argument("--out", required=True, help="output directory for overlays/CSVs")
    p.add_argument("--data-dir", help="partition directory holding the test site")
    p.add_argument("--images", nargs="*", help="explicit PNM image paths")
    p.add_argument("--top-k", type=int, dest="top_k")
    p.add_argument("--percentile", type=float)
    p.add_argument("--limit", type=int, help="max diseased test images to explain")
    p.set_defaults(fn=cmd_inspect)

    p = sub.add_parser("report", help="final-accuracy table across runs")
    p.add_argument("runs", nargs="+", help="run directories")
    p.add_argument("--out", help="write the table as CSV")
    p.set_defaults(fn=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigurationError, DataError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (NumericError, ProtocolError) as exc:
        print(f"failure: {exc}", file=sys.stderr)
        return 2
    except ProtoFedError as exc:
        print(f"failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
