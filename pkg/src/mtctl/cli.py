"""Command-line entry points: synth, train, eval, predict, compare.

Exit codes: 0 success, 2 usage or configuration error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch
import yaml

from .errors import ConfigError, MTCTLError, NumericsError
from .losses import LossWeights
from .metrics import MetricReport, case_metrics, paired_test
from .network import NetConfig
from .trainer import (
    TrainConfig,
    TrainData,
    evaluate,
    fit,
    init_state,
    load_checkpoint,
    predict,
    save_checkpoint,
)
from .transforms import binarize
from .uncertainty import LN2, McConfig, entropy_map, mc_sample
from .volumes import (
    BinaryMask,
    ManifestEntry,
    PhantomSpec,
    Volume,
    load_cases,
    load_mask,
    load_volume,
    make_phantom,
    normalize,
    read_manifest,
    resize,
    save_map,
    save_mask,
    save_volume,
    split_dataset,
    write_manifest,
)

log = logging.getLogger("mtctl")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3


class UsageError(MTCTLError):
    """Bad command-line arguments or filesystem preconditions."""


# -- config -------------------------------------------------------------------

@dataclasses.dataclass(frozen=True)
class DataConfig:
    manifest: str
    labeled_fraction: float = 0.2
    split_seed: int = 0
    val_manifest: str | None = None


@dataclasses.dataclass(frozen=True)
class RunConfig:
    data: DataConfig
    out_dir: str
    net: NetConfig
    train: TrainConfig


def _build(cls, raw, where):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(raw).__name__}")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    try:
        return cls(**raw)
    except (TypeError, ValueError, MTCTLError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def load_run_config(path) -> RunConfig:
    """Parse a YAML run config. Relative paths resolve against the config file."""
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    unknown = sorted(set(raw) - {"data", "out_dir", "net", "train"})
    if unknown:
        raise ConfigError(f"{path}: unknown keys {unknown}")
    if "data" not in raw or "out_dir" not in raw:
        raise ConfigError(f"{path}: 'data' and 'out_dir' are required")
    base = path.parent

    def resolve(p):
        return None if p is None else str((base / p).resolve())

    data = _build(DataConfig, raw["data"], "data")
    data = dataclasses.replace(data, manifest=resolve(data.manifest), val_manifest=resolve(data.val_manifest))
    for p in (data.manifest, data.val_manifest):
        if p is not None and not Path(p).is_file():
            raise ConfigError(f"data: {p} does not exist")

    net_raw = dict(raw.get("net") or {})
    if "in_shape" in net_raw:
        net_raw["in_shape"] = tuple(net_raw["in_shape"])
    net = _build(NetConfig, net_raw, "net")

    train_raw = dict(raw.get("train") or {})
    nested = {"weights": LossWeights, "mc": McConfig}
    for key, cls in nested.items():
        if key in train_raw:
            train_raw[key] = _build(cls, train_raw[key], f"train.{key}")
    if "t_schedule" in train_raw:
        train_raw["t_schedule"] = tuple(train_raw["t_schedule"])
    train = _build(TrainConfig, train_raw, "train")
    return RunConfig(data, resolve(raw["out_dir"]), net, train)


# -- helpers ------------------------------------------------------------------

def _shape(text: str) -> tuple:
    try:
        dims = tuple(int(d) for d in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected D,H,W, got {text!r}")
    if len(dims) != 3:
        raise argparse.ArgumentTypeError(f"expected 3 dims, got {text!r}")
    return dims


def _out_ext(path: Path) -> str:
    return ".nii.gz" if path.name.endswith((".nii", ".nii.gz")) else ".mtv"


def _infer(net, volume: Volume):
    """Eval-mode forward at the network grid, resampled back to the input grid."""
    x = normalize(resize(volume, net.cfg.in_shape))
    seg, dist = predict(net, x.data)
    back = lambda a: resize(Volume(a), volume.shape).data
    return x, back(seg), back(dist)


def _load_net(ckpt):
    state, _ = load_checkpoint(ckpt)
    state.net.eval()
    return state.net


def _render(path, image, mask, uncertainty=None):
    """Mid-slice panels: mask overlay per slice, plus uncertainty-only panels when available."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    cuts = [("axial", lambda a: a[a.shape[0] // 2]), ("coronal", lambda a: a[:, a.shape[1] // 2])]
    rows = 2 if uncertainty is not None else 1
    fig, axes = plt.subplots(rows, 2, figsize=(8, 4 * rows), squeeze=False)
    for col, (name, cut) in enumerate(cuts):
        ax = axes[0, col]
        ax.imshow(cut(image), cmap="gray", vmin=-3, vmax=3)
        if uncertainty is not None:
            ax.imshow(cut(uncertainty), cmap="viridis", vmin=0, vmax=LN2, alpha=0.5)
        ax.contour(cut(mask), levels=[0.5], colors="r", linewidths=1)
        ax.set_title(f"{name}: prediction")
        if uncertainty is not None:
            ax = axes[1, col]
            im = ax.imshow(cut(uncertainty), cmap="viridis", vmin=0, vmax=LN2)
            ax.set_title(f"{name}: uncertainty")
            fig.colorbar(im, ax=ax, fraction=0.046)
    for ax in axes.flat:
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


# -- commands -----------------------------------------------------------------

def cmd_synth(args) -> int:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise UsageError(f"{out} exists and is not empty (use --force)")
    out.mkdir(parents=True, exist_ok=True)
    r_max = min(args.shape) / 4
    entries = []
    for i in range(args.n_cases):
        spec = PhantomSpec(args.shape, n_lobes=args.lobes, radius_range=(r_max / 2, r_max),
                           noise_sigma=args.noise, seed=args.seed * 100_003 + i)
        vol, mask = make_phantom(spec)
        cid = f"case{i:03d}"
        img, msk = out / f"{cid}_image.mtv", out / f"{cid}_mask.mtv"
        save_volume(vol, img)
        save_mask(mask, msk)
        entries.append(ManifestEntry(cid, img, msk))
    write_manifest(entries, out / "manifest.json")
    print(f"wrote {len(entries)} cases to {out / 'manifest.json'}")
    return EXIT_OK


def cmd_train(args) -> int:
    rc = load_run_config(args.config)
    out = Path(rc.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cases = load_cases(rc.data.manifest, target_shape=rc.net.in_shape)
    split = split_dataset(cases, rc.data.labeled_fraction, rc.data.split_seed)
    val = load_cases(rc.data.val_manifest, rc.net.in_shape, require_masks=True) if rc.data.val_manifest else []
    data = TrainData.from_cases(split.labeled, split.unlabeled)
    log.info("labeled %d, unlabeled %d, validation %d", len(split.labeled), len(split.unlabeled), len(val))

    if args.resume:
        state, _ = load_checkpoint(args.resume, rc.train)
        if state.net.cfg != rc.net:
            raise ConfigError("checkpoint network config differs from the run config")
        log.info("resuming at step %d", state.step)
    else:
        state = init_state(rc.net, rc.train)

    every = max(1, rc.train.max_iters // 20)
    def progress(step, bd):
        if step % every == 0:
            log.info("step %d total %.4f dice %.4f ct %.4f", step, bd.total, bd.dice, bd.cross_task)

    fit(state, data, rc.train, log_path=out / "train_log.ndjson", checkpoint_dir=out / "checkpoints",
        val_cases=val, on_step=progress)
    final = save_checkpoint(state, out / "final", rc.train)

    # without a validation manifest, report on the labeled training cases
    report = evaluate(state.net, val or split.labeled)
    report.to_csv(out / "report.csv")
    print(f"checkpoint: {final}")
    print("\n".join(report.summary_lines()))
    return EXIT_OK


def cmd_eval(args) -> int:
    net = _load_net(args.ckpt)
    entries = read_manifest(args.manifest)
    missing = [e.id for e in entries if e.mask is None]
    if missing:
        raise UsageError(f"cases without masks: {missing}")
    rows = []
    for e in entries:
        vol = load_volume(e.image, e.id)
        gt = load_mask(e.mask)
        _, seg, _ = _infer(net, vol)
        rows.append(case_metrics(e.id, binarize(seg), gt.data, vol.spacing))
    report = MetricReport(rows)
    report.to_csv(args.out)
    print("\n".join(report.summary_lines()))
    return EXIT_OK


def cmd_predict(args) -> int:
    if args.uncertainty is not None and args.uncertainty < 2:
        raise UsageError("--uncertainty needs at least 2 samples")
    net = _load_net(args.ckpt)
    src = Path(args.input)
    vol = load_volume(src)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ext = _out_ext(src)

    x, seg, dist = _infer(net, vol)
    mask = binarize(seg)
    save_mask(BinaryMask(mask), out / f"mask{ext}", vol.spacing)
    save_map(dist, out / f"distance{ext}", vol.spacing)
    u = None
    if args.uncertainty is not None:
        xt = torch.as_tensor(x.data[None, None], dtype=torch.float32)
        u = entropy_map(mc_sample(net, xt, args.uncertainty, seed=args.seed))[0, 0].numpy()
        u = np.clip(resize(Volume(u), vol.shape).data, 0.0, LN2)
        save_map(u, out / f"uncertainty{ext}", vol.spacing)
    _render(out / "slices.png", normalize(vol).data, mask, u)
    print(f"wrote predictions to {out}")
    return EXIT_OK


def cmd_compare(args) -> int:
    a, b = (MetricReport.from_csv(p) for p in args.reports)
    ids_a = [r.case_id for r in a.rows]
    ids_b = [r.case_id for r in b.rows]
    if sorted(ids_a) != sorted(ids_b) or len(set(ids_a)) != len(ids_a):
        raise UsageError("reports must cover the same unique case ids")
    by_id = {r.case_id: getattr(r, args.metric) for r in b.rows}
    va = np.array([getattr(r, args.metric) for r in a.rows])
    vb = np.array([by_id[i] for i in ids_a])
    ok = ~(np.isnan(va) | np.isnan(vb))
    if (~ok).any():
        log.warning("dropping %d cases with missing %s", int((~ok).sum()), args.metric)
    p = paired_test(va[ok], vb[ok], seed=args.seed)
    print(f"p_value={p:.10g}")
    print(f"mean_diff={float(np.mean(va[ok] - vb[ok])):.10g}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mtctl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write synthetic phantom cases and a manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--n-cases", type=int, required=True)
    p.add_argument("--shape", type=_shape, default=(32, 32, 32), help="D,H,W")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lobes", type=int, default=2)
    p.add_argument("--noise", type=float, default=0.3)
    p.add_argument("--force", action="store_true", help="write into a nonempty directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train from a YAML run config")
    p.add_argument("--config", required=True)
    p.add_argument("--resume", help="checkpoint directory to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a labeled manifest")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="report CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="segment one volume")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--uncertainty", type=int, metavar="N", help="MC dropout samples for the entropy map")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("compare", help="paired permutation test between two reports")
    p.add_argument("--reports", nargs=2, required=True, metavar=("A", "B"))
    p.add_argument("--metric", default="dice", choices=["dice", "jaccard", "hd95", "asd", "ravd", "precision", "recall"])
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s")
    threads = os.environ.get("MTCTL_NUM_THREADS")
    if threads:
        torch.set_num_threads(max(1, int(threads)))
    try:
        return args.func(args)
    except NumericsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (MTCTLError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
