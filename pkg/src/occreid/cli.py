"""Command-line entry point: ``occreid <command> [flags]``.

Configuration comes from three layers, later ones winning: built-in
defaults, a ``key = value`` file (``--config``), then command-line flags.
Keys are section-qualified (``model.dim``, ``train.epochs``,
``loss.margin``, ``synthetic.num_ids``); run-level keys are ``data``,
``layout``, ``obstacles``, ``out`` and ``seed``.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .augment import augment_batch, load_obstacles
from .checkpoint import load_checkpoint
from .data import Dataset, SyntheticSpec, generate_synthetic, load_dataset, make_obstacle_set, read_image, write_image
from .errors import ConfigError, ReIDError
from .evaluation import attention_mask_mass, downsample_mask, embed, evaluate, rank_list
from .gradcheck import run_gradcheck
from .losses import LossConfig
from .model import ModelConfig
from .train import TrainConfig, fit, model_from_checkpoint
from .transformer import attention_maps

log = logging.getLogger("occreid")

# fields that are derived from the data or from other keys, never set directly
_DERIVED = {
    "model": {"height", "width", "num_classes", "pixel_mean", "pixel_std"},
    "train": {"seed", "loss"},
    "synthetic": {"seed"},
    "loss": set(),
}
_SYNTH_ALIASES = {"ids": "num_ids", "images": "images_per_id", "test_ids": "num_test_ids",
                  "test_images": "test_images_per_id", "queries": "queries_per_id"}
_RUN_KEYS = {"data": None, "layout": "folders", "obstacles": None, "out": "runs/latest", "seed": 0}


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synthetic: SyntheticSpec | None = None
    data: str | None = None
    layout: str = "folders"
    obstacles: str | None = None
    out: str = "runs/latest"
    seed: int = 0

    def items(self) -> list[tuple[str, object]]:
        """Flat ``(key, value)`` view, the same keys the config file accepts."""
        rows = [(k, getattr(self, k)) for k in _RUN_KEYS]
        for section, obj in (("model", self.model), ("train", self.train), ("loss", self.train.loss),
                             ("synthetic", self.synthetic)):
            if obj is None:
                continue
            for f in dataclasses.fields(obj):
                if f.name not in _DERIVED[section]:
                    rows.append((f"{section}.{f.name}", getattr(obj, f.name)))
        return rows

    def dump(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in self.items())


def _format(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _coerce(key: str, raw, default):
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if text.lower() == "none" and (default is None or isinstance(default, str)):
            return None
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            kind = type(default[0]) if default else float
            return tuple(kind(s) for s in text.replace(" ", "").split(",") if s)
        if default is None:
            return int(text) if text.lstrip("-").isdigit() else text
        return text
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from None


def read_config_file(path: str | Path) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment."""
    out = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key = value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def parse_synthetic(spec: str) -> dict[str, str]:
    """``ids=8,height=64`` -> ``{"synthetic.num_ids": "8", ...}``; ``default`` -> {}."""
    out = {}
    spec = spec.strip()
    if spec in ("", "default", "1", "true"):
        return out
    for part in spec.split(","):
        if "=" not in part:
            raise ConfigError(f"--synthetic: expected key=value, got {part!r}")
        k, v = (s.strip() for s in part.split("=", 1))
        out[f"synthetic.{_SYNTH_ALIASES.get(k, k)}"] = v
    return out


def build_run_config(overrides: dict[str, object], use_synthetic: bool = False) -> RunConfig:
    """Apply flat overrides on top of the defaults; unknown keys are errors."""
    overrides = dict(overrides)
    if "synthetic" in overrides:
        use_synthetic = True
        overrides.update(parse_synthetic(str(overrides.pop("synthetic"))))
    sections: dict[str, dict] = {"model": {}, "train": {}, "loss": {}, "synthetic": {}}
    run = dict(_RUN_KEYS)
    defaults = {"model": ModelConfig(), "train": TrainConfig(), "loss": LossConfig(), "synthetic": SyntheticSpec()}
    for key, raw in overrides.items():
        section, _, name = key.partition(".")
        if not name:
            if key not in _RUN_KEYS:
                raise ConfigError(f"unknown config key {key!r}")
            run[key] = _coerce(key, raw, _RUN_KEYS[key] if _RUN_KEYS[key] is not None else None)
            continue
        if section not in sections:
            raise ConfigError(f"unknown config section in {key!r}")
        if section == "synthetic":
            use_synthetic = True
            name = _SYNTH_ALIASES.get(name, name)
        names = {f.name for f in dataclasses.fields(defaults[section])}
        if name not in names or name in _DERIVED[section]:
            raise ConfigError(f"unknown config key {key!r}")
        sections[section][name] = _coerce(key, raw, getattr(defaults[section], name))
    seed = int(run["seed"])
    loss = LossConfig(**sections["loss"])
    train = TrainConfig(**sections["train"], seed=seed, loss=loss)
    model = ModelConfig(**sections["model"])
    synthetic = SyntheticSpec(**sections["synthetic"], seed=seed) if use_synthetic else None
    return RunConfig(model, train, synthetic, run["data"], run["layout"], run["obstacles"], run["out"], seed)


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

_FLAG_KEYS = {"seed": "seed", "data": "data", "out": "out", "nq": "model.num_queries",
              "heads": "model.heads", "dim": "model.dim", "k": "train.k", "lam": "loss.lam",
              "alpha": "loss.alpha", "margin": "loss.margin", "epochs": "train.epochs"}


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--seed", type=int)
    p.add_argument("--data", help="dataset root with train/ query/ gallery/ (or a manifest)")
    p.add_argument("--synthetic", nargs="?", const="default",
                   help="use a generated dataset, e.g. ids=8,height=64,width=32")
    p.add_argument("--out", help="output directory")
    p.add_argument("--nq", type=int, help="object queries (ID queries + 1 occlusion query)")
    p.add_argument("--layers", type=int, help="encoder and decoder layers")
    p.add_argument("--heads", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--k", type=int, help="obstacles per batch")
    p.add_argument("--lambda", dest="lam", type=float, help="reverse-triplet weight")
    p.add_argument("--alpha", type=float, help="decorrelation weight")
    p.add_argument("--margin", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="any other config key, repeatable")
    p.add_argument("-v", "--verbose", action="store_true")


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="occreid", description="Occluded person re-identification toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model")
    _common(p)
    p.add_argument("--resume", help="checkpoint to continue from")

    for name, text in (("eval", "evaluate a checkpoint on query/gallery"),
                       ("rank", "top-n rank list for one query"),
                       ("attn-dump", "per-query attention maps for one image")):
        p = sub.add_parser(name, help=text)
        _common(p)
        p.add_argument("--checkpoint", required=True)
        if name == "rank":
            p.add_argument("--query-index", type=int, default=0)
            p.add_argument("--top", type=int, default=10)
        if name == "attn-dump":
            p.add_argument("--image", help="image file; default is a query image from the dataset")
            p.add_argument("--mask", help="optional occlusion mask image for --image")
            p.add_argument("--query-index", type=int, default=0)
            p.add_argument("--layer", type=int, default=-1)

    p = sub.add_parser("augment-preview", help="write occluded copies of a few training images")
    _common(p)
    p.add_argument("--count", type=int, default=4)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op and loss")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seeds", type=int, default=5, help="number of seeds per case")
    p.add_argument("--tol", type=float, default=1e-4)
    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    overrides: dict[str, object] = {}
    if args.config:
        overrides.update(read_config_file(args.config))
    use_synth = args.synthetic is not None
    if use_synth:
        overrides.update(parse_synthetic(args.synthetic))
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    for attr, key in _FLAG_KEYS.items():
        v = getattr(args, attr, None)
        if v is not None:
            overrides[key] = v
    if args.layers is not None:
        overrides["model.enc_layers"] = overrides["model.dec_layers"] = args.layers
    return build_run_config(overrides, use_synth)


def _echo(cfg: RunConfig, out: Path | None) -> None:
    text = cfg.dump()
    print("# effective configuration")
    print(text, end="")
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(text)


def load_data(cfg: RunConfig, height: int | None = None, width: int | None = None) -> Dataset:
    if cfg.data:
        kw = {}
        if height is not None:
            kw = {"height": height, "width": width}
        return load_dataset(cfg.data, cfg.layout, **kw)
    if cfg.synthetic is not None:
        spec = cfg.synthetic
        if height is not None:
            spec = dataclasses.replace(spec, height=height, width=width)
        return generate_synthetic(spec)
    raise ConfigError("no dataset: pass --data DIR or --synthetic")


def _obstacles(cfg: RunConfig):
    if cfg.obstacles:
        return load_obstacles(cfg.obstacles)
    return make_obstacle_set(cfg.train.num_obstacles, cfg.seed)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_train(args, cfg: RunConfig) -> int:
    out = Path(cfg.out)
    _echo(cfg, out)
    dataset = load_data(cfg)
    resume = load_checkpoint(args.resume) if args.resume else None
    obstacles = _obstacles(cfg) if cfg.train.osa else None
    model_cfg = dataclasses.replace(cfg.model, height=dataset.height, width=dataset.width)

    def progress(row):
        step, epoch = row[0], row[1]
        if args.verbose or (step + 1) % 10 == 0:
            log.info("step %d epoch %d lr %.2e total %.4f", step, epoch, row[2], row[-1])

    res = fit(dataset, cfg.train, model_cfg, obstacles, out, resume=resume, progress=progress)
    print(f"trained to step {res.step}; checkpoint {res.checkpoint_path}")
    return 0


def _load_model(path):
    model, mcfg = model_from_checkpoint(load_checkpoint(path))
    return model, mcfg


def cmd_eval(args, cfg: RunConfig) -> int:
    out = Path(cfg.out)
    _echo(cfg, out)
    model, mcfg = _load_model(args.checkpoint)
    dataset = load_data(cfg, mcfg.height, mcfg.width)
    report, _ = evaluate(model, dataset.query, dataset.gallery)
    for line in report.lines():
        print(line)
    report.write(out / "metrics.txt")
    np.savetxt(out / "ap.txt", np.asarray(report.ap), fmt="%.10f")
    return 0


def cmd_rank(args, cfg: RunConfig) -> int:
    out = Path(cfg.out)
    _echo(cfg, out)
    model, mcfg = _load_model(args.checkpoint)
    dataset = load_data(cfg, mcfg.height, mcfg.width)
    _, ranking = evaluate(model, dataset.query, dataset.gallery)
    idx, flags = rank_list(args.query_index, ranking, args.top)
    q = dataset.query[args.query_index]
    lines = ["rank\tgallery_index\tperson_id\tcamera_id\tdistance\tmatch"]
    for r, (g, ok) in enumerate(zip(idx, flags), 1):
        rec = dataset.gallery[g]
        lines.append(f"{r}\t{g}\t{rec.person_id}\t{rec.camera_id}\t{ranking.dist[args.query_index, g]:.6f}\t{int(ok)}")
    text = "\n".join(lines) + "\n"
    print(f"query {args.query_index}: person {q.person_id}, camera {q.camera_id}")
    print(text, end="")
    (out / f"ranklist_q{args.query_index}.tsv").write_text(text)
    return 0


def cmd_attn_dump(args, cfg: RunConfig) -> int:
    out = Path(cfg.out)
    _echo(cfg, out)
    model, mcfg = _load_model(args.checkpoint)
    if mcfg.kind != "transformer":
        raise ConfigError("attn-dump needs a transformer checkpoint")
    if args.image:
        pixels = read_image(args.image, mcfg.height, mcfg.width)
        mask = None
        if args.mask:
            mask = read_image(args.mask, mcfg.height, mcfg.width).mean(axis=0) > 0.5
    else:
        dataset = load_data(cfg, mcfg.height, mcfg.width)
        rec = dataset.query[args.query_index]
        pixels, mask = rec.pixels, rec.mask
    _, bundles = embed(model, pixels[None], return_bundles=True)
    bundle = bundles[0]
    summary = ["query\trole\tin_mask\tout_mask"]
    nq = bundle.F.shape[1]
    for j in range(nq):
        amap = attention_maps(bundle, j, args.layer, 0)
        np.savetxt(out / f"attn_q{j}.txt", amap, fmt="%.8f")
        role = "occlusion" if j == nq - 1 else "id"
        if mask is not None and mask.any():
            inside = attention_mask_mass(amap, mask)
            summary.append(f"{j}\t{role}\t{inside:.6f}\t{amap.sum() - inside:.6f}")
        else:
            summary.append(f"{j}\t{role}\t-\t-")
    if mask is not None:
        np.savetxt(out / "mask_cells.txt", downsample_mask(mask, bundle.height, bundle.width), fmt="%.4f")
    text = "\n".join(summary) + "\n"
    (out / "attn_summary.tsv").write_text(text)
    print(f"wrote {nq} attention grids ({bundle.height}x{bundle.width}) to {out}")
    print(text, end="")
    return 0


def cmd_augment_preview(args, cfg: RunConfig) -> int:
    out = Path(cfg.out)
    _echo(cfg, out)
    dataset = load_data(cfg)
    rng = np.random.default_rng([cfg.seed, 17])
    pick = rng.choice(len(dataset.train), size=min(args.count, len(dataset.train)), replace=False)
    samples = augment_batch([dataset.train[i] for i in pick], _obstacles(cfg), cfg.train.k, rng, pick)
    for n, s in enumerate(samples):
        tag = s.obstacle_id or "none"
        write_image(out / f"{n:03d}_src{s.source_index}_{tag}.png", s.pixels)
        if s.obstacle_id is not None:
            write_image(out / f"{n:03d}_src{s.source_index}_{tag}_mask.png",
                        np.repeat(s.occlusion_mask[None].astype(np.float32), 3, axis=0))
    print(f"wrote {len(samples)} samples ({len(pick)} sources x {cfg.train.k + 1}) to {out}")
    return 0


def cmd_gradcheck(args) -> int:
    lines = run_gradcheck(seeds=range(args.seed, args.seed + args.seeds), tol=args.tol)
    for line in lines:
        print(line)
    failed = [l.name for l in lines if not l.passed]
    print(f"{len(lines) - len(failed)}/{len(lines)} passed")
    return 1 if failed else 0


_COMMANDS = {"train": cmd_train, "eval": cmd_eval, "rank": cmd_rank, "attn-dump": cmd_attn_dump,
             "augment-preview": cmd_augment_preview}


def main(argv: Sequence[str] | None = None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if getattr(args, "verbose", False) else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "gradcheck":
        return cmd_gradcheck(args)
    try:
        cfg = config_from_args(args)
        return _COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"occreid {args.command}: usage error: {exc}", file=sys.stderr)
        return 2
    except ReIDError as exc:
        print(f"occreid {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
