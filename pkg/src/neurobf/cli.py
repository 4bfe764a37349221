"""Command-line entry point: ``neurobf <command> [--config run.json] --out DIR``.

Every command resolves its configuration (file, then ``--seed``/``--scheme``/
``--fraction``/``--set`` overrides), checks its inputs before touching the
output directory, and writes ``config.json`` beside what it produces. Exit
code 2 means a configuration problem, 3 a data problem.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch

from .attacker import Attacker, evaluate_attacker, evaluate_uniform, train_attacker
from .baselines import (
    DauntlessScheme,
    DpImageAutoencoder,
    DpImageScheme,
    DpSimpleScheme,
    InstaHideScheme,
    random_obfuscator_scheme,
    train_dp_image,
)
from .config import RunConfig
from .container import encode_container, file_hash, git_blob_hash, load_container
from .data import Dataset, encode_pgm, generate_synthetic, pgm_name, rescale_for_display, split
from .errors import ConfigError, DataError, DomainError, NeurobfError
from .metrics import PrivacyReport, aggregate
from .nn import Rng
from .scheme import IdentityScheme, KeyedObfuscationScheme, Obfuscator, Scheme, unpatchify
from .training import Trainer, train_private_decoder, uniform_reid_loss
from .utility import UtilityReport, learning_curve, nested_subsets, run_utility, utility_table

EXIT_CONFIG = 2
EXIT_DATA = 3


class Outputs:
    """Files collected in memory and written only once a command succeeds."""

    def __init__(self, out: Path, cfg: RunConfig):
        self.out = out
        self.cfg = cfg
        self.files: dict[str, bytes] = {}

    def add(self, name: str, data) -> None:
        if isinstance(data, str):
            data = data.encode("utf-8")
        self.files[name] = data

    def add_json(self, name: str, obj) -> None:
        self.add(name, json.dumps(obj, sort_keys=True, indent=2) + "\n")

    def add_container(self, name: str, tensors: dict, metadata: dict | None = None) -> None:
        self.add(name, encode_container(tensors, metadata))

    def write(self) -> None:
        self.out.mkdir(parents=True, exist_ok=True)
        self.files["config.json"] = self.cfg.resolved().encode("utf-8")
        for name, data in sorted(self.files.items()):
            path = self.out / name
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp = path.with_name(path.name + ".tmp")
            tmp.write_bytes(data)
            os.replace(tmp, path)


def load_dataset(cfg: RunConfig) -> Dataset:
    if cfg.artifacts.dataset is not None:
        return Dataset.load(cfg.artifacts.require("dataset"))
    return generate_synthetic(cfg.data)


def provenance(cfg: RunConfig, **inputs) -> dict:
    out = {"config": git_blob_hash(cfg.resolved().encode("utf-8"))}
    for name, path in inputs.items():
        if path is not None:
            out[name] = file_hash(path)
    return out


def artifact_inputs(cfg: RunConfig) -> dict:
    a = cfg.artifacts
    return {"dataset": a.dataset, "obfuscator": a.obfuscator, "dp_image": a.dp_image, "attacker": a.attacker}


def build_scheme(cfg: RunConfig, rng: Rng) -> Scheme | None:
    """The configured scheme, or None for the forced-uniform reference."""
    sc = cfg.scheme_config
    sid = cfg.scheme.id
    if sid == "uniform-null":
        return None
    if sid == "identity":
        return IdentityScheme(sc)
    if sid == "dauntless":
        return DauntlessScheme(sc)
    if sid == "instahide":
        return InstaHideScheme(sc)
    if sid == "dp-simple":
        return DpSimpleScheme(sc, cfg.scheme.b)
    if sid == "dp-image":
        tensors, meta = load_container(cfg.artifacts.require("dp_image"))
        return DpImageScheme(sc, DpImageAutoencoder.from_tensors(tensors, meta), cfg.scheme.b)
    if sid == "obfuscator":
        tensors, meta = load_container(cfg.artifacts.require("obfuscator"))
        obf = Obfuscator.from_tensors(tensors, meta)
        obf.eval()
        return KeyedObfuscationScheme(obf, cfg.scheme.label_encoding)
    return random_obfuscator_scheme(sc, rng, cfg.scheme.label_encoding)


def _check_shapes(scheme: Scheme | None, ds: Dataset) -> None:
    if scheme is None:
        return
    h, w = ds.images.shape[1:]
    c = scheme.cfg
    if (h, w) != (c.height, c.width):
        raise ConfigError(f"scheme_config expects {c.height}x{c.width} images, dataset has {h}x{w}")


def _setup(cfg: RunConfig):
    """Dataset, scheme and the run's rng, derived in a fixed order."""
    root = Rng(cfg.seed)
    scheme_rng = root.spawn()
    ds = load_dataset(cfg)
    scheme = build_scheme(cfg, scheme_rng)
    _check_shapes(scheme, ds)
    return ds, scheme, root.spawn()


def cmd_gen_data(cfg: RunConfig, out: Outputs, args) -> None:
    ds = generate_synthetic(cfg.data)
    out.add_container("dataset.ckpt", ds.to_tensors(), {"synthetic_spec": json.dumps(cfg.to_dict()["data"], sort_keys=True)})


def cmd_train_obfuscator(cfg: RunConfig, out: Outputs, args) -> None:
    ds = load_dataset(cfg)
    sc = cfg.scheme_config
    if ds.images.shape[1:] != (sc.height, sc.width):
        raise ConfigError(f"scheme_config expects {sc.height}x{sc.width} images, dataset has {ds.images.shape[1:]}")
    out.out.mkdir(parents=True, exist_ok=True)
    log_path = out.out / "train_log.jsonl"
    state_path = out.out / "train_state.ckpt"
    if args.resume and state_path.is_file():
        trainer = Trainer.from_checkpoint(state_path, ds.images, log_path, steps=cfg.train.steps)
        lines = log_path.read_text().splitlines()[: trainer.step_count] if log_path.is_file() else []
        log_path.write_text("".join(line + "\n" for line in lines))
    else:
        log_path.write_text("")
        trainer = Trainer(ds.images, sc, cfg.train_config(), Rng(cfg.seed), log_path)
    trainer.run(state_path if cfg.train.checkpoint_every else None)
    history = [json.loads(line) for line in log_path.read_text().splitlines()]
    tail = [r["L_reid"] for r in history[-50:]]
    out.add_container("obfuscator.ckpt", trainer.obfuscator.tensors(), trainer.obfuscator.metadata())
    out.add_json(
        "train_report.json",
        {
            "steps": trainer.step_count,
            "final_L_reid": float(np.mean(tail)) if tail else None,
            "uniform_L_reid": uniform_reid_loss(cfg.train.batch),
            "final_L_rec": history[-1]["L_rec"] if history else None,
            "digests": trainer.digests(),
            "provenance": provenance(cfg, **artifact_inputs(cfg)),
        },
    )


def cmd_train_dp_image(cfg: RunConfig, out: Outputs, args) -> None:
    ds = load_dataset(cfg)
    root = Rng(cfg.seed)
    d = cfg.dp_image
    ae = DpImageAutoencoder(ds.images.shape[1], root.spawn(), latent=d.latent, width=d.width)
    ae, info = train_dp_image(ds.images, d.epochs, root.spawn(), ae, batch=d.batch)
    out.add_container("dp_image.ckpt", ae.tensors(), ae.metadata())
    out.add_json("dp_image_report.json", {**info, "provenance": provenance(cfg, **artifact_inputs(cfg))})


def _key_tensors(key) -> dict:
    if hasattr(key, "tensors"):
        return key.tensors()
    return {"key/weights": key.weights.numpy(), "key/seed": np.array([key.seed & 0xFFFFFFFF, key.seed >> 32], dtype=np.uint32)}


def cmd_encode(cfg: RunConfig, out: Outputs, args) -> None:
    ds, scheme, rng = _setup(cfg)
    if scheme is None:
        raise ConfigError("scheme.id: uniform-null only scores pairs; it cannot encode")
    key = scheme.sample_key(rng)
    z = scheme.encode_images(ds.images, key, rng)
    meta = {"scheme": json.dumps(scheme.describe(), sort_keys=True)}
    out.add_container("encoded.ckpt", {"encoded/tokens": z.numpy(), "encoded/labels": scheme.encode_labels(ds.labels, key)}, meta)
    if key is not None:
        out.add_container("key.ckpt", _key_tensors(key), meta)


def _attacker_labels(cfg: RunConfig, ds: Dataset):
    return ds.labels if cfg.attacker.use_labels else None


def cmd_train_attacker(cfg: RunConfig, out: Outputs, args) -> None:
    ds, scheme, rng = _setup(cfg)
    if scheme is None:
        raise ConfigError("scheme.id: the uniform reference has nothing to train")
    attacker = Attacker.for_scheme(scheme, cfg.attacker, rng.spawn())
    attacker, log = train_attacker(scheme, ds.images, _attacker_labels(cfg, ds), cfg.eval.epochs, rng, cfg.attacker, attacker)
    out.add_container("attacker.ckpt", attacker.tensors(), attacker.metadata())
    out.add_json("attacker_log.json", {"epoch_loss": log.epoch_loss, "key_seeds": log.key_seeds, "scheme": scheme.describe()})


def cmd_attack(cfg: RunConfig, out: Outputs, args) -> None:
    ds, scheme, rng = _setup(cfg)
    e = cfg.eval
    if e.n_eval > len(ds):
        raise ConfigError(f"eval.n_eval={e.n_eval} exceeds the {len(ds)} images available")
    if scheme is None:
        trials = evaluate_uniform(e.n_eval, e.data_samples, e.keys)
        name = "uniform-null"
    else:
        labels = _attacker_labels(cfg, ds)
        if cfg.artifacts.attacker is not None:
            tensors, meta = load_container(cfg.artifacts.require("attacker"))
            attacker = Attacker.from_tensors(tensors, meta)
        else:
            attacker = Attacker.for_scheme(scheme, cfg.attacker, rng.spawn())
            attacker, _ = train_attacker(scheme, ds.images, labels, e.epochs, rng, cfg.attacker, attacker)
        trials = evaluate_attacker(attacker, scheme, ds.images, labels, e.n_eval, e.data_samples, e.keys, rng)
        name = scheme.name
    report = aggregate(trials, name, provenance(cfg, **artifact_inputs(cfg)))
    out.add("privacy.json", report.to_json() + "\n")


def _splits(cfg: RunConfig, ds: Dataset, rng: Rng):
    return split(ds, cfg.splits.ratios, rng)


def cmd_utility(cfg: RunConfig, out: Outputs, args) -> None:
    ds, scheme, rng = _setup(cfg)
    if scheme is None:
        raise ConfigError("scheme.id: uniform-null has no released data to learn from")
    train, dev, test = _splits(cfg, ds, rng)
    fraction = args.fraction if args.fraction is not None else 1.0
    if fraction != 1.0:
        (idx,) = nested_subsets(train.labels, [fraction], rng)
        train = train.subset(idx)
    report = run_utility(scheme, train, dev, test, cfg.classifier, rng, seed=cfg.seed)
    report.fraction = float(fraction)
    out.add_json("utility.json", report.to_dict())


def cmd_learning_curve(cfg: RunConfig, out: Outputs, args) -> None:
    ds, scheme, rng = _setup(cfg)
    if scheme is None:
        raise ConfigError("scheme.id: uniform-null has no released data to learn from")
    fractions = [args.fraction] if args.fraction is not None else list(cfg.fractions)
    train, dev, test = _splits(cfg, ds, rng)
    reports = learning_curve(scheme, train, dev, test, fractions, cfg.classifier, rng, seed=cfg.seed)
    out.add_json("learning_curve.json", [r.to_dict() for r in reports])


def render_tokens(tokens: torch.Tensor, scheme: Scheme) -> np.ndarray:
    """Token grids as images: back onto the pixel grid when shapes allow."""
    c = scheme.cfg
    z = tokens.detach().float()
    if z.shape[2] == c.patch_dim:
        img = unpatchify(z, c.height, c.width, c.patch)
    else:
        img = z
    return rescale_for_display(img.numpy())


def cmd_export_images(cfg: RunConfig, out: Outputs, args) -> None:
    ds, scheme, rng = _setup(cfg)
    if scheme is None:
        raise ConfigError("scheme.id: uniform-null has no images to export")
    count = min(cfg.export.count, len(ds))
    key = scheme.sample_key(rng)
    z = scheme.encode_images(ds.images, key, rng)
    groups = {"raw": ds.images[:count], "encoded": render_tokens(z[:count], scheme)}
    if isinstance(scheme, KeyedObfuscationScheme) and cfg.export.decoder_epochs > 0:
        decoder, info = train_private_decoder(ds.images, scheme.obfuscator, key, cfg.export.decoder_epochs, rng)
        with torch.no_grad():
            groups["reconstructed"] = decoder(z[:count]).numpy()
        out.add_json("decoder_report.json", {k: v for k, v in info.items()})
    for name, images in groups.items():
        for i, img in enumerate(images):
            out.add(f"{name}/{pgm_name(name, i)}", encode_pgm(img))


def _load_report(path: Path):
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError:
        raise DataError(f"no such report: {path}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from None
    items = data if isinstance(data, list) else [data]
    privacy, utility = [], []
    for item in items:
        if isinstance(item, dict) and "guesswork" in item:
            privacy.append(PrivacyReport.from_dict(item))
        elif isinstance(item, dict) and "auc" in item:
            utility.append(UtilityReport.from_dict(item))
        else:
            raise DataError(f"{path}: not a privacy or utility report")
    return privacy, utility


def privacy_table(reports) -> str:
    width = max([len("scheme")] + [len(r.scheme) for r in reports])
    lines = [f"{'scheme'.ljust(width)}  {'n':>6}  {'guesswork':>10}  {'95% CI':>21}  {'ReID AUC':>8}  {'95% CI':>15}"]
    for r in reports:
        g, a = r.guesswork, r.reid_auc
        lines.append(
            f"{r.scheme.ljust(width)}  {r.n:>6d}  {g.mean:>10.1f}  [{g.ci[0]:>8.1f}, {g.ci[1]:>8.1f}]  {a.mean:>8.3f}  [{a.ci[0]:.3f}, {a.ci[1]:.3f}]"
        )
    return "\n".join(lines)


def cmd_report(cfg: RunConfig, out: Outputs, args) -> None:
    if not args.inputs:
        raise ConfigError("report needs at least one report file")
    privacy, utility = [], []
    for path in args.inputs:
        p, u = _load_report(Path(path))
        privacy += p
        utility += u
    parts = []
    if privacy:
        parts.append("privacy\n" + privacy_table(privacy))
    if utility:
        parts.append("utility (test AUC)\n" + utility_table(utility))
    text = "\n\n".join(parts) + "\n"
    out.add("report.txt", text)
    sys.stdout.write(text)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-obfuscator": cmd_train_obfuscator,
    "train-dp-image": cmd_train_dp_image,
    "encode": cmd_encode,
    "train-attacker": cmd_train_attacker,
    "attack": cmd_attack,
    "utility": cmd_utility,
    "learning-curve": cmd_learning_curve,
    "export-images": cmd_export_images,
    "report": cmd_report,
}
ALIASES = {"train-obfuscator": ["train-syfer"]}


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration (JSON)")
    common.add_argument("--seed", type=int, help="override the run seed")
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--scheme", help="override scheme.id")
    common.add_argument("--fraction", type=float, help="training fraction (utility, learning-curve)")
    common.add_argument("--data", help="dataset container (sets artifacts.dataset)")
    common.add_argument("--set", action="append", default=[], metavar="FIELD=VALUE", help="override one config field, e.g. train.steps=10")
    parser = argparse.ArgumentParser(prog="neurobf", description="Keyed obfuscation experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common], aliases=ALIASES.get(name, []))
        if name == "train-obfuscator":
            p.add_argument("--resume", action="store_true", help="continue from OUT/train_state.ckpt")
        if name == "report":
            p.add_argument("inputs", nargs="*", help="privacy/utility report JSON files")
    return parser


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = cfg.override("seed", args.seed)
    if args.scheme is not None:
        cfg = cfg.override("scheme.id", args.scheme)
    if args.data is not None:
        cfg = cfg.override("artifacts.dataset", args.data)
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects FIELD=VALUE, got {item!r}")
        name, value = item.split("=", 1)
        cfg = cfg.override(name.strip(), _parse_value(value))
    if args.fraction is not None and not 0.0 < args.fraction <= 1.0:
        raise ConfigError(f"--fraction must lie in (0, 1], got {args.fraction}")
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    threads = os.environ.get("OBF_NUM_THREADS")
    if threads:
        try:
            torch.set_num_threads(max(1, int(threads)))
        except ValueError:
            print(f"error: OBF_NUM_THREADS must be an integer, got {threads!r}", file=sys.stderr)
            return EXIT_CONFIG
    command = next(n for n, a in [(k, [k] + ALIASES.get(k, [])) for k in COMMANDS] if args.command in a)
    try:
        cfg = resolve_config(args)
        out = Outputs(Path(args.out), cfg)
        COMMANDS[command](cfg, out, args)
        out.write()
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, DomainError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NeurobfError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
