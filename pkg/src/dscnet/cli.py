"""Command-line front end.

Verbs: synth, train, infer, eval, gradcheck, ablate.  Every verb reads a
flat key=value config file (--config), overridable per key with repeatable
--set KEY=VALUE flags; --seed overrides the seed key.  Outputs are staged
in a temporary sibling and moved into place only on success, so failures
leave no partial artifacts.  Errors exit with status 1 and a single
machine-parsable "error: ..." line on stderr.

--threads N pins BLAS pools by exporting the usual thread-count environment
variables; this must happen before numpy loads, so the heavy imports in
this module live inside the command implementations.
"""

from __future__ import annotations

import argparse
import os
import shutil
import sys
from contextlib import contextmanager

_THREAD_ENV = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
               "NUMEXPR_NUM_THREADS")

# key: (parser, default)
_SCHEMA = {
    "seed": (int, 0),
    # synthesis
    "count": (int, 20),
    "size": (int, 64),
    "shapes_min": (int, 1),
    "shapes_max": (int, 4),
    "darken_min": (float, 0.6),
    "darken_max": (float, 0.85),
    "soft_min": (float, 1.0),
    "soft_max": (float, 3.0),
    # training
    "lr": (float, 1e-3),
    "momentum": (float, 0.9),
    "weight_decay": (float, 5e-4),
    "iterations": (int, 2000),
    "flip_augment": (None, True),   # bool, see _parse_bool
    "checkpoint_every": (int, 500),
    "variant": (str, "dsc"),
    "rounds": (int, 2),
    "share_attention": (None, True),
    "attention_enabled": (None, True),
    "stage_channels": (None, (8, 16, 32, 64)),  # comma list of ints
    "mlif_channels": (int, 16),
    # inference / evaluation
    "checkpoint": (str, ""),
    "pred_dir": (str, ""),
    "threshold": (float, 0.5),
    # ablation / gradcheck
    "grid": (str, "basic,context,dsc"),
    "instances": (int, 100),
}


def _parse_bool(v: str) -> bool:
    s = v.strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: '{v}'")


def _parse_value(key: str, raw: str):
    if key not in _SCHEMA:
        raise ValueError(f"unknown config key '{key}'")
    kind, _ = _SCHEMA[key]
    if key in ("flip_augment", "share_attention", "attention_enabled"):
        return _parse_bool(raw)
    if key == "stage_channels":
        return tuple(int(tok) for tok in raw.split(",") if tok)
    return kind(raw)


def load_config(path: str | None, overrides: list[str], seed: int | None) -> dict:
    cfg = {k: d for k, (_, d) in _SCHEMA.items()}
    if path:
        with open(path) as fh:
            for ln, line in enumerate(fh, start=1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise ValueError(f"{path}:{ln}: expected KEY=VALUE, got '{line}'")
                key, raw = line.split("=", 1)
                cfg[key.strip()] = _parse_value(key.strip(), raw.strip())
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"--set expects KEY=VALUE, got '{item}'")
        key, raw = item.split("=", 1)
        cfg[key.strip()] = _parse_value(key.strip(), raw.strip())
    if seed is not None:
        cfg["seed"] = seed
    return cfg


def write_config(cfg: dict, path: str) -> None:
    with open(path, "w") as fh:
        for key in sorted(cfg):
            val = cfg[key]
            if isinstance(val, tuple):
                val = ",".join(str(v) for v in val)
            elif isinstance(val, bool):
                val = "true" if val else "false"
            fh.write(f"{key}={val}\n")


@contextmanager
def _staged_dir(target: str):
    """Build a directory output atomically: stage, then swap in on success."""
    tmp = target.rstrip("/") + ".partial"
    if os.path.exists(tmp):
        shutil.rmtree(tmp)
    os.makedirs(tmp)
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    if os.path.isdir(target):
        shutil.rmtree(target)
    elif os.path.exists(target):
        os.remove(target)
    os.rename(tmp, target)


@contextmanager
def _staged_file(target: str):
    tmp = target + ".partial"
    try:
        yield tmp
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise
    os.replace(tmp, target)


def _require(value, flag: str, verb: str):
    if not value:
        raise ValueError(f"{verb} requires {flag}")
    return value


def _train_config(cfg: dict):
    from .dsc import DscConfig
    from .train import TrainConfig
    return TrainConfig(
        lr=cfg["lr"], momentum=cfg["momentum"], weight_decay=cfg["weight_decay"],
        iterations=cfg["iterations"], seed=cfg["seed"],
        flip_augment=cfg["flip_augment"], checkpoint_every=cfg["checkpoint_every"],
        variant=cfg["variant"], stage_channels=tuple(cfg["stage_channels"]),
        mlif_channels=cfg["mlif_channels"],
        dsc=DscConfig(rounds=cfg["rounds"], share_attention=cfg["share_attention"],
                      attention_enabled=cfg["attention_enabled"]))


def _synth_config(cfg: dict):
    from .data import SynthConfig
    return SynthConfig(seed=cfg["seed"], count=cfg["count"], size=cfg["size"],
                       shapes_per_image=(cfg["shapes_min"], cfg["shapes_max"]),
                       darkening=(cfg["darken_min"], cfg["darken_max"]),
                       softness=(cfg["soft_min"], cfg["soft_max"]))


def cmd_synth(args, cfg: dict) -> int:
    from .data import save_dataset, synthesize
    out = _require(args.out, "--out", "synth")
    samples = synthesize(_synth_config(cfg))
    with _staged_dir(out) as tmp:
        save_dataset(samples, tmp)
        write_config(cfg, os.path.join(tmp, "synth_config.txt"))
    print(f"synth: wrote {len(samples)} samples to {out}")
    return 0


def cmd_train(args, cfg: dict) -> int:
    from .data import load_dataset
    from .train import train
    src = _require(args.inp, "--in", "train")
    out = _require(args.out, "--out", "train")
    dataset = load_dataset(src)
    tc = _train_config(cfg)
    with _staged_dir(out) as tmp:
        write_config(cfg, os.path.join(tmp, "config.txt"))
        _, rows = train(dataset, tc, out_dir=tmp)
    final = rows[-1]["total_loss"] if rows else float("nan")
    print(f"train: {tc.variant} for {tc.iterations} iterations, "
          f"final loss {final:.4f}, artifacts in {out}")
    return 0


def _config_file_keys(path: str | None) -> set:
    if not path:
        return set()
    keys = set()
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line and not line.startswith("#") and "=" in line:
                keys.add(line.split("=", 1)[0].strip())
    return keys


def _load_net_for_checkpoint(cfg: dict, args, checkpoint: str):
    """Build the network the checkpoint describes and load it.

    A config.txt next to the checkpoint (written by train) supplies the
    structure; keys the user set explicitly (--config file or --set) win.
    """
    from .network import init_network, load_checkpoint
    from .rng import RandomStream
    sibling = os.path.join(os.path.dirname(os.path.abspath(checkpoint)), "config.txt")
    if os.path.isfile(sibling):
        base = load_config(sibling, [], None)
        explicit = _config_file_keys(args.config)
        explicit |= {item.split("=", 1)[0].strip() for item in (args.set or []) if "=" in item}
        for key, val in base.items():
            if key not in explicit:
                cfg[key] = val
    tc = _train_config(cfg)
    params = init_network(tc.network_config(), RandomStream(tc.seed).child(0))
    load_checkpoint(params, checkpoint)
    return params


def cmd_infer(args, cfg: dict) -> int:
    from .data import load_dataset, save_prediction_png
    from .network import predict
    src = _require(args.inp, "--in", "infer")
    out = _require(args.out, "--out", "infer")
    checkpoint = _require(cfg["checkpoint"], "--set checkpoint=PATH", "infer")
    params = _load_net_for_checkpoint(cfg, args, checkpoint)
    dataset = load_dataset(src)
    with _staged_dir(out) as tmp:
        for s in dataset:
            prob = predict(s.image, params)
            save_prediction_png(prob.data, os.path.join(tmp, s.id + ".png"))
    print(f"infer: wrote {len(dataset)} probability maps to {out}")
    return 0


def cmd_eval(args, cfg: dict) -> int:
    from .data import load_dataset, load_prediction_png
    from .metrics import evaluate_pairs, write_metrics_csv
    src = _require(args.inp, "--in", "eval")
    out = _require(args.out, "--out", "eval")
    pred_dir = _require(cfg["pred_dir"], "--set pred_dir=PATH", "eval")
    dataset = load_dataset(src)
    pairs = []
    for s in dataset:
        pred_path = os.path.join(pred_dir, s.id + ".png")
        if not os.path.isfile(pred_path):
            raise FileNotFoundError(f"missing prediction for '{s.id}': {pred_path}")
        pairs.append((s.id, load_prediction_png(pred_path), s.mask))
    result = evaluate_pairs(pairs, threshold=cfg["threshold"])
    with _staged_file(out) as tmp:
        write_metrics_csv(result, tmp)
    ber_s = "n/a" if result.mean_ber is None else f"{result.mean_ber:.4f}"
    print(f"aggregate accuracy={result.mean_accuracy:.4f} ber={ber_s} "
          f"images={len(result.rows)} skipped_ber={result.skipped_ber}")
    return 0


def cmd_gradcheck(args, cfg: dict) -> int:
    from .gradcheck import run_all
    reports = run_all(instances=cfg["instances"], seed=cfg["seed"])
    lines = [r.line() for r in reports]
    for line in lines:
        print(line)
    if args.out:
        with _staged_file(args.out) as tmp:
            with open(tmp, "w") as fh:
                fh.write("\n".join(lines) + "\n")
    failed = [r.name for r in reports if not r.passed]
    if failed:
        raise RuntimeError(f"gradient checks failed for: {', '.join(failed)}")
    return 0


GRID_TOKENS = ("basic", "context", "dsc", "dsc-rounds1", "dsc-rounds3", "dsc-unshared")


def _grid_config(token: str, cfg: dict) -> dict:
    from copy import deepcopy
    c = deepcopy(cfg)
    if token not in GRID_TOKENS:
        raise ValueError(f"unknown grid token '{token}' (expected one of {GRID_TOKENS})")
    if token == "basic":
        c["variant"] = "basic"
    elif token == "context":
        c["variant"] = "context"
    else:
        c["variant"] = "dsc"
        c["rounds"] = {"dsc-rounds1": 1, "dsc-rounds3": 3}.get(token, 2)
        c["share_attention"] = token != "dsc-unshared"
    return c


def cmd_ablate(args, cfg: dict) -> int:
    import csv

    from .data import load_dataset
    from .metrics import evaluate_pairs, write_metrics_csv
    from .network import predict
    from .train import train
    root = _require(args.inp, "--in", "ablate")
    out = _require(args.out, "--out", "ablate")
    train_set = load_dataset(os.path.join(root, "train"))
    test_set = load_dataset(os.path.join(root, "test"))
    tokens = [t.strip() for t in cfg["grid"].split(",") if t.strip()]
    if not tokens:
        raise ValueError("empty ablation grid")

    results = []
    with _staged_dir(out) as tmp:
        for token in tokens:
            sub_cfg = _grid_config(token, cfg)
            tc = _train_config(sub_cfg)
            run_dir = os.path.join(tmp, token)
            os.makedirs(run_dir, exist_ok=True)
            write_config(sub_cfg, os.path.join(run_dir, "config.txt"))
            params, _ = train(train_set, tc, out_dir=run_dir)
            pairs = [(s.id, predict(s.image, params), s.mask) for s in test_set]
            res = evaluate_pairs(pairs, threshold=cfg["threshold"])
            write_metrics_csv(res, os.path.join(run_dir, "metrics.csv"))
            results.append((token, tc, res))
            ber_s = "n/a" if res.mean_ber is None else f"{res.mean_ber:.4f}"
            print(f"ablate: {token} ber={ber_s} accuracy={res.mean_accuracy:.4f}")

        results.sort(key=lambda r: (r[2].mean_ber is None, r[2].mean_ber))
        with open(os.path.join(tmp, "ablation.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["variant", "rounds", "share_attention", "ber", "accuracy"])
            for token, tc, res in results:
                rounds = tc.dsc.rounds if tc.variant != "basic" else ""
                shared = (str(tc.dsc.share_attention).lower()
                          if tc.variant == "dsc" else "")
                w.writerow([token, rounds, shared,
                            "" if res.mean_ber is None else f"{res.mean_ber:.6f}",
                            f"{res.mean_accuracy:.6f}"])
    print(f"ablate: comparison table in {os.path.join(out, 'ablation.csv')}")
    return 0


_COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
}


def _pin_threads(argv: list[str]) -> None:
    if "--threads" not in argv:
        return
    idx = argv.index("--threads")
    if idx + 1 >= len(argv):
        return  # argparse will report the missing value
    n = argv[idx + 1]
    if "numpy" in sys.modules:
        return  # too late to pin; library users manage their own pools
    for var in _THREAD_ENV:
        os.environ[var] = n


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="dscnet",
        description="Direction-aware spatial context shadow detection")
    p.add_argument("verb", choices=sorted(_COMMANDS))
    p.add_argument("--config", metavar="PATH", help="flat key=value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", default=[],
                   help="override one config key (repeatable)")
    p.add_argument("--in", dest="inp", metavar="PATH", help="input dataset/path")
    p.add_argument("--out", metavar="PATH", help="output path")
    p.add_argument("--seed", type=int, default=None, help="override the seed key")
    p.add_argument("--threads", type=int, default=None,
                   help="BLAS thread count (1 = verification mode)")
    return p


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    _pin_threads(argv)
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.set, args.seed)
        return _COMMANDS[args.verb](args, cfg)
    except Exception as e:  # noqa: BLE001  (one-line machine-parsable contract)
        msg = " ".join(str(e).split())
        print(f"error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
