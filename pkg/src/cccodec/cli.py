"""Command-line entry point.

Every artifact-producing subcommand takes an output directory, locks it,
and records the effective configuration and a version stamp before doing
any work, so each run is reproducible from its own records.  Exit codes:
0 ok, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys

import numpy as np

from . import __version__, analysis, codec, container, context, training


class CliError(Exception):
    pass


# configuration keys shared by the experiment subcommands; CLI flags
# mirror these one-to-one
CONFIG_DEFAULTS = {
    "kind": context.KIND_GROUPED,
    "n": 64,
    "g": 8,
    "h": 16,
    "w": 16,
    "lam": 0.0130,
    "steps": 1500,
    "lr": 1e-4,
    "lr_drop_step": 1000,
    "lr_drop": 5e-5,
    "batch": 4,
    "seed": 0,
    "mode": "latents",
    "noise_level": 0.25,
    "hyper_channels": 0,
    "log_every": 50,
    "eval_images": 4,
    "scales": "0.25,0.5,1.0,2.0,4.0",
}

_TYPES = {k: type(v) for k, v in CONFIG_DEFAULTS.items()}


def _coerce(key, raw):
    t = _TYPES.get(key, str)
    if t is bool:
        return raw in ("1", "true", "yes")
    return t(raw)


def load_config_file(path: str) -> dict:
    cfg = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise CliError(f"{path}:{lineno}: expected key=value")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in CONFIG_DEFAULTS:
                raise CliError(f"{path}:{lineno}: unknown config key {key!r}")
            cfg[key] = _coerce(key, val)
    return cfg


def effective_config(args) -> dict:
    cfg = dict(CONFIG_DEFAULTS)
    if getattr(args, "config", None):
        cfg.update(load_config_file(args.config))
    for key in CONFIG_DEFAULTS:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    return cfg


def version_stamp() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            capture_output=True, text=True, timeout=5,
            cwd=os.path.dirname(os.path.abspath(__file__)))
        if out.returncode == 0:
            return f"cccodec {__version__} ({out.stdout.strip()})"
    except OSError:
        pass
    return f"cccodec {__version__}"


class OutputDir:
    """Lockfile-owned run directory with the reproducibility record."""

    def __init__(self, path: str, cfg: dict | None = None):
        self.path = path
        self.cfg = cfg
        self._lock = os.path.join(path, ".lock")

    def __enter__(self):
        os.makedirs(self.path, exist_ok=True)
        try:
            fd = os.open(self._lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise CliError(f"output directory {self.path} is locked "
                           f"(remove {self._lock} if stale)")
        os.close(fd)
        with open(os.path.join(self.path, "version.txt"), "w") as f:
            f.write(version_stamp() + "\n")
        if self.cfg is not None:
            with open(os.path.join(self.path, "config.txt"), "w") as f:
                for k in sorted(self.cfg):
                    f.write(f"{k}={self.cfg[k]}\n")
        return self

    def __exit__(self, *exc):
        os.remove(self._lock)
        return False

    def file(self, name):
        return os.path.join(self.path, name)


def _train_config(cfg: dict) -> training.TrainConfig:
    return training.TrainConfig(
        kind=cfg["kind"], N=cfg["n"], G=cfg["g"], H=cfg["h"], W=cfg["w"],
        lam=cfg["lam"], steps=cfg["steps"], lr=cfg["lr"],
        lr_drop_step=cfg["lr_drop_step"], lr_drop=cfg["lr_drop"],
        batch=cfg["batch"], seed=cfg["seed"], mode=cfg["mode"],
        noise_level=cfg["noise_level"], hyper_channels=cfg["hyper_channels"],
        log_every=cfg["log_every"])


# ---------------------------------------------------------------------------
# subcommands

def cmd_train(args) -> int:
    cfg = effective_config(args)
    with OutputDir(args.out, cfg) as out:
        result = training.train(_train_config(cfg), out_dir=out.path)
        if result.aborted:
            print("training aborted on non-finite loss; "
                  "last good parameters saved", file=sys.stderr)
            return 1
        print(f"trained {cfg['kind']} for {cfg['steps']} steps -> "
              f"{result.checkpoint_path}")
    return 0


def cmd_encode(args) -> int:
    bundle = container.load_checkpoint(args.checkpoint)
    latents = container.load_latent_tensor(args.latents)
    if args.hyper:
        z_hat = container.load_latent_tensor(args.hyper)
    else:
        z_hat = codec.quantize(
            context.hyper_analysis_np(bundle, latents.astype(np.float64)))
    blob = codec.encode_latents(bundle, latents, z_hat)
    with open(args.out, "wb") as f:
        f.write(blob)
    print(f"encoded {latents.shape} -> {len(blob)} bytes")
    return 0


def cmd_decode(args) -> int:
    bundle = container.load_checkpoint(args.checkpoint)
    with open(args.stream, "rb") as f:
        blob = f.read()
    result = codec.decode_latents(blob, bundle)
    container.save_latent_tensor(result.latents, args.out)
    if args.hyper_out:
        container.save_latent_tensor(result.hyper, args.hyper_out)
    print(f"decoded {result.latents.shape} in {result.serial_steps} serial steps")
    return 0


def _eval_curve(bundle, cfg, seed_base=1000) -> analysis.RDCurve:
    spec = training.make_latent_spec(cfg["n"], cfg["h"], cfg["w"],
                                     seed=cfg["seed"],
                                     noise_level=cfg["noise_level"])
    scales = [float(s) for s in str(cfg["scales"]).split(",")]
    pts = []
    for scale in scales:
        ev = training.eval_rd(bundle, spec, images=cfg["eval_images"],
                              seed=seed_base, scale=scale, lam=cfg["lam"])
        pts.append((ev.bpp, ev.psnr))
    pts.sort()
    return analysis.RDCurve(pts, quality_tag="psnr",
                            provenance={"kind": bundle.kind,
                                        "G": bundle.config.G})


def cmd_eval_rd(args) -> int:
    cfg = effective_config(args)
    bundle = container.load_checkpoint(args.checkpoint)
    with OutputDir(args.out, cfg) as out:
        curve = _eval_curve(bundle, cfg)
        curve.write_csv(out.file("rd.csv"))
        for bpp, q in curve.points:
            print(f"bpp {bpp:10.4f}  psnr {q:8.3f}")
    return 0


def cmd_analyze_mad(args) -> int:
    cfg = effective_config(args)
    if args.latents:
        latents = container.load_latent_tensor(args.latents).astype(np.float64)
    else:
        spec = training.make_latent_spec(cfg["n"], cfg["h"], cfg["w"],
                                         seed=cfg["seed"],
                                         noise_level=cfg["noise_level"])
        latents = training.generate_synthetic_latents(spec, cfg["eval_images"])
    with OutputDir(args.out, cfg) as out:
        report = analysis.mad_match(latents)
        report.write_csv(out.file("mad.csv"))
        print(f"channels {report.channels}  non-adjacent match fraction "
              f"{report.nonadjacent_fraction():.3f}")
    return 0


def cmd_bd_rate(args) -> int:
    ref = analysis.read_rd_csv(args.reference)
    test = analysis.read_rd_csv(args.test)
    value = analysis.bd_rate(ref, test)
    payload = {"bd_rate_percent": value,
               "reference": args.reference, "test": args.test}
    if args.out:
        with open(args.out, "w") as f:
            json.dump(payload, f, indent=2)
            f.write("\n")
    print(f"BD-rate {value:+.4f}%")
    return 0


_PROFILE_GRID = [(16, 8, 8), (16, 16, 16), (32, 8, 8), (32, 16, 16)]


def cmd_profile(args) -> int:
    cfg = effective_config(args)
    with OutputDir(args.out, cfg) as out:
        rows = []
        for kind in context.KINDS:
            for (N, H, W) in _PROFILE_GRID:
                G = cfg["g"] if N % cfg["g"] == 0 else 4
                bundle = context.build_bundle(kind, N, G=G, seed=cfg["seed"])
                spec = training.make_latent_spec(N, H, W, seed=cfg["seed"])
                y = training.generate_synthetic_latents(spec, 1, seed=11)[0]
                lat = codec.quantize(y)
                z = codec.quantize(context.hyper_analysis_np(bundle, y))
                prof = analysis.profile_codec(bundle, lat, z,
                                              repetitions=args.repetitions)
                rows.append(prof.csv_row())
                print(",".join(str(v) for v in prof.csv_row()))
        import csv as _csv
        with open(out.file("profile.csv"), "w", newline="") as f:
            w = _csv.writer(f)
            w.writerow(analysis.ScheduleProfile.CSV_HEADER)
            w.writerows(rows)
    return 0


def cmd_sweep_groups(args) -> int:
    cfg = effective_config(args)
    if cfg["n"] % 12 or cfg["n"] % 8:
        raise CliError("sweep-groups needs a channel count divisible by "
                       "4, 8 and 12 (e.g. 48)")
    with OutputDir(args.out, cfg) as out:
        curves = {}
        for G in (4, 8, 12):
            run_cfg = dict(cfg, g=G, kind=context.KIND_GROUPED)
            result = training.train(_train_config(run_cfg))
            curve = _eval_curve(result.bundle, run_cfg)
            path = out.file(f"rd_g{G}.csv")
            curve.write_csv(path)
            curves[G] = curve
            print(f"G={G:2d}: " + "  ".join(
                f"{b:.2f}bpp/{q:.1f}" for b, q in curve.points))
        payload = {
            "bd_rate_g8_vs_g4_percent": analysis.bd_rate(curves[4], curves[8]),
            "bd_rate_g12_vs_g8_percent": analysis.bd_rate(curves[8], curves[12]),
        }
        with open(out.file("bd_rate.json"), "w") as f:
            json.dump(payload, f, indent=2)
            f.write("\n")
        print(json.dumps(payload))
    return 0


def cmd_selftest(args) -> int:
    failures = []

    def check(name, ok):
        print(f"{'ok  ' if ok else 'FAIL'} {name}")
        if not ok:
            failures.append(name)

    rng = np.random.default_rng(0)
    for kind in context.KINDS:
        bundle = context.build_bundle(kind, 16, G=4, seed=3)
        spec = training.make_latent_spec(16, 8, 8, seed=3)
        y = training.generate_synthetic_latents(spec, 1, seed=4)[0]
        lat = codec.quantize(y)
        z = codec.quantize(context.hyper_analysis_np(bundle, y))
        blob = codec.encode_latents(bundle, lat, z)
        result = codec.decode_latents(blob, bundle, audit=True)
        check(f"round-trip {kind}",
              np.array_equal(result.latents, lat)
              and np.array_equal(result.hyper, z))
        check(f"schedule formula {kind}",
              result.serial_steps == analysis.serial_ops(kind, 16, 8, 8, 4))
    rel, where = training.gradient_check(
        training.TrainConfig(kind=context.KIND_GROUPED, N=8, G=2, H=8, W=8,
                             batch=1, seed=0),
        max_params=300)
    check(f"gradient check (rel err {rel:.2e} at {where})", rel < 1e-4)
    del rng
    if failures:
        print(f"{len(failures)} selftest failure(s)", file=sys.stderr)
        return 1
    print("selftest passed")
    return 0


# ---------------------------------------------------------------------------
# argument parsing

def _add_config_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="key=value config file")
    for key, default in CONFIG_DEFAULTS.items():
        flag = "--" + key.replace("_", "-")
        t = _TYPES[key]
        p.add_argument(flag, type=t if t is not bool else str, default=None,
                       help=f"default: {default}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="cccodec",
        description="Grouped cross-channel context image-latent codec tools")
    p.add_argument("--version", action="version", version=version_stamp())
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("train", help="train a context model")
    _add_config_flags(sp)
    sp.add_argument("--out", required=True, help="output directory")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("encode", help="encode a latent tensor file")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--latents", required=True, help="CCCT latent file")
    sp.add_argument("--hyper", help="CCCT hyper-latent file (derived if absent)")
    sp.add_argument("--out", required=True, help="bitstream output path")
    sp.set_defaults(func=cmd_encode)

    sp = sub.add_parser("decode", help="decode a bitstream")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--stream", required=True)
    sp.add_argument("--out", required=True, help="CCCT latent output path")
    sp.add_argument("--hyper-out", help="CCCT hyper-latent output path")
    sp.set_defaults(func=cmd_decode)

    sp = sub.add_parser("eval-rd", help="rate-distortion curve for a checkpoint")
    _add_config_flags(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--out", required=True, help="output directory")
    sp.set_defaults(func=cmd_eval_rd)

    sp = sub.add_parser("analyze-mad", help="matched-channel MAD report")
    _add_config_flags(sp)
    sp.add_argument("--latents", help="CCCT latent file (synthetic if absent)")
    sp.add_argument("--out", required=True, help="output directory")
    sp.set_defaults(func=cmd_analyze_mad)

    sp = sub.add_parser("bd-rate", help="BD-rate between two RD CSVs")
    sp.add_argument("--reference", required=True)
    sp.add_argument("--test", required=True)
    sp.add_argument("--out", help="JSON output path")
    sp.set_defaults(func=cmd_bd_rate)

    sp = sub.add_parser("profile", help="codec wall-clock / schedule profile")
    _add_config_flags(sp)
    sp.add_argument("--repetitions", type=int, default=3)
    sp.add_argument("--out", required=True, help="output directory")
    sp.set_defaults(func=cmd_profile)

    sp = sub.add_parser("sweep-groups",
                        help="train and evaluate G in {4, 8, 12}")
    _add_config_flags(sp)
    sp.add_argument("--out", required=True, help="output directory")
    sp.set_defaults(func=cmd_sweep_groups)

    sp = sub.add_parser("selftest", help="round-trip, gradients, schedules")
    sp.set_defaults(func=cmd_selftest)
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except (CliError, codec.CodecError, container.ContainerError,
            ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def main():  # console entry point
    sys.exit(run())


if __name__ == "__main__":
    main()
