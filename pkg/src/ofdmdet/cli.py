"""Command-line entry point: ``ofdmdet {gen,train,eval,guard-len}``.

Run configuration is a plain-text ``key = value`` file (``#`` starts a
comment).  Unknown keys and malformed values are rejected with the key and
line number.  ``OCN_SEED`` in the environment overrides ``seed``.

Exit codes: 0 success, 2 configuration error, 3 numeric error (divergence,
singular channel), 4 I/O error.

Checkpoint layout (little-endian)::

    magic b"OCNP" | version u32 | N u32 | layers u32 | init_mode u8
    per layer: w (2N x 6N f64, row-major) | b (2N f64) | t (f64)
    CRC32 (u32) of every preceding byte
"""

from __future__ import annotations

import argparse
import logging
import os
import struct
import sys
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import numpy as np

from .chanmodel import (
    DEFAULT_ALPHA,
    DEFAULT_BETA,
    ChannelConfig,
    ConfigError,
    NoSolutionError,
    derive_seed,
    guard_boundary,
    guard_length,
    write_channel_batch,
)
from .detect import DetectorParams, InitMode, SingularChannelError, SlidingConfig
from .evalharness import DETECTOR_IDS, SweepConfig, ber_sweep, build_detectors, emit_csv, emit_series
from .learn import LossKind, TrainConfig, TrainingDivergenceError, train, write_loss_csv

__all__ = [
    "CheckpointError",
    "RunConfigError",
    "RunConfig",
    "parse_run_config",
    "load_run_config",
    "save_checkpoint",
    "load_checkpoint",
    "checkpoint_bytes",
    "main",
    "EXIT_OK",
    "EXIT_CONFIG",
    "EXIT_NUMERIC",
    "EXIT_IO",
]

log = logging.getLogger("ofdmdet")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

_CKPT_MAGIC = b"OCNP"
_CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sIIIB")


class CheckpointError(ValueError):
    """Corrupt or incompatible checkpoint file."""


class RunConfigError(ConfigError):
    def __init__(self, key: str, line: int | None, message: str):
        where = f"line {line}: " if line is not None else ""
        super().__init__(key, f"{where}{message}")
        self.line = line


def checkpoint_bytes(params: DetectorParams) -> bytes:
    parts = [_CKPT_HEADER.pack(_CKPT_MAGIC, _CKPT_VERSION, params.n, params.num_layers, int(params.init_mode))]
    for k in range(params.num_layers):
        parts.append(params.w[k].astype("<f8").tobytes(order="C"))
        parts.append(params.b[k].astype("<f8").tobytes())
        parts.append(np.float64(params.t[k]).astype("<f8").tobytes())
    payload = b"".join(parts)
    return payload + struct.pack("<I", zlib.crc32(payload))


def save_checkpoint(params: DetectorParams, path: str | Path) -> None:
    Path(path).write_bytes(checkpoint_bytes(params))


def load_checkpoint(path: str | Path) -> DetectorParams:
    data = Path(path).read_bytes()
    if len(data) < _CKPT_HEADER.size + 4:
        raise CheckpointError(f"{path}: file too short for a checkpoint")
    payload, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(payload) != crc:
        raise CheckpointError(f"{path}: CRC mismatch, file is corrupt")
    magic, version, n, layers, mode = _CKPT_HEADER.unpack_from(payload)
    if magic != _CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != _CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    two_n = 2 * n
    per_layer = 8 * (two_n * 3 * two_n + two_n + 1)
    if len(payload) != _CKPT_HEADER.size + layers * per_layer:
        raise CheckpointError(f"{path}: size does not match N = {n}, {layers} layers")
    w = np.empty((layers, two_n, 3 * two_n))
    b = np.empty((layers, two_n))
    t = np.empty(layers)
    offset = _CKPT_HEADER.size
    for k in range(layers):
        w[k] = np.frombuffer(payload, "<f8", two_n * 3 * two_n, offset).reshape(two_n, 3 * two_n)
        offset += 8 * two_n * 3 * two_n
        b[k] = np.frombuffer(payload, "<f8", two_n, offset)
        offset += 8 * two_n
        t[k] = np.frombuffer(payload, "<f8", 1, offset)[0]
        offset += 8
    try:
        return DetectorParams(w=w, b=b, t=t, init_mode=InitMode(mode))
    except ValueError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _words(text: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in text.split(",") if v.strip())


def _choice(*options: str) -> Callable[[str], str]:
    def parse(text: str) -> str:
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {text!r}")
        return text
    return parse


# key -> (parser, default)
SCHEMA: dict[str, tuple[Callable[[str], Any], Any]] = {
    # channel
    "n": (int, 32),
    "paths": (int, 4),
    "fnd": (float, 0.16),
    "path_powers": (_floats, None),
    "oscillators": (int, 32),
    # training
    "mode": (_choice("dnt", "cn"), "cn"),
    "layers": (int, 20),
    "lr": (float, 0.005),
    "batch": (int, None),
    "iterations": (int, 20000),
    "snr_low": (float, 15.0),
    "snr_high": (float, 35.0),
    "train_snr": (float, None),
    "cond_threshold": (float, 1e4),
    "loss": (_choice("normalized", "euclidean", "oa"), None),
    "seed": (int, 0),
    "record_every": (int, 100),
    "weight_offset": (float, 0.0),
    "window_offset": (int, 0),
    "init_std": (float, 0.001),
    # sliding geometry
    "output_len": (int, None),
    "guard_len": (int, None),
    # evaluation
    "snr_points": (_floats, (15.0, 20.0, 25.0, 30.0, 35.0)),
    "min_symbols": (int, 10000),
    "min_errors": (int, 200),
    "detectors": (_words, ("zf",)),
    "identity_channel": (_bool, False),
    "block_size": (int, 250),
    "max_symbols_factor": (int, 100),
    # channel batch generation
    "count": (int, 0),
}


@dataclass
class RunConfig:
    values: dict[str, Any]

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    @property
    def sliding(self) -> SlidingConfig | None:
        out_len, guard = self["output_len"], self["guard_len"]
        if out_len is None and guard is None:
            return None
        if out_len is None or guard is None:
            raise RunConfigError("output_len" if out_len is None else "guard_len", None,
                                 "output_len and guard_len must be given together")
        return SlidingConfig(out_len, guard)

    def channel(self) -> ChannelConfig:
        return ChannelConfig(
            num_subcarriers=self["n"],
            num_paths=self["paths"],
            normalized_doppler=self["fnd"],
            path_powers=self["path_powers"],
            oscillators_per_path=self["oscillators"],
        )

    def train(self) -> TrainConfig:
        sliding = self.sliding
        mode = InitMode.ZERO if self["mode"] == "dnt" else InitMode.ZF
        loss = self["loss"]
        if loss is None:
            loss = "oa" if sliding is not None else ("normalized" if mode is InitMode.ZERO else "euclidean")
        batch = self["batch"]
        if batch is None:
            batch = 1500 if sliding is not None else 500
        return TrainConfig(
            num_layers=self["layers"],
            learning_rate=self["lr"],
            batch_size=batch,
            num_iterations=self["iterations"],
            snr_range_db=(self["snr_low"], self["snr_high"]),
            train_snr_db=self["train_snr"],
            condition_threshold=self["cond_threshold"],
            loss_kind=LossKind(loss),
            init_mode=mode,
            master_seed=self["seed"],
            sliding=sliding,
            window_offset=self["window_offset"],
            record_every=self["record_every"],
            weight_offset=self["weight_offset"],
            init_std=self["init_std"],
        )

    def sweep(self) -> SweepConfig:
        return SweepConfig(
            snr_points_db=self["snr_points"],
            chan_cfg=self.channel(),
            detectors=self["detectors"],
            min_symbols=self["min_symbols"],
            min_bit_errors=self["min_errors"],
            master_seed=self["seed"],
            block_size=self["block_size"],
            max_symbols_factor=self["max_symbols_factor"],
            identity_channel=self["identity_channel"],
        )


def parse_run_config(text: str, env: dict[str, str] | None = None) -> RunConfig:
    values = {key: default for key, (_, default) in SCHEMA.items()}
    seen: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise RunConfigError(line, lineno, "expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in SCHEMA:
            raise RunConfigError(key, lineno, "unknown key")
        if key in seen:
            raise RunConfigError(key, lineno, f"duplicate key (first set on line {seen[key]})")
        seen[key] = lineno
        parser = SCHEMA[key][0]
        try:
            values[key] = parser(value)
        except ValueError as exc:
            raise RunConfigError(key, lineno, f"invalid value {value!r}: {exc}") from None
    env = os.environ if env is None else env
    if env.get("OCN_SEED"):
        try:
            values["seed"] = int(env["OCN_SEED"])
        except ValueError:
            raise RunConfigError("seed", None, f"OCN_SEED is not an integer: {env['OCN_SEED']!r}") from None
    return RunConfig(values)


def load_run_config(path: str | Path) -> RunConfig:
    return parse_run_config(Path(path).read_text(encoding="utf-8"))


def _atomic_write(path: Path, writer: Callable[[Path], None]) -> None:
    tmp = path.with_name(path.name + ".partial")
    try:
        writer(tmp)
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


def cmd_guard_len(args) -> int:
    try:
        x_l = guard_boundary(args.fnd, args.n, args.alpha, args.beta)
        length = guard_length(args.fnd, args.n, args.alpha, args.beta)
    except (NoSolutionError, ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(length)
    print(f"x_l = {x_l:.9f}")
    return EXIT_OK


def cmd_gen(args) -> int:
    cfg = load_run_config(args.config)
    chan = cfg.channel()
    count = cfg["count"] if args.count is None else args.count
    if count < 0:
        raise RunConfigError("count", None, "must be >= 0")
    seeds = [derive_seed(cfg["seed"], i) for i in range(count)]
    out = Path(args.out)
    _atomic_write(out, lambda p: write_channel_batch(p, chan, seeds))
    log.info("wrote %d realizations to %s", count, out)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    chan = cfg.channel()
    tcfg = cfg.train()
    report = train(chan, tcfg, progress=lambda it, loss: log.info("iteration %d: loss %.6g", it, loss))
    ckpt = Path(args.out)
    loss_csv = Path(args.loss_csv) if args.loss_csv else ckpt.with_suffix(".loss.csv")
    _atomic_write(ckpt, lambda p: save_checkpoint(report.final_params, p))
    try:
        _atomic_write(loss_csv, lambda p: write_loss_csv(report.loss_trace, p))
    except OSError:
        ckpt.unlink(missing_ok=True)
        raise
    log.info("trained %d iterations in %.1f s; checkpoint %s", tcfg.num_iterations, report.wall_time, ckpt)
    return EXIT_OK


def _parse_ckpt_args(items) -> dict[str, str]:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise RunConfigError("--ckpt", None, f"expected DETECTOR=PATH, got {item!r}")
        det, path = item.split("=", 1)
        out[det.strip()] = path.strip()
    return out


def cmd_eval(args) -> int:
    cfg = load_run_config(args.config)
    sweep = cfg.sweep()
    paths = _parse_ckpt_args(args.ckpt)
    params = {det: load_checkpoint(path) for det, path in paths.items() if det in sweep.detectors}
    detectors = build_detectors(sweep.detectors, sweep.chan_cfg.num_subcarriers, params, cfg.sliding)
    records = ber_sweep(sweep, detectors, workers=args.workers)
    out = Path(args.out)
    _atomic_write(out, lambda p: emit_csv(records, p))
    if args.series:
        emit_series(records, args.series)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ofdmdet", description="Deep-unfolded OFDM detection laboratory.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("guard-len", help="guard length of a sliding window")
    p.add_argument("--n", type=int, required=True, help="number of subcarriers")
    p.add_argument("--fnd", type=float, required=True, help="normalized Doppler shift")
    p.add_argument("--alpha", type=float, default=DEFAULT_ALPHA)
    p.add_argument("--beta", type=float, default=DEFAULT_BETA)
    p.set_defaults(func=cmd_guard_len)

    p = sub.add_parser("gen", help="write a channel batch file")
    p.add_argument("config")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=None, help="overrides the config's count")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a detector and write its checkpoint")
    p.add_argument("config")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--loss-csv", default=None, help="loss trace CSV (default: <out>.loss.csv)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="BER sweep over SNR")
    p.add_argument("config")
    p.add_argument("--out", required=True, help="BER CSV path")
    p.add_argument("--ckpt", action="append", metavar="DETECTOR=PATH",
                   help=f"parameters for a learned detector ({', '.join(d for d in DETECTOR_IDS if d in ('dnt', 'cn', 'scn'))})")
    p.add_argument("--series", default=None, help="also write plot series to this path")
    p.add_argument("--workers", type=int, default=os.cpu_count() or 1, help="parallel SNR points")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingDivergenceError, SingularChannelError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
