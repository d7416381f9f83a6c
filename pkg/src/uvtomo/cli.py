"""Command-line entry point: ``uvtomo <command> [options]``.

Commands
--------
phantom      synthetic phantom image
synth        projection dataset from an image and an angle PMF
train-gan    adversarial reconstruction
run-em       marginal-likelihood EM reconstruction
baseline-gl  graph-Laplacian angle assignment + least squares
hl-check     moment consistency of a dataset against an image
eval         aligned PSNR / CC / d_TV between reconstructions and references

Every command writes into ``--out-dir`` (atomically) and exits 0 on
success; failures print one ``error:`` line and use the codes below.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import math
import os
import struct
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import baselines, em_solver, gan_solver, moments, phantoms
from .hb_basis import BasisConfigError, HBCoefficients, build_basis_spec, render_spatial
from .metrics import recovery_scores
from .projection import AnglePMF, DatasetFormatError, ProjectionDataset, synthesize_dataset

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_MISSING = 3
EXIT_CONFIG = 4
EXIT_FORMAT = 5
EXIT_CHECKPOINT = 6
EXIT_CHECK_FAILED = 7


class CLIError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# --------------------------------------------------------------------------
# configuration


@dataclass
class BasisSection:
    s: float = 0.5
    R: float | None = None  # None: m / 2


@dataclass
class DatasetSection:
    L: int = 2000
    snr: float = math.inf
    flip: bool = True
    n_theta: int = 240


@dataclass
class GanSection:
    lr_phi: float = 0.008
    lr_c: float = 0.008
    lr_p: float = 0.0008
    gamma1: float = 1e-5
    gamma2: float = 5e-5
    gamma3: float = 0.01
    gamma4: float = 0.04
    tau: float = 0.5
    n_disc: int = 4
    n_disc_late: int = 2
    batch: int = 200
    clip_phi: float = 1.0
    clip_c: float = 10.0
    p_grad_norm: float = 0.1
    iters: int = 20000
    lambda_gp: float = 0.0
    width: int | None = None  # None: 512 clean, 256 noisy
    init: str = "gaussian"
    decay: float = 0.5
    update_p: bool = True


@dataclass
class EmSection:
    iters: int = 50
    sigma_inflation: float = math.sqrt(2)
    clean_sigma_fraction: float = 0.3
    n_init: int = 3
    init_scheme: str = "blobs"
    march_rho0: float = 0.0  # 0 disables frequency marching
    march_iters: int = 50
    pmf_smoothing: float = 0.0
    pcg_tol: float = 1e-10
    pcg_max_iter: int = 500


@dataclass
class BaselineSection:
    epsilon: float = 20.0
    cutoff: float = 5.0
    perturb_deg: float = 0.0


@dataclass
class RunConfig:
    seed: int = 0
    eval_every: int = 1000
    basis: BasisSection = field(default_factory=BasisSection)
    dataset: DatasetSection = field(default_factory=DatasetSection)
    gan: GanSection = field(default_factory=GanSection)
    em: EmSection = field(default_factory=EmSection)
    baseline: BaselineSection = field(default_factory=BaselineSection)

    _SECTIONS = ("basis", "dataset", "gan", "em", "baseline")

    def to_text(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        cp["run"] = {"seed": str(self.seed), "eval_every": str(self.eval_every)}
        for name in self._SECTIONS:
            sec = getattr(self, name)
            cp[name] = {f.name: _fmt(getattr(sec, f.name)) for f in fields(sec)}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise CLIError(f"malformed config: {exc}".splitlines()[0], EXIT_CONFIG) from exc
        known = {"run", *cls._SECTIONS}
        extra = set(cp.sections()) - known
        if extra:
            raise CLIError(f"unknown config section(s): {', '.join(sorted(extra))}", EXIT_CONFIG)
        cfg = cls()
        if cp.has_section("run"):
            for key, val in cp["run"].items():
                if key not in ("seed", "eval_every"):
                    raise CLIError(f"unknown key [run] {key}", EXIT_CONFIG)
                setattr(cfg, key, _parse(val, int, f"[run] {key}"))
        for name in cls._SECTIONS:
            if not cp.has_section(name):
                continue
            sec = getattr(cfg, name)
            types = {f.name: f.type for f in fields(sec)}
            for key, val in cp[name].items():
                if key not in types:
                    raise CLIError(f"unknown key [{name}] {key}", EXIT_CONFIG)
                default = getattr(type(sec)(), key)
                setattr(sec, key, _parse(val, _kind(types[key], default), f"[{name}] {key}"))
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_text(_read_text(path))

    def train_config(self, noisy: bool, iters: int | None = None) -> gan_solver.TrainConfig:
        g = self.gan
        d = {f.name: getattr(g, f.name) for f in fields(g)}
        d["width"] = d["width"] or (256 if noisy else 512)
        d["seed"] = self.seed
        d["n_theta"] = self.dataset.n_theta
        d["eval_every"] = self.eval_every
        if iters is not None:
            d["iters"] = iters
        try:
            return gan_solver.TrainConfig.from_dict(d)
        except ValueError as exc:
            raise CLIError(f"invalid [gan] settings: {exc}", EXIT_CONFIG) from exc


def _kind(annotation, default):
    text = str(annotation)
    if "bool" in text:
        return bool
    if "int" in text and "float" not in text:
        return int
    if "float" in text:
        return float
    return type(default) if default is not None else str


def _fmt(value) -> str:
    if value is None:
        return "auto"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(text: str, kind, where: str):
    text = text.strip()
    if text == "auto":
        return None
    try:
        if kind is bool:
            low = text.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(text)
        return kind(text)
    except ValueError as exc:
        raise CLIError(f"bad value for {where}: {text!r}", EXIT_CONFIG) from exc


# --------------------------------------------------------------------------
# file formats

_IMG_MAGIC = b"UVTI"
_IMG_VERSION = 1


def _atomic_bytes(path, payload: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def _atomic_text(path, text: str) -> None:
    _atomic_bytes(path, text.encode())


def _read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except FileNotFoundError as exc:
        raise CLIError(f"file not found: {path}", EXIT_MISSING) from exc


def _read_text(path) -> str:
    return _read_bytes(path).decode()


def save_image(path, img: np.ndarray) -> None:
    """``UVTI`` header (magic, version u32, m u32) then row-major ``<f8`` pixels."""
    img = np.asarray(img, dtype="<f8")
    if img.ndim != 2 or img.shape[0] != img.shape[1]:
        raise ValueError("images must be square")
    head = _IMG_MAGIC + struct.pack("<II", _IMG_VERSION, img.shape[0])
    _atomic_bytes(path, head + np.ascontiguousarray(img).tobytes())


def load_image(path) -> np.ndarray:
    data = _read_bytes(path)
    if len(data) < 12 or data[:4] != _IMG_MAGIC:
        raise CLIError(f"{path}: not a UVTI image", EXIT_FORMAT)
    version, m = struct.unpack_from("<II", data, 4)
    if version != _IMG_VERSION:
        raise CLIError(f"{path}: unsupported image version {version}", EXIT_FORMAT)
    if len(data) != 12 + 8 * m * m:
        raise CLIError(f"{path}: truncated image payload", EXIT_FORMAT)
    return np.frombuffer(data, "<f8", offset=12).reshape(m, m).copy()


def save_pgm(path, img: np.ndarray) -> None:
    """16-bit binary PGM, min-max scaled (for viewing only)."""
    img = np.asarray(img, dtype=float)
    lo, hi = float(img.min()), float(img.max())
    scaled = np.zeros(img.shape) if hi == lo else (img - lo) / (hi - lo)
    px = np.round(scaled * 65535).astype(">u2")
    head = f"P5\n{img.shape[1]} {img.shape[0]}\n65535\n".encode()
    _atomic_bytes(path, head + px.tobytes())


def save_pmf_csv(path, pmf: AnglePMF) -> None:
    lines = ["theta,prob"]
    lines += [f"{t!r},{p!r}" for t, p in zip(pmf.bin_centers.tolist(), pmf.probs.tolist())]
    _atomic_text(path, "\n".join(lines) + "\n")


def load_pmf_csv(path) -> AnglePMF:
    """Read ``theta,prob`` rows; the period is ``theta_1 * N`` (2 pi for one bin)."""
    rows = list(csv.reader(io.StringIO(_read_text(path))))
    if rows and rows[0] and rows[0][0].strip().lower() == "theta":
        rows = rows[1:]
    rows = [r for r in rows if r]
    try:
        theta = np.array([float(r[0]) for r in rows])
        prob = np.array([float(r[1]) for r in rows])
    except (ValueError, IndexError) as exc:
        raise CLIError(f"{path}: malformed PMF CSV", EXIT_FORMAT) from exc
    if prob.size == 0:
        raise CLIError(f"{path}: empty PMF", EXIT_FORMAT)
    period = 2 * np.pi if prob.size == 1 else float(theta[1] * prob.size)
    if prob.sum() <= 0 or np.any(prob < 0):
        raise CLIError(f"{path}: PMF must be nonnegative with positive mass", EXIT_FORMAT)
    try:
        return AnglePMF(prob / prob.sum(), period)
    except ValueError as exc:
        raise CLIError(f"{path}: {exc}", EXIT_FORMAT) from exc


def _write_rows(path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(x) if isinstance(x, float) else x for x in r])
    _atomic_text(path, buf.getvalue())


def _load_dataset(path) -> ProjectionDataset:
    if not Path(path).exists():
        raise CLIError(f"file not found: {path}", EXIT_MISSING)
    try:
        return ProjectionDataset.load(path)
    except DatasetFormatError as exc:
        raise CLIError(str(exc), EXIT_FORMAT) from exc


# --------------------------------------------------------------------------
# commands


def _spec_for(cfg: RunConfig, m: int):
    R = cfg.basis.R if cfg.basis.R is not None else m / 2
    try:
        return build_basis_spec(cfg.basis.s, R, m)
    except (BasisConfigError, ValueError) as exc:
        raise CLIError(f"invalid basis: {exc}", EXIT_CONFIG) from exc


def _save_reconstruction(out: Path, stem: str, img: np.ndarray) -> list:
    save_image(out / f"{stem}.img", img)
    save_pgm(out / f"{stem}.pgm", img)
    return [out / f"{stem}.img", out / f"{stem}.pgm"]


def cmd_phantom(args, cfg: RunConfig, out: Path) -> list:
    try:
        img = phantoms.make_phantom(args.kind, args.m, seed=cfg.seed)
    except ValueError as exc:
        raise CLIError(str(exc), EXIT_USAGE) from exc
    return _save_reconstruction(out, "phantom", img)


def cmd_synth(args, cfg: RunConfig, out: Path) -> list:
    img = load_image(args.phantom)
    m = img.shape[0]
    spec = _spec_for(cfg, m)
    c = phantoms.expand_image(img, spec)
    pmf = load_pmf_csv(args.pmf) if args.pmf else AnglePMF.uniform(cfg.dataset.n_theta)
    L = cfg.dataset.L if args.L is None else args.L
    snr = cfg.dataset.snr if args.snr is None else args.snr
    ds = synthesize_dataset(c, pmf, L, snr=None if math.isinf(snr) else snr,
                            seed=cfg.seed, flip=cfg.dataset.flip)
    ds.save(out / "dataset.uvtd")
    save_image(out / "basis_truth.img", render_spatial(c))
    return [out / "dataset.uvtd", out / "basis_truth.img"]


def _references(args):
    truth = load_image(args.truth) if getattr(args, "truth", None) else None
    p_ref = load_pmf_csv(args.pmf_ref) if getattr(args, "pmf_ref", None) else None
    return truth, p_ref


def cmd_train_gan(args, cfg: RunConfig, out: Path) -> list:
    ds = _load_dataset(args.dataset)
    spec = _spec_for(cfg, ds.m)
    tcfg = cfg.train_config(noisy=ds.sigma > 0, iters=args.iters)
    truth, p_ref = _references(args)
    state = None
    if args.resume:
        try:
            state = gan_solver.load_checkpoint(args.resume, spec)
        except FileNotFoundError as exc:
            raise CLIError(f"file not found: {args.resume}", EXIT_MISSING) from exc
        except gan_solver.CheckpointError as exc:
            raise CLIError(f"{args.resume}: {exc}", EXIT_CHECKPOINT) from exc
    c, p, history = gan_solver.train(ds, tcfg, spec, truth=truth, p_true=p_ref, state=state,
                                     checkpoint=out / "checkpoint.uvtc")
    gan_solver.write_history_csv(history, out / "history.csv")
    save_pmf_csv(out / "pmf.csv", p)
    files = _save_reconstruction(out, "reconstruction", render_spatial(c))
    return [out / "checkpoint.uvtc", out / "history.csv", out / "pmf.csv", *files]


def cmd_run_em(args, cfg: RunConfig, out: Path) -> list:
    ds = _load_dataset(args.dataset)
    spec = _spec_for(cfg, ds.m)
    e = cfg.em
    sigma = ds.sigma
    if sigma == 0:
        rms = float(np.sqrt(np.mean(ds.lines**2)))
        sigma = e.clean_sigma_fraction * rms
    march = (e.march_rho0, e.march_iters) if e.march_rho0 > 0 else None
    best, runs = em_solver.em_best_of(
        ds, spec, n_init=e.n_init, seed=cfg.seed, scheme=e.init_scheme, iters=e.iters,
        sigma=sigma, sigma_inflation=e.sigma_inflation, n_theta=cfg.dataset.n_theta,
        pcg_tol=e.pcg_tol, pcg_max_iter=e.pcg_max_iter, march=march,
        pmf_smoothing=e.pmf_smoothing, workers=args.workers,
    )
    save_pmf_csv(out / "pmf.csv", AnglePMF(best.p))
    rows = [(i, j, float(ll)) for j, run in enumerate(runs) for i, ll in enumerate(run.trace)]
    _write_rows(out / "trace.csv", ["iteration", "init", "loglik"], rows)
    files = _save_reconstruction(out, "reconstruction", render_spatial(best.c))
    return [out / "pmf.csv", out / "trace.csv", *files]


def _load_matrix_csv(path) -> np.ndarray:
    try:
        return np.loadtxt(io.StringIO(_read_text(path)), delimiter=",", ndmin=2)
    except ValueError as exc:
        raise CLIError(f"{path}: malformed matrix CSV", EXIT_FORMAT) from exc


def cmd_baseline_gl(args, cfg: RunConfig, out: Path) -> list:
    ds = _load_dataset(args.dataset)
    spec = _spec_for(cfg, ds.m)
    b = cfg.baseline
    if args.angle_diffs:
        diffs = _load_matrix_csv(args.angle_diffs)
    else:
        if ds.true_angles is None:
            raise CLIError("dataset has no true angles; pass --angle-diffs", EXIT_USAGE)
        rng = np.random.default_rng(cfg.seed)
        noisy = ds.true_angles + np.deg2rad(b.perturb_deg) * rng.standard_normal(ds.L)
        diffs = baselines.circular_diffs_deg(noisy)
    if diffs.shape != (ds.L, ds.L):
        raise CLIError(f"angle differences must be {ds.L}x{ds.L}", EXIT_FORMAT)
    try:
        W = baselines.weight_matrix(diffs, b.epsilon, b.cutoff)
        angles = baselines.laplacian_embed(W)
    except ValueError as exc:
        raise CLIError(str(exc), EXIT_CHECK_FAILED) from exc
    c = baselines.reconstruct_known_angles(ds, np.mod(angles, 2 * np.pi), spec)
    _write_rows(out / "angles.csv", ["line", "theta"],
                [(i, float(a)) for i, a in enumerate(np.mod(angles, 2 * np.pi))])
    return [out / "angles.csv", *_save_reconstruction(out, "reconstruction", render_spatial(c))]


def cmd_hl_check(args, cfg: RunConfig, out: Path) -> tuple:
    ds = _load_dataset(args.dataset)
    img = load_image(args.image)
    if ds.true_angles is None:
        raise CLIError("dataset has no true angles", EXIT_USAGE)
    rep = moments.hl_check(img, ds.spatial_lines(), ds.true_angles, d_max=args.d_max,
                           tol=args.tol)
    _write_rows(out / "hl.csv", ["d", "relative_deviation", "tol", "passed"],
                [(d, dev, tol, int(ok)) for d, dev, tol, ok in rep.rows()])
    return [out / "hl.csv"], (EXIT_OK if rep.ok else EXIT_CHECK_FAILED)


def cmd_eval(args, cfg: RunConfig, out: Path) -> list:
    img = load_image(args.img)
    ref = load_image(args.ref)
    if img.shape != ref.shape:
        raise CLIError("image sizes differ", EXIT_FORMAT)
    pmf = load_pmf_csv(args.pmf_rec).probs if args.pmf_rec else None
    pref = load_pmf_csv(args.pmf_ref) if args.pmf_ref else None
    sc = recovery_scores(img, pmf, ref, pref, n_rot=args.n_rot)
    al = sc["alignment"]
    row = (sc["psnr"], sc["cc"], sc.get("d_tv", float("nan")), al.rotation_index, int(al.reflected))
    _write_rows(out / "eval.csv", ["psnr", "cc", "d_tv", "rotation_index", "reflected"], [row])
    print(f"psnr={row[0]:.4f} cc={row[1]:.6f} d_tv={row[2]:.6f}")
    return [out / "eval.csv"]


COMMANDS = {
    "phantom": cmd_phantom,
    "synth": cmd_synth,
    "train-gan": cmd_train_gan,
    "run-em": cmd_run_em,
    "baseline-gl": cmd_baseline_gl,
    "hl-check": cmd_hl_check,
    "eval": cmd_eval,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value configuration file")
    common.add_argument("--seed", type=int, help="override [run] seed")
    common.add_argument("--out-dir", default=".", help="output directory (created if missing)")
    common.add_argument("--workers", type=int, default=1,
                        help="processes for independent EM starts (results do not depend on it)")
    common.add_argument("--eval-every", type=int, help="override [run] eval_every")

    ap = argparse.ArgumentParser(prog="uvtomo", description=__doc__.split("\n\n")[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", parents=[common], help="write a synthetic phantom")
    p.add_argument("--kind", default="disks", choices=phantoms.PHANTOM_KINDS)
    p.add_argument("--m", type=int, default=101)

    p = sub.add_parser("synth", parents=[common], help="simulate a projection dataset")
    p.add_argument("--phantom", required=True)
    p.add_argument("--pmf", help="theta,prob CSV (default uniform)")
    p.add_argument("--L", type=int)
    p.add_argument("--snr", type=float, help="signal-to-noise ratio; inf for clean data")

    p = sub.add_parser("train-gan", parents=[common], help="adversarial reconstruction")
    p.add_argument("--dataset", required=True)
    p.add_argument("--iters", type=int)
    p.add_argument("--truth", help="reference image for the history")
    p.add_argument("--pmf-ref", help="reference PMF CSV for the history")
    p.add_argument("--resume", help="UVTC checkpoint to continue from")

    p = sub.add_parser("run-em", parents=[common], help="EM reconstruction")
    p.add_argument("--dataset", required=True)

    p = sub.add_parser("baseline-gl", parents=[common], help="graph-Laplacian baseline")
    p.add_argument("--dataset", required=True)
    p.add_argument("--angle-diffs", help="L x L CSV of angular differences in degrees")

    p = sub.add_parser("hl-check", parents=[common], help="moment consistency check")
    p.add_argument("--dataset", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--d-max", type=int, default=2)
    p.add_argument("--tol", type=float, default=1e-3)

    p = sub.add_parser("eval", parents=[common], help="aligned comparison metrics")
    p.add_argument("--img", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--pmf-rec")
    p.add_argument("--pmf-ref")
    p.add_argument("--n-rot", type=int, default=240)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = RunConfig.load(args.config) if args.config else RunConfig()
        if args.seed is not None:
            cfg.seed = args.seed
        if args.eval_every is not None:
            cfg.eval_every = args.eval_every
        if cfg.eval_every < 1:
            raise CLIError("eval_every must be >= 1", EXIT_CONFIG)
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        result = COMMANDS[args.command](args, cfg, out)
        code = EXIT_OK
        if isinstance(result, tuple):
            result, code = result
        for path in result:
            print(path)
        if code != EXIT_OK:
            print("error: check failed", file=sys.stderr)
        return code
    except CLIError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING


if __name__ == "__main__":
    sys.exit(main())
