"""Command-line pipeline: prepare, train, sample, attack, report.

A run directory holds everything a stage needs, so each stage can be
replayed on its own::

    config.json              resolved configuration plus derived seeds
    split.json transform.json members.npy nonmembers.npy prepare.json
    denoiser.{json,bin} [autoencoder.{json,bin}] loss_trace.csv train.json
    synthetic.csv synthetic_encoded.npy sample.json
    terrors_t<t>.{csv,json} stat.json stat_scores.csv attacknet.{json,bin}
    nn_scores.csv attack.json
    metrics.json roc*.csv ratio.csv [dcr.json]

No timestamps or host details are written, so a rerun with the same
configuration reproduces every file byte for byte.
"""
from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .attacknet import load_attacknet, nn_attack_train, save_attacknet
from .checkpoint import fingerprint
from .dataset import (DataError, SchemaError, TableSchema, Transform, apply_encode, decode,
                      fit_encode, load_table, make_synthetic_table, split_members, subsample,
                      write_table)
from .denoiser import (DivergenceError, TrainConfig, fit_autoencoder, init_denoiser,
                       load_autoencoder, load_denoiser, sample, save_autoencoder, save_denoiser,
                       train)
from .evaluate import dcr, emit_reports, ratio_report, roc, write_json
from .schedule import NoiseSchedule, make_schedule
from .secmi import MEMBER, TErrorMatrix, stat_attack, t_error_matrices, t_error_matrix

log = logging.getLogger("tabsecmi")

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_DIVERGENCE = 3
EXIT_MISSING = 4


class ValidationError(ValueError):
    pass


class MissingArtifact(FileNotFoundError):
    pass


DEFAULTS = {
    "data": None,
    "schema": None,
    "member_fraction": 0.5,
    "subsample_n": None,
    "include_categorical": True,
    "schedule": {"kind": "cosine", "T": 200, "params": {}},
    "denoiser": {
        "hidden": [128, 128, 128],
        "embed_dim": 16,
        "train": {"batch_size": 64, "epochs": 1000, "learning_rate": 2e-3, "optimizer": "adam"},
    },
    "latent": False,
    "autoencoder": {
        "latent_dim": 4,
        "hidden": None,
        "train": {"batch_size": 64, "epochs": 500, "learning_rate": 1e-3, "optimizer": "adam"},
    },
    "attack": {
        "kind": "both",
        "t": 50,
        "calibration_fraction": 0.2,
        "train_fraction": 0.2,
        "features": "dims",
        "channels": 16,
        "train": {"batch_size": 64, "epochs": 200, "learning_rate": 1e-3, "optimizer": "adam"},
    },
    "fpr_targets": [0.01, 0.001],
    "ratio_timesteps": {"start": 20, "stop": 300, "step": 10},
    "n_samples": 1000,
    "seed": 0,
}

STAGES = ("split", "subsample", "denoiser", "autoencoder", "sample", "attack.stat", "attack.nn", "dcr")


def derive_seed(master: int, stage: str) -> int:
    """Stage seed: first 4 bytes of sha256("<master>:<stage>")."""
    digest = hashlib.sha256(f"{int(master)}:{stage}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


def _merge(base, override):
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _train_config(section, seed) -> TrainConfig:
    known = {"batch_size", "epochs", "learning_rate", "optimizer", "max_steps"}
    unknown = set(section) - known
    if unknown:
        raise ValidationError(f"unknown training keys: {sorted(unknown)}")
    try:
        return TrainConfig(seed=seed, **section)
    except (TypeError, ValueError) as exc:
        raise ValidationError(str(exc)) from exc


def resolve_config(config_path=None, overrides=None) -> dict:
    """Merge defaults < config file < flag overrides and validate."""
    cfg = copy.deepcopy(DEFAULTS)
    if config_path is not None:
        path = Path(config_path)
        if not path.exists():
            raise ValidationError(f"config file not found: {path}")
        try:
            user = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ValidationError(f"config {path}: invalid JSON ({exc})") from exc
        unknown = set(user) - set(DEFAULTS)
        if unknown:
            raise ValidationError(f"config {path}: unknown keys {sorted(unknown)}")
        for key in ("data", "schema"):
            if user.get(key) is not None:
                user[key] = str((path.parent / user[key]).resolve())
        cfg = _merge(cfg, user)
    cfg = _merge(cfg, overrides or {})
    validate_config(cfg)
    cfg["seeds"] = {stage: derive_seed(cfg["seed"], stage) for stage in STAGES}
    return cfg


def validate_config(cfg):
    for key in ("data", "schema"):
        if cfg[key] is None:
            raise ValidationError(f"config is missing {key!r}")
        if not Path(cfg[key]).exists():
            raise ValidationError(f"{key} file not found: {cfg[key]}")
    if not 0.0 < float(cfg["member_fraction"]) < 1.0:
        raise ValidationError(f"member_fraction must lie in (0, 1), got {cfg['member_fraction']}")
    if cfg["subsample_n"] is not None and int(cfg["subsample_n"]) <= 0:
        raise ValidationError(f"subsample_n must be positive, got {cfg['subsample_n']}")
    targets = cfg["fpr_targets"]
    if not targets or not all(0.0 < float(f) <= 1.0 for f in targets):
        raise ValidationError(f"fpr_targets must be a non-empty subset of (0, 1], got {targets}")
    T = int(cfg["schedule"]["T"])
    if T < 3:
        raise ValidationError(f"schedule T must be at least 3, got {T}")
    try:
        make_schedule(cfg["schedule"]["kind"], T, **cfg["schedule"].get("params", {}))
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"schedule: {exc}") from exc
    att = cfg["attack"]
    if att["kind"] not in ("stat", "nn", "both"):
        raise ValidationError(f"attack kind must be stat, nn or both, got {att['kind']!r}")
    if not 1 <= int(att["t"]) <= T - 1:
        raise ValidationError(f"attack timestep {att['t']} outside [1, {T - 1}]")
    for key in ("calibration_fraction", "train_fraction"):
        if not 0.0 < float(att[key]) < 1.0:
            raise ValidationError(f"attack {key} must lie in (0, 1), got {att[key]}")
    if att["features"] not in ("dims", "columns"):
        raise ValidationError(f"attack features must be dims or columns, got {att['features']!r}")
    if int(cfg["n_samples"]) < 0:
        raise ValidationError("n_samples must be non-negative")
    for section in (cfg["denoiser"]["train"], cfg["autoencoder"]["train"], att["train"]):
        _train_config(section, 0)


# ---------------------------------------------------------------------------
# run directory helpers


class RunLock:
    """Exclusive ``.lock`` file; a second writer fails fast."""

    def __init__(self, run_dir):
        self.path = Path(run_dir) / ".lock"

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError as exc:
            raise ValidationError(f"run directory is locked by another writer: {self.path}") from exc
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)
        return False


def _need(path):
    path = Path(path)
    if not path.exists():
        raise MissingArtifact(f"missing artifact: {path}")
    return path


def _file_digest(*paths):
    h = hashlib.sha256()
    for p in paths:
        h.update(_need(p).read_bytes())
    return h.hexdigest()[:16]


def _save_npy(path, arr):
    np.save(path, np.ascontiguousarray(arr, dtype="<f8"), allow_pickle=False)


def _load_npy(path):
    return np.load(_need(path), allow_pickle=False)


def load_run_config(run_dir) -> dict:
    return json.loads(_need(Path(run_dir) / "config.json").read_text(encoding="utf-8"))


def _schedule(cfg) -> NoiseSchedule:
    s = cfg["schedule"]
    return make_schedule(s["kind"], int(s["T"]), **s.get("params", {}))


def _transform(run_dir) -> Transform:
    return Transform.from_dict(json.loads(_need(Path(run_dir) / "transform.json").read_text(encoding="utf-8")))


def _prepare_digest(run_dir):
    rd = Path(run_dir)
    return _file_digest(rd / "split.json", rd / "transform.json", rd / "members.npy", rd / "nonmembers.npy")


# ---------------------------------------------------------------------------
# stages


def cmd_prepare(cfg: dict, run_dir) -> Path:
    rd = Path(run_dir)
    rd.mkdir(parents=True, exist_ok=True)
    try:
        schema = TableSchema.load(cfg["schema"])
        data = load_table(cfg["data"], schema)
    except FileNotFoundError as exc:
        raise ValidationError(str(exc)) from exc
    seeds = cfg["seeds"]
    if cfg["subsample_n"] is not None:
        data = subsample(data, int(cfg["subsample_n"]), seeds["subsample"])
    split = split_members(data, float(cfg["member_fraction"]), seeds["split"])
    members = data.take(split.member_indices)
    nonmembers = data.take(split.nonmember_indices)
    enc = fit_encode(members, bool(cfg["include_categorical"]))
    enc_non = apply_encode(enc.transform, nonmembers)
    write_json(rd / "config.json", cfg)
    write_json(rd / "split.json", split.to_dict())
    write_json(rd / "transform.json", enc.transform.to_dict())
    _save_npy(rd / "members.npy", enc.values)
    _save_npy(rd / "nonmembers.npy", enc_non.values)
    write_json(rd / "prepare.json", {
        "n_rows": data.n_rows, "n_members": members.n_rows, "n_nonmembers": nonmembers.n_rows,
        "encoded_dim": enc.transform.dim, "normalization_fitted_on": "members",
        "fingerprint": _prepare_digest(rd)})
    log.info("prepared %d members / %d non-members (d=%d)", members.n_rows, nonmembers.n_rows,
             enc.transform.dim)
    return rd


def cmd_train(run_dir) -> str:
    rd = Path(run_dir)
    cfg = load_run_config(rd)
    prep = json.loads(_need(rd / "prepare.json").read_text(encoding="utf-8"))
    x = _load_npy(rd / "members.npy")
    sched = _schedule(cfg)
    record = {"prepare_fingerprint": _prepare_digest(rd)}
    if record["prepare_fingerprint"] != prep["fingerprint"]:
        raise ValidationError("prepare artifacts changed since they were written; rerun prepare")
    if cfg["latent"]:
        ae_cfg = cfg["autoencoder"]
        ae = fit_autoencoder(x, int(ae_cfg["latent_dim"]),
                             _train_config(ae_cfg["train"], cfg["seeds"]["autoencoder"]),
                             hidden=ae_cfg["hidden"])
        record["autoencoder_fingerprint"] = save_autoencoder(ae, rd / "autoencoder")
        x = ae.encode(x)
    den = cfg["denoiser"]
    model = init_denoiser(x.shape[1], tuple(den["hidden"]), int(den["embed_dim"]),
                          cfg["seeds"]["denoiser"], sched.T)
    model, trace = train(model, x, sched, _train_config(den["train"], cfg["seeds"]["denoiser"]))
    with open(rd / "loss_trace.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss"])
        for i, v in enumerate(trace):
            w.writerow([i, repr(float(v))])
    record["denoiser_fingerprint"] = save_denoiser(model, rd / "denoiser")
    record["final_loss"] = trace[-1] if trace else None
    write_json(rd / "train.json", record)
    log.info("trained denoiser, final loss %.6f", record["final_loss"] or float("nan"))
    return record["denoiser_fingerprint"]


def _verified_target(rd, cfg):
    """Load the target (and autoencoder) after checking fingerprints."""
    rec = json.loads(_need(rd / "train.json").read_text(encoding="utf-8"))
    if rec["prepare_fingerprint"] != _prepare_digest(rd):
        raise ValidationError("target checkpoint was trained on different prepare artifacts")
    _need(rd / "denoiser.json")
    if fingerprint(rd / "denoiser") != rec["denoiser_fingerprint"]:
        raise ValidationError("denoiser checkpoint fingerprint does not match train.json")
    model, _ = load_denoiser(rd / "denoiser")
    ae = None
    if cfg["latent"]:
        _need(rd / "autoencoder.json")
        if fingerprint(rd / "autoencoder") != rec.get("autoencoder_fingerprint"):
            raise ValidationError("autoencoder checkpoint fingerprint does not match train.json")
        ae, _ = load_autoencoder(rd / "autoencoder")
    return model, ae, rec


def cmd_sample(run_dir, n=None) -> Path:
    rd = Path(run_dir)
    cfg = load_run_config(rd)
    n = int(cfg["n_samples"] if n is None else n)
    if n <= 0:
        raise ValidationError(f"number of samples must be positive, got {n}")
    model, ae, _ = _verified_target(rd, cfg)
    z = sample(model, _schedule(cfg), n, np.random.default_rng(cfg["seeds"]["sample"]))
    x = ae.decode(z) if ae is not None else z
    transform = _transform(rd)
    write_table(rd / "synthetic.csv", decode(transform, x))
    _save_npy(rd / "synthetic_encoded.npy", x)
    write_json(rd / "sample.json", {"n": n, "seed": cfg["seeds"]["sample"]})
    return rd / "synthetic.csv"


def _attack_inputs(rd, cfg, ae):
    mem = _load_npy(rd / "members.npy")
    non = _load_npy(rd / "nonmembers.npy")
    x = np.vstack([mem, non])
    labels = np.r_[np.full(len(mem), MEMBER), np.zeros(len(non), dtype=np.int64)]
    if ae is not None:
        return ae.encode(x), labels, []
    return x, labels, _transform(rd).column_map


def _write_scores(path, indices, labels, scores):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row_id", "label", "score"])
        for i, lab, s in zip(indices, labels, scores):
            w.writerow([int(i), int(lab), repr(float(s))])


def _read_scores(path):
    ids, labels, scores = [], [], []
    with open(_need(path), newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader)
        for rec in reader:
            ids.append(int(rec[0]))
            labels.append(int(rec[1]))
            scores.append(float(rec[2]))
    return np.array(ids), np.array(labels), np.array(scores)


def cmd_attack(run_dir, kind=None, t=None) -> dict:
    rd = Path(run_dir)
    cfg = load_run_config(rd)
    att = cfg["attack"]
    kind = kind or att["kind"]
    t = int(att["t"] if t is None else t)
    model, ae, rec = _verified_target(rd, cfg)
    sched = _schedule(cfg)
    x, labels, column_map = _attack_inputs(rd, cfg, ae)
    if x.shape[1] != model.d:
        raise ValidationError(f"attack data width {x.shape[1]} != target width {model.d}")
    if len(set(labels.tolist())) < 2:
        raise ValidationError("attack needs both members and non-members")
    matrix = t_error_matrix(model, x, labels, t, sched)
    if column_map:
        matrix.column_map = list(column_map)
    matrix.save(rd / f"terrors_t{t}.csv", {"latent": bool(cfg["latent"])})
    summary = {"t": t, "kind": kind, "target_fingerprint": rec["denoiser_fingerprint"],
               "terrors": f"terrors_t{t}.csv"}
    if kind in ("stat", "both"):
        res = stat_attack(matrix, float(att["calibration_fraction"]), cfg["seeds"]["attack.stat"])
        write_json(rd / "stat.json", {"threshold": res.threshold, **res.calibration_meta,
                                      "calibration_indices": res.calibration_indices,
                                      "heldout_indices": res.heldout_indices})
        _write_scores(rd / "stat_scores.csv", res.heldout_indices, labels[res.heldout_indices],
                      res.heldout_scores)
        summary["stat"] = {"threshold": res.threshold}
    if kind in ("nn", "both"):
        net, res = nn_attack_train(matrix, float(att["train_fraction"]),
                                   _train_config(att["train"], cfg["seeds"]["attack.nn"]),
                                   int(att["channels"]), att["features"])
        summary["nn"] = {"fingerprint": save_attacknet(net, rd / "attacknet", {"t": t}),
                         "final_loss": res.loss_trace[-1] if res.loss_trace else None}
        _write_scores(rd / "nn_scores.csv", res.heldout_indices, res.heldout_labels, res.heldout_scores)
    write_json(rd / "attack.json", summary)
    return summary


def ratio_sweep(sweep, T) -> list:
    """Sweep timesteps from a ``{start, stop, step}`` range or a list, clipped to ``[1, T - 1]``."""
    if isinstance(sweep, dict):
        ts = range(int(sweep["start"]), int(sweep["stop"]) + 1, int(sweep["step"]))
    else:
        ts = sweep
    return sorted({int(t) for t in ts if 1 <= int(t) <= T - 1})


def cmd_report(run_dir) -> dict:
    rd = Path(run_dir)
    cfg = load_run_config(rd)
    summary = json.loads(_need(rd / "attack.json").read_text(encoding="utf-8"))
    targets = [float(f) for f in cfg["fpr_targets"]]
    rocs = {}
    if "stat" in summary:
        _, lab, scores = _read_scores(rd / "stat_scores.csv")
        rocs["stat"] = roc(scores, lab, higher_is_member=False, fpr_targets=targets)
    if "nn" in summary:
        load_attacknet(rd / "attacknet")  # fails loudly if missing or corrupt
        _, lab, scores = _read_scores(rd / "nn_scores.csv")
        rocs["nn"] = roc(scores, lab, higher_is_member=True, fpr_targets=targets)
    model, ae, rec = _verified_target(rd, cfg)
    sched = _schedule(cfg)
    x, labels, column_map = _attack_inputs(rd, cfg, ae)
    sweep = ratio_sweep(cfg["ratio_timesteps"], sched.T)
    mats = t_error_matrices(model, x, labels, sweep, sched)
    for m in mats:
        if column_map:
            m.column_map = list(column_map)
    ratio = ratio_report(mats) if mats else None
    dcr_report = None
    if (rd / "synthetic_encoded.npy").exists():
        dcr_report = dcr(_load_npy(rd / "synthetic_encoded.npy"), _load_npy(rd / "members.npy"),
                         _load_npy(rd / "nonmembers.npy"), cfg["seeds"]["dcr"])
    metrics = {"config": {k: v for k, v in cfg.items() if k != "seeds"}, "seeds": cfg["seeds"],
               "fingerprints": {k: v for k, v in rec.items() if k.endswith("fingerprint")},
               "attack_t": summary["t"], "ratio_timesteps": sweep}
    metrics["fingerprints"]["attacknet"] = summary.get("nn", {}).get("fingerprint")
    emit_reports(rd, metrics, rocs, ratio, dcr_report)
    return json.loads((rd / "metrics.json").read_text(encoding="utf-8"))


def cmd_all(cfg, run_dir, n_samples=None, kind=None, t=None) -> dict:
    cmd_prepare(cfg, run_dir)
    cmd_train(run_dir)
    n = cfg["n_samples"] if n_samples is None else n_samples
    if int(n) > 0:
        cmd_sample(run_dir, n)
    cmd_attack(run_dir, kind, t)
    return cmd_report(run_dir)


def cmd_make_table(out_dir, n_rows, seed) -> tuple:
    """Write the built-in synthetic mixed-type table and its schema."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = make_synthetic_table(int(n_rows), int(seed))
    write_table(out / "table.csv", data)
    write_json(out / "schema.json", data.schema.to_dict())
    return out / "table.csv", out / "schema.json"


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tabsecmi", description="Membership-inference audit of a tabular diffusion model.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=False):
        sp.add_argument("--run-dir", required=True, type=Path)
        if config:
            sp.add_argument("--config", type=Path)
            sp.add_argument("--seed", type=int)
            sp.add_argument("--latent", action="store_true", default=None)
            sp.add_argument("--subsample", type=int)

    common(sub.add_parser("prepare", help="split, encode and persist the table"), config=True)
    common(sub.add_parser("train", help="train the target denoiser on members"))
    sp = sub.add_parser("sample", help="generate synthetic rows")
    common(sp)
    sp.add_argument("--n-samples", type=int)
    sp = sub.add_parser("attack", help="compute t-errors and run the attacks")
    common(sp)
    sp.add_argument("--t", type=int)
    sp.add_argument("--attack", choices=("stat", "nn", "both"))
    common(sub.add_parser("report", help="write metrics.json and CSV reports"))
    sp = sub.add_parser("all", help="run every stage in order")
    common(sp, config=True)
    sp.add_argument("--t", type=int)
    sp.add_argument("--attack", choices=("stat", "nn", "both"))
    sp.add_argument("--n-samples", type=int)
    sp = sub.add_parser("make-table", help="write the built-in synthetic demo table")
    sp.add_argument("--out", required=True, type=Path)
    sp.add_argument("--rows", type=int, default=1024)
    sp.add_argument("--seed", type=int, default=0)
    return p


def _overrides(args) -> dict:
    out = {}
    if getattr(args, "seed", None) is not None:
        out["seed"] = args.seed
    if getattr(args, "latent", None):
        out["latent"] = True
    if getattr(args, "subsample", None) is not None:
        out["subsample_n"] = args.subsample
    if getattr(args, "t", None) is not None:
        out.setdefault("attack", {})["t"] = args.t
    if getattr(args, "attack", None) is not None:
        out.setdefault("attack", {})["kind"] = args.attack
    if getattr(args, "n_samples", None) is not None:
        out["n_samples"] = args.n_samples
    return out


def _dispatch(args):
    if args.command == "make-table":
        for path in cmd_make_table(args.out, args.rows, args.seed):
            print(path)
        return
    if args.command not in ("prepare", "all") and not Path(args.run_dir).is_dir():
        raise MissingArtifact(f"run directory not found: {args.run_dir}")
    with RunLock(args.run_dir):
        if args.command in ("prepare", "all"):
            cfg = resolve_config(args.config, _overrides(args))
            if args.command == "prepare":
                cmd_prepare(cfg, args.run_dir)
            else:
                metrics = cmd_all(cfg, args.run_dir)
                print(json.dumps({k: metrics.get(k) for k in ("primary_attack", "auc", "tpr_at")}, sort_keys=True))
        elif args.command == "train":
            cmd_train(args.run_dir)
        elif args.command == "sample":
            print(cmd_sample(args.run_dir, args.n_samples))
        elif args.command == "attack":
            cmd_attack(args.run_dir, args.attack, args.t)
        elif args.command == "report":
            metrics = cmd_report(args.run_dir)
            print(json.dumps({k: metrics.get(k) for k in ("primary_attack", "auc", "tpr_at")}, sort_keys=True))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _dispatch(args)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (MissingArtifact, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except FloatingPointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (ValidationError, SchemaError, DataError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
