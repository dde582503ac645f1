"""Command-line interface.

Every option can also come from an environment variable ``HERS_<OPTION>``
(dashes become underscores) or from a JSON config file given by ``--config``
or ``HERS_CONFIG``.  Flags win over the environment, which wins over the file.

Exit codes: 0 success, 1 other failure, 2 params-hash mismatch, 3 missing keys.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, analysis, bench, client, deepmds, protocol, service, wire
from .codec import PRECISION, l2_normalize
from .gallery import empty_gallery, load_gallery, read_manifest, save_gallery
from .remote import ClientKeys, HersClient, ServiceError
from .ring import PRESETS, ParameterError, make_rng
from .serialization import (
    ParamsMismatchError,
    load_params,
    load_public_keys,
    load_secret_key,
    read_features,
    save_keys,
    write_features,
)

EXIT_OK, EXIT_FAIL, EXIT_PARAMS, EXIT_KEYS = 0, 1, 2, 3

log = logging.getLogger("hers")


class MissingKeysError(FileNotFoundError):
    pass


class CliError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# option registry and precedence
# ---------------------------------------------------------------------------

def _registry(p) -> dict:
    """Per-command ``dest -> (type, default)`` map, carried on the parsed namespace."""
    if not hasattr(p, "hers_options"):
        p.hers_options = {}
        p.set_defaults(_options=p.hers_options)
    return p.hers_options


def _opt(p, *flags, type=str, default=None, **kw):
    action = p.add_argument(*flags, type=type, default=None, **kw)
    _registry(p)[action.dest] = (type, default)
    return action


def _flag(p, *flags, **kw):
    action = p.add_argument(*flags, action="store_const", const=True, default=None, **kw)
    _registry(p)[action.dest] = (_parse_bool, False)
    return action


def _parse_bool(v) -> bool:
    if isinstance(v, bool):
        return v
    return str(v).strip().lower() in ("1", "true", "yes", "on")


def _int_list(v):
    if isinstance(v, (list, tuple)):
        return [int(x) for x in v]
    return [int(x) for x in str(v).split(",") if x.strip()]


def _float_list(v):
    if isinstance(v, (list, tuple)):
        return [float(x) for x in v]
    return [float(x) for x in str(v).split(",") if x.strip()]


def _str_list(v):
    if isinstance(v, (list, tuple)):
        return [str(x) for x in v]
    return [x.strip() for x in str(v).split(",") if x.strip()]


def resolve_options(args: argparse.Namespace, environ=None) -> argparse.Namespace:
    """Fill unset options from ``HERS_*`` variables, then the config file, then defaults."""
    environ = os.environ if environ is None else environ
    config_path = args.config or environ.get("HERS_CONFIG")
    config = {}
    if config_path:
        config = json.loads(Path(config_path).read_text())
        if not isinstance(config, dict):
            raise CliError("config file must hold a JSON object")
        config = {k.replace("-", "_"): v for k, v in config.items()}
    options = getattr(args, "_options", {})
    for dest, value in list(vars(args).items()):
        if value is not None or dest not in options:
            continue
        conv, default = options[dest]
        env = environ.get("HERS_" + dest.upper())
        if env is not None:
            value = conv(env)
        elif dest in config:
            value = conv(config[dest]) if config[dest] is not None else None
        else:
            value = default
        setattr(args, dest, value)
    return args


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------

def _params_from(name: str):
    if name in PRESETS:
        return PRESETS[name]()
    path = Path(name)
    if path.is_file():
        return load_params(path)
    raise CliError(f"unknown params {name!r}; use one of {sorted(PRESETS)} or a params JSON file")


def _need(args, *names):
    for name in names:
        if getattr(args, name) in (None, ""):
            raise CliError(f"--{name.replace('_', '-')} is required")


def _public_keys(args, rotation=True):
    _need(args, "keys")
    try:
        params, pk, ev, rk = load_public_keys(args.keys, rotation=rotation)
    except FileNotFoundError as exc:
        raise MissingKeysError(str(exc)) from None
    if args.params and args.params != "auto":
        want = _params_from(args.params)
        if want.param_hash != params.param_hash:
            raise ParamsMismatchError(f"--params {args.params} does not match the key directory")
    return params, pk, ev, rk


def _keyset(args, rotation=True) -> protocol.KeySet:
    params, pk, ev, rk = _public_keys(args, rotation)
    try:
        sk = load_secret_key(args.keys, params)
    except FileNotFoundError as exc:
        raise MissingKeysError(str(exc)) from None
    return protocol.KeySet(params, sk, pk, ev, rk)


def _load_matrix(path):
    """``(X, precision, prequantized)`` from a feature file or ``.npy`` array."""
    p = Path(path)
    if p.suffix == ".npy":
        X = np.load(p)
        X = X[None, :] if X.ndim == 1 else X
        return X, PRECISION, np.issubdtype(X.dtype, np.integer)
    X, prec = read_features(p)
    return X, (prec or PRECISION), np.issubdtype(X.dtype, np.integer)


def _read_ids(path, count, start):
    if not path:
        return list(range(start, start + count))
    ids = [line.strip() for line in Path(path).read_text().splitlines() if line.strip()]
    if len(ids) != count:
        raise CliError(f"{len(ids)} ids for {count} templates")
    return ids


def _out(args):
    if args.csv_out and args.csv_out != "-":
        return open(args.csv_out, "w", newline="")
    return None


def _emit_rows(args, header, rows):
    fh = _out(args)
    try:
        w = csv.writer(fh or sys.stdout, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    finally:
        if fh:
            fh.close()


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_keygen(args):
    _need(args, "keys")
    params = _params_from(args.params or "test-1024")
    rng = make_rng(args.seed)
    ks = protocol.generate_keys(params, rng, rotations=not args.no_rotation, max_dim=args.dim)
    save_keys(args.keys, params, ks.pk, ks.ev, ks.rk, ks.sk)
    if args.public_out:
        save_keys(args.public_out, params, ks.pk, ks.ev, ks.rk)
    print(f"keys written to {args.keys} (n={params.n}, params hash {params.param_hash.hex()[:16]})")
    return EXIT_OK


def cmd_gen_features(args):
    _need(args, "out", "count", "dim")
    rng = make_rng(args.seed)
    X = l2_normalize(rng.standard_normal((args.count, args.dim)))
    write_features(args.out, X, 0.0)
    print(f"wrote {args.count} unit features of dimension {args.dim} to {args.out}")
    return EXIT_OK


def _load_local_gallery(path, params, encoding, dim):
    d = Path(path)
    if (d / "manifest.json").is_file():
        m = read_manifest(d)
        if m["encoding"] != encoding:
            raise CliError(f"gallery at {d} uses {m['encoding']!r}, not {encoding!r}")
        if bytes.fromhex(m["params_hash"]) != params.param_hash:
            raise ParamsMismatchError(f"gallery at {d} was built under different params")
        return load_gallery(d, params)
    if not dim:
        raise CliError(f"no gallery at {d}; pass --dim to create one")
    return empty_gallery(params, dim, encoding)


def _stage_dirs(gallery):
    return Path(gallery) / "low", Path(gallery) / "full"


def cmd_enroll(args):
    _need(args, "features")
    X, prec, preq = _load_matrix(args.features)
    rng = make_rng(args.seed)
    if args.connect:
        params, pk, _, _ = _public_keys(args, rotation=False)
        with HersClient(service.parse_address(args.connect), ClientKeys(params, pk)) as cl:
            cursor = cl.status().cursor
            ids = _read_ids(args.ids, len(X), cursor)
            ack = cl.enroll(X, ids, prec, rng, preq)
        print(f"enrolled {len(X)} templates; gallery size {ack.cursor}")
        return EXIT_OK
    _need(args, "gallery")
    params, pk, _, _ = _public_keys(args, rotation=False)
    scheme = args.scheme
    if scheme == "two-stage":
        _need(args, "compressor")
        model = deepmds.load_params(args.compressor)
        low_dir, full_dir = _stage_dirs(args.gallery)
        if preq:
            raise CliError("two-stage enrollment needs real-valued features")
        Xf = X
        low = _load_local_gallery(low_dir, params, "hers", model.out_dim)
        full = _load_local_gallery(full_dir, params, "baseline", Xf.shape[1])
        ids = _read_ids(args.ids, len(X), low.k)
        low = protocol.enroll(low, ids, deepmds.compress(Xf, model), pk, prec, rng)
        full = protocol.enroll_baseline(full, ids, Xf, pk, prec, rng)
        save_gallery(low, low_dir)
        save_gallery(full, full_dir)
        print(f"enrolled {len(X)} templates; gallery size {low.k}")
        return EXIT_OK
    gal = _load_local_gallery(args.gallery, params, scheme, args.dim or X.shape[1])
    ids = _read_ids(args.ids, len(X), gal.k)
    enrol = {"hers": protocol.enroll, "baseline": protocol.enroll_baseline, "naive": protocol.enroll_naive}[scheme]
    gal = enrol(gal, ids, X, pk, prec, rng, prequantized=preq)
    save_gallery(gal, args.gallery)
    print(f"enrolled {len(X)} templates; gallery size {gal.k}")
    return EXIT_OK


def _result_rows(qi, res: client.MatchResult):
    return [(qi, r + 1, label, f"{score:.6f}") for r, (label, score) in enumerate(res.ranked)]


def cmd_search(args):
    _need(args, "query")
    Q, prec, preq = _load_matrix(args.query)
    query_rows = range(len(Q))
    if args.index is not None:
        Q = Q[args.index:args.index + 1]
        query_rows = [args.index]
    rng = make_rng(args.seed)
    rows = []
    if args.connect:
        ks = _keyset(args, rotation=False)
        with HersClient(service.parse_address(args.connect), ClientKeys(ks.params, ks.pk, ks.sk)) as cl:
            for qi, q in zip(query_rows, Q):
                rows += _result_rows(qi, cl.search(q, args.top_k, prec, rng, preq))
        _emit_rows(args, ["query", "rank", "id", "score"], rows)
        return EXIT_OK
    _need(args, "gallery")
    scheme = args.scheme
    ks = _keyset(args, rotation=scheme in ("baseline", "two-stage"))
    if scheme == "two-stage":
        _need(args, "compressor")
        model = deepmds.load_params(args.compressor)
        low_dir, full_dir = _stage_dirs(args.gallery)
        low = _load_local_gallery(low_dir, ks.params, "hers", None)
        full = _load_local_gallery(full_dir, ks.params, "baseline", None)
        if preq:
            raise CliError("two-stage search needs real-valued query features")
        for qi, q in zip(query_rows, Q):
            res = protocol.two_stage_search(deepmds.compress(q[None], model)[0], q, low, full,
                                            args.candidates, ks, prec, rng)
            rows += _result_rows(qi, res)[:args.top_k]
        _emit_rows(args, ["query", "rank", "id", "score"], rows)
        return EXIT_OK
    gal = _load_local_gallery(args.gallery, ks.params, scheme, None)
    if scheme in ("baseline",) and ks.rk is None:
        raise MissingKeysError("baseline search needs rotation keys")
    run = {"hers": protocol.search, "baseline": protocol.search_baseline, "naive": protocol.search_naive}[scheme]
    for qi, q in zip(query_rows, Q):
        scores = run(q, gal, ks, prec, None, rng, preq)
        rows += _result_rows(qi, client.decrypt_and_rank(scores, ks.sk, args.top_k, prec))
    _emit_rows(args, ["query", "rank", "id", "score"], rows)
    return EXIT_OK


def cmd_serve(args):
    _need(args, "gallery", "listen")
    _public_keys(args, rotation=False)  # validates the directory and --params
    srv = service.make_server(service.parse_address(args.listen, "0.0.0.0"), args.keys, args.gallery, args.dim,
                              args.max_frame, args.workers)
    host, port = srv.address
    print(f"serving {args.gallery} on {host}:{port}", flush=True)
    try:
        srv.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        srv.server_close()
    return EXIT_OK


def cmd_bench(args):
    if args.keys:
        ks = _keyset(args)
    else:
        params = _params_from(args.params or "test-1024")
        ks = protocol.generate_keys(params, make_rng(args.seed), max_dim=max(args.dims))
    sizes = list(args.sizes)
    if args.chunks:
        sizes += [c * ks.params.n for c in range(1, args.chunks + 1)]
    schemes = [s for s in args.schemes]
    report = bench.run_bench(ks, schemes, args.dims, sizes, args.repeats, not args.no_verify, make_rng(args.seed),
                             progress=lambda r: log.info("%s d=%d m=%d %.3fs", r.scheme, r.d, r.m, r.wall_time))
    fh = _out(args)
    try:
        if fh:
            report.to_csv(fh)
        else:
            sys.stdout.write(report.to_csv())
    finally:
        if fh:
            fh.close()
    bad = report.mismatches()
    if bad or not all(r.correct for r in report.rows):
        print(f"bench: {len(bad)} counter mismatches", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def cmd_train(args):
    rng = make_rng(args.seed)
    if args.features:
        X, prec, preq = _load_matrix(args.features)
        X = X.astype(float) * prec if preq else X
        _need(args, "labels")
        labels = np.array([line.strip() for line in Path(args.labels).read_text().splitlines() if line.strip()])
    else:
        X, labels = deepmds.make_clustered(args.classes, args.per_class, args.dim or 64, args.spread,
                                           intrinsic=args.intrinsic, rng=rng)
    ladder = deepmds.halving_ladder(X.shape[1], args.out_dim)
    cfg = deepmds.ablation_config(args.variant, deepmds.TrainerConfig(
        lr=args.lr, epochs=args.epochs, steps_per_epoch=args.steps, lambda_c=args.lambda_c))
    res = deepmds.train(X, labels, ladder, cfg, rng)
    if args.out:
        deepmds.save_params(args.out, res.params)
    Y = deepmds.compress(X, res.params)
    p_amb = deepmds.precision_at_k(X, labels, X, labels, 10, exclude_self=True)
    p_low = deepmds.precision_at_k(Y, labels, Y, labels, 10, exclude_self=True)
    rows = [("epoch", "total", "L_D", "L_c")] + [(e, f"{t:.6f}", f"{d:.6f}", f"{c:.6f}")
                                                 for e, t, d, c in res.loss_trace]
    _emit_rows(args, rows[0], rows[1:])
    print(f"ladder {ladder}; L_D {res.initial_loss_d:.4f} -> {res.final_loss_d:.4f}; "
          f"precision@10 ambient {p_amb:.3f}, compressed {p_low:.3f}", file=sys.stderr)
    return EXIT_OK


def cmd_attack(args):
    if args.gallery:
        gal = Path(args.gallery)
        if (gal / "manifest.json").is_file():
            m = read_manifest(gal)
            blob = next(iter(sorted(gal.glob("*.ct"))), None)
            try:
                analysis.invert_scores(blob.read_bytes() if blob else b"", np.ones(max(1, m["k"])))
            except analysis.GalleryUnavailableError as exc:
                print(f"{exc}: {m['k']} templates stored as ciphertexts", file=sys.stderr)
    d = args.dim or 64
    rows = analysis.recovery_curve(d, args.ratios, args.trials, args.ridge, make_rng(args.seed))
    _emit_rows(args, ["ratio", "m", "d", "mean_cosine", "std_cosine"],
               [(f"{r:g}", m, d, f"{c:.6f}", f"{s:.6f}") for r, m, c, s in rows])
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

SCHEME_CHOICES = ("hers", "baseline", "naive", "two-stage")


def build_parser() -> argparse.ArgumentParser:
    top = argparse.ArgumentParser(prog="hers", description="Encrypted 1:m vector search.")
    top.add_argument("--version", action="version", version=f"hers {__version__}")
    sub = top.add_subparsers(dest="command", required=True)

    def common(p):
        _opt(p, "--config", help="JSON config file")
        _opt(p, "--params", help="preset name or params JSON file")
        _opt(p, "--keys", help="key directory")
        _opt(p, "--seed", type=int)
        _opt(p, "--csv-out", help="write CSV here instead of stdout")
        _flag(p, "-v", "--verbose")
        return p

    p = common(sub.add_parser("keygen", help="generate a key directory"))
    _opt(p, "--dim", type=int, help="largest template dimension needing rotation keys")
    _opt(p, "--public-out", help="also write a public-only copy for the server")
    _flag(p, "--no-rotation")
    p.set_defaults(func=cmd_keygen)

    p = common(sub.add_parser("gen-features", help="write random unit features"))
    _opt(p, "--count", type=int)
    _opt(p, "--dim", type=int)
    _opt(p, "--out")
    p.set_defaults(func=cmd_gen_features)

    p = common(sub.add_parser("enroll", help="encrypt and enroll templates"))
    _opt(p, "--gallery")
    _opt(p, "--connect", help="host:port of a running server")
    _opt(p, "--features", help="feature file (.hfvc or .npy)")
    _opt(p, "--ids", help="text file with one id per line")
    _opt(p, "--dim", type=int)
    _opt(p, "--scheme", default="hers", choices=SCHEME_CHOICES)
    _opt(p, "--compressor", help="compressor params file (two-stage)")
    p.set_defaults(func=cmd_enroll)

    p = common(sub.add_parser("search", help="encrypted search"))
    _opt(p, "--gallery")
    _opt(p, "--connect")
    _opt(p, "--query", help="query feature file")
    _opt(p, "--index", type=int, help="search only this query row")
    _opt(p, "--top-k", type=int, default=5)
    _opt(p, "--scheme", default="hers", choices=SCHEME_CHOICES)
    _opt(p, "--compressor")
    _opt(p, "--candidates", type=int, default=100, help="two-stage shortlist size K")
    p.set_defaults(func=cmd_search)

    p = common(sub.add_parser("serve", help="run the server role"))
    _opt(p, "--gallery")
    _opt(p, "--listen", help="host:port")
    _opt(p, "--dim", type=int, help="dimension for a new gallery")
    _opt(p, "--max-frame", type=int, default=wire.DEFAULT_MAX_FRAME)
    _opt(p, "--workers", type=int, default=1)
    p.set_defaults(func=cmd_serve)

    p = common(sub.add_parser("bench", help="operation counts and timings"))
    _opt(p, "--scheme", dest="schemes", type=_str_list, default=["hers", "baseline", "naive"],
         help="comma-separated subset of hers,baseline,naive")
    _opt(p, "--dim", dest="dims", type=_int_list, default=[16])
    _opt(p, "--sizes", type=_int_list, default=[64])
    _opt(p, "--chunks", type=int, help="also bench m = n, 2n, ..., chunks*n")
    _opt(p, "--repeats", type=int, default=1)
    _flag(p, "--no-verify")
    p.set_defaults(func=cmd_bench)

    p = common(sub.add_parser("train-compressor", help="train a dimensionality-reduction network"))
    _opt(p, "--features")
    _opt(p, "--labels", help="text file with one class label per line")
    _opt(p, "--out", help="params file to write")
    _opt(p, "--dim", type=int, help="synthetic ambient dimension")
    _opt(p, "--out-dim", type=int, default=8)
    _opt(p, "--classes", type=int, default=50)
    _opt(p, "--per-class", type=int, default=30)
    _opt(p, "--spread", type=float, default=0.6)
    _opt(p, "--intrinsic", type=int, default=12)
    _opt(p, "--epochs", type=int, default=60)
    _opt(p, "--steps", type=int, default=10)
    _opt(p, "--lr", type=float, default=3e-3)
    _opt(p, "--lambda-c", type=float, default=1.0)
    _opt(p, "--variant", default="full", choices=("full", "no_mining", "baseline"))
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("attack-demo", help="score-inversion recovery versus gallery size"))
    _opt(p, "--dim", type=int, default=64)
    _opt(p, "--ratios", type=_float_list, default=[0.125, 0.25, 0.5, 0.75, 1.0, 1.5, 2.0])
    _opt(p, "--trials", type=int, default=20)
    _opt(p, "--ridge", type=float, default=1e-6)
    _opt(p, "--gallery", help="encrypted gallery directory to attempt the attack on")
    p.set_defaults(func=cmd_attack)
    return top


def main(argv=None, environ=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        resolve_options(args, environ)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s")
        return args.func(args)
    except ParamsMismatchError as exc:
        print(f"error: params mismatch: {exc}", file=sys.stderr)
        return EXIT_PARAMS
    except MissingKeysError as exc:
        print(f"error: missing keys: {exc}", file=sys.stderr)
        return EXIT_KEYS
    except ServiceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARAMS if exc.code == wire.E_PARAMS else EXIT_FAIL
    except (CliError, ParameterError, FileNotFoundError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
