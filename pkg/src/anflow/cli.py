"""Command-line entry point.

Subcommands: ``train``, ``finetune``, ``hmc``, ``sample``, ``observe``,
``hwsim`` and ``sweep``. Exit status is 0 on success, 1 for usage or
configuration errors and 2 for numerical failures.
"""

from __future__ import annotations

import argparse
import csv
import io as _io
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from .config import RunConfig, apply_override, load_config, parse_config, sweep_values
from .errors import ConfigError, LFTError, NumericError
from .flow import init_weights
from .hardware import (NoiseModel, degraded_inference, hardware_report, layer_profiles,
                       lora_recovery)
from .io import read_checkpoint, read_ensemble, write_checkpoint, write_ensemble
from .observables import measure
from .samplers import Ensemble, HmcParams, hmc_chain, propose_and_sample
from .training import evaluate_ess, finetune_lora, train

log = logging.getLogger("anflow")

ALL_OBS = ("magnetization", "susceptibility", "ising_energy", "correlation_length", "tau_int",
           "mass_gap", "chiral_condensate")
CSV_COLUMNS = ("observable", "value", "error", "n_configs", "lattice", "action_kind",
               "params_json", "seed")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _workers(k: int) -> int:
    cap = os.environ.get("LFT_THREADS")
    try:
        cap = int(cap) if cap else (os.cpu_count() or 1)
    except ValueError:
        raise ConfigError(f"LFT_THREADS must be an integer, got {cap!r}") from None
    return max(1, min(k, cap))


def _chain_seeds(seed: int, k: int) -> list[int]:
    if k == 1:
        return [seed]
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(k)]


def _run_chains(fn, args_for_seed, seed: int, k: int) -> Ensemble:
    """Run ``k`` independent seeded chains and concatenate them in seed order."""
    if k < 1:
        raise ConfigError("--chains must be >= 1")
    seeds = _chain_seeds(seed, k)
    nw = _workers(k)
    if nw == 1:
        parts = [fn(*args_for_seed(s)) for s in seeds]
    else:
        with ProcessPoolExecutor(nw) as ex:
            parts = list(ex.map(fn, *zip(*[args_for_seed(s) for s in seeds])))
    if k == 1:
        return parts[0]
    ens = Ensemble.concatenate(parts)
    ens.seed = seed
    return ens


def _dump_json(path, obj):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def _config_from_ckpt(w, config_path, overrides) -> RunConfig:
    if config_path:
        return load_config(config_path, overrides)
    doc = w.provenance.get("run_config")
    if doc is None:
        raise ConfigError("checkpoint has no stored run configuration; pass --config")
    return parse_config(doc, None, overrides)


# ------------------------------------------------------------------ commands

def cmd_train(a) -> int:
    rc = load_config(a.config, a.set)
    w = init_weights(rc.flow, seed=rc.seed)
    w, rep = train(w, rc.action(), rc.train)
    w.provenance["run_config"] = rc.doc
    write_checkpoint(a.out, w)
    report = {k: v for k, v in rep.to_dict().items() if k != "wall_clock"}
    _dump_json(a.report or a.out + ".report.json", report)
    log.info("trained %d steps in %.1fs, final ESS %s", rep.steps, rep.wall_clock, rep.final_ess)
    print(f"final_ess={rep.final_ess}")
    return 0


def cmd_finetune(a) -> int:
    w = read_checkpoint(a.ckpt)
    rc = _config_from_ckpt(w, a.config, a.set)
    if tuple(rc.lattice) != tuple(w.config.lattice):
        raise ConfigError(f"lattice {rc.lattice} does not match checkpoint {w.config.lattice}")
    w2, rep = finetune_lora(w, rc.action(), rc.finetune)
    w2.provenance["run_config"] = rc.doc
    write_checkpoint(a.out, w2)
    _dump_json(a.report or a.out + ".report.json",
               {k: v for k, v in rep.to_dict().items() if k != "wall_clock"})
    print(f"final_ess={rep.final_ess}")
    return 0


def _hmc_one(dims, kind, params, hp_dict, seed):
    from .lattice import make_action
    return hmc_chain(tuple(dims), make_action(kind, params), HmcParams(**{**hp_dict, "seed": seed}))


def cmd_hmc(a) -> int:
    rc = load_config(a.config, a.set)
    hp = dict(vars(rc.hmc))
    hp["n_samples"] = a.n * rc.hmc.thin
    ens = _run_chains(_hmc_one, lambda s: (rc.lattice, rc.action_kind, rc.action_params, hp, s),
                      rc.seed, a.chains)
    ens.meta["run_config"] = rc.doc
    write_ensemble(a.out, ens)
    print(f"acceptance={ens.acceptance_rate:.4f}")
    return 0


def _sample_one(ckpt_path, kind, params, n, seed):
    from .lattice import make_action
    return propose_and_sample(read_checkpoint(ckpt_path), make_action(kind, params), n, seed)


def cmd_sample(a) -> int:
    w = read_checkpoint(a.ckpt)
    rc = _config_from_ckpt(w, a.config, a.set)
    seed = rc.seed if a.seed is None else a.seed
    ens = _run_chains(_sample_one, lambda s: (a.ckpt, rc.action_kind, rc.action_params, a.n, s),
                      seed, a.chains)
    ens.meta["run_config"] = rc.doc
    write_ensemble(a.out, ens)
    acc = float(np.mean(ens.accepted[1:])) if len(ens) > 1 else 1.0
    print(f"acceptance={acc:.4f}")
    return 0


def _rows_for(ens: Ensemble, names, resamples, seed, block, strict=True):
    params = ens.meta.get("action_params", {})
    dims = "x".join(str(d) for d in ens.geometry)
    for name in names:
        try:
            ((_, val, err),) = measure(ens, [name], resamples, seed, block)
        except NumericError as e:
            if strict:
                raise
            log.warning("%s not measurable: %s", name, e)
            val = err = float("nan")
        yield (name, repr(float(val)), repr(float(err)), len(ens), dims,
               ens.meta.get("action", "unknown"), json.dumps(params, sort_keys=True),
               ens.seed)


def _write_csv(rows, out):
    buf = _io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(CSV_COLUMNS)
    wr.writerows(rows)
    if out:
        with open(out, "w", encoding="utf-8", newline="") as f:
            f.write(buf.getvalue())
    else:
        sys.stdout.write(buf.getvalue())


def cmd_observe(a) -> int:
    if a.format != "csv":
        raise ConfigError(f"unsupported format {a.format!r}")
    ens = read_ensemble(a.ens)
    names = [n.strip() for n in a.obs.split(",") if n.strip()] if a.obs else list(ALL_OBS)
    bad = [n for n in names if n not in ALL_OBS]
    if bad:
        raise ConfigError(f"unknown observable {bad[0]!r}; choose from {', '.join(ALL_OBS)}")
    rows = list(_rows_for(ens, names, a.resamples, a.seed, a.block, strict=bool(a.obs)))
    _write_csv(rows, a.out)
    return 0


def cmd_hwsim(a) -> int:
    w = read_checkpoint(a.ckpt)
    rc = _config_from_ckpt(w, a.config, a.set)
    action = rc.action()
    sigma = rc.noise.sigma if a.noise_sigma is None else a.noise_sigma
    noise = NoiseModel(sigma=sigma, seed=rc.noise.seed)
    deg, drep = degraded_inference(w, action, noise, rc.conductance, rc.quantize)
    out = {"noise_sigma": sigma, "noise_seed": noise.seed, "clean_ess": drep.clean_ess,
           "degraded_ess": drep.degraded_ess}
    if a.recover:
        rec, rrep = lora_recovery(deg, action, rc.finetune, drep.clean_ess)
        out["recovered_ess"] = rrep.recovered_ess
        if a.out:
            write_checkpoint(a.out, rec)
    rep = hardware_report(layer_profiles(w.config), rc.costs, {"inference": out})
    if a.report:
        _dump_json(a.report, rep)
    print(json.dumps(out, sort_keys=True))
    return 0


def cmd_sweep(a) -> int:
    base = load_config(a.config, a.set).doc
    path, values = sweep_values(a.vary)
    names = [n.strip() for n in a.obs.split(",")] if a.obs else \
        ["magnetization", "susceptibility", "ising_energy", "correlation_length"]
    rows = []
    w0 = read_checkpoint(a.ckpt) if a.ckpt else None
    for v in values:
        rc = parse_config(apply_override(base, f"{path}={json.dumps(v)}"))
        if w0 is None:
            hp = dict(vars(rc.hmc))
            hp["n_samples"] = a.n * rc.hmc.thin
            ens = _hmc_one(rc.lattice, rc.action_kind, rc.action_params, hp, rc.seed)
        else:
            w, _ = finetune_lora(w0, rc.action(), rc.finetune)
            log.info("%s=%s: ESS after finetune %.3f", path, v,
                     evaluate_ess(w, rc.action(), 2048, rc.seed))
            ens = propose_and_sample(w, rc.action(), a.n, rc.seed)
        rows.extend(_rows_for(ens, names, a.resamples, rc.seed, 1))
    _write_csv(rows, a.out)
    return 0


# -------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="anflow", description="Flow-based lattice field theory sampling")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="run configuration (JSON)")
        sp.add_argument("--set", action="append", default=[], metavar="KEY.PATH=VALUE",
                        help="dotted-path override, repeatable")

    sp = sub.add_parser("train", help="train a flow by reverse KL")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--report")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("finetune", help="LoRA-only adaptation to a new action")
    common(sp, False)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--report")
    sp.set_defaults(fn=cmd_finetune)

    sp = sub.add_parser("hmc", help="hybrid Monte Carlo ensemble")
    common(sp)
    sp.add_argument("--n", type=int, required=True, help="retained configurations per chain")
    sp.add_argument("--out", required=True)
    sp.add_argument("--chains", type=int, default=1)
    sp.set_defaults(fn=cmd_hmc)

    sp = sub.add_parser("sample", help="flow proposals with Metropolis correction")
    common(sp, False)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--n", type=int, required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--chains", type=int, default=1)
    sp.set_defaults(fn=cmd_sample)

    sp = sub.add_parser("observe", help="measure observables on an ensemble")
    sp.add_argument("--ens", required=True)
    sp.add_argument("--obs", help=f"comma list from {','.join(ALL_OBS)}")
    sp.add_argument("--format", default="csv")
    sp.add_argument("--out")
    sp.add_argument("--resamples", type=int, default=1000)
    sp.add_argument("--block", type=int, default=1)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(fn=cmd_observe)

    sp = sub.add_parser("hwsim", help="noisy analog deployment and cost report")
    common(sp, False)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--noise-sigma", type=float)
    sp.add_argument("--recover", action="store_true")
    sp.add_argument("--report")
    sp.add_argument("--out", help="write the recovered checkpoint here")
    sp.set_defaults(fn=cmd_hwsim)

    sp = sub.add_parser("sweep", help="scan one configuration value")
    common(sp)
    sp.add_argument("--vary", required=True, metavar="KEY.PATH=START:STOP:STEP")
    sp.add_argument("--n", type=int, default=500)
    sp.add_argument("--ckpt", help="finetune this flow per value instead of running HMC")
    sp.add_argument("--obs")
    sp.add_argument("--resamples", type=int, default=200)
    sp.add_argument("--out")
    sp.set_defaults(fn=cmd_sweep)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    a = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return a.fn(a)
    except ConfigError as e:
        print(f"anflow {a.command}: configuration error: {e}", file=sys.stderr)
        return 1
    except NumericError as e:
        print(f"anflow {a.command}: numerical failure: {e}", file=sys.stderr)
        return 2
    except LFTError as e:
        print(f"anflow {a.command}: error: {e}", file=sys.stderr)
        return 2
    except (FileNotFoundError, IsADirectoryError, PermissionError) as e:
        print(f"anflow {a.command}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
