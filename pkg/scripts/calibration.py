"""Lowest-bin calibration of both models on a fresh population.

Fits both models on the preset's training split, then scores a fresh
population drawn from the same course catalogue and prints the 20-bin
table.  ``--n-users`` sets the size of the fitting population; larger
populations shrink the noise in the singleton rates that anchor every
course engagement.  ``--true-rates`` replaces the estimated singleton rates
by the generator's targets.

    python scripts/calibration.py --n-users 50000 --fresh-users 120000
"""

import argparse
import dataclasses

from betaend import bursts, evaluation, ingest, synthgen
from betaend.estimation import FitConfig, event_table, fit_betaend, fit_logistic, predict, split_users
from betaend.simplex import SimplexConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--n-users", type=int, default=50_000)
    ap.add_argument("--fresh-users", type=int, default=120_000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--bins", type=int, default=20)
    ap.add_argument("--true-rates", action="store_true")
    ap.add_argument("--skip-logistic", action="store_true")
    ap.add_argument("--max-evals", type=int, default=200_000)
    args = ap.parse_args()

    config = synthgen.fun_like_preset(seed=args.seed, n_users=args.n_users)
    events, truth = synthgen.generate(config)
    profiles, _ = ingest.build_profiles(events, threshold=6 * 3600)
    split = split_users(profiles, args.seed, 0.8)
    records = ingest.course_records(profiles, ingest.certificate_courses(events), split.train)
    if args.true_rates:
        records = {
            c: dataclasses.replace(r, c_singleton_smoothed=truth.singleton_rates[c]) if c in truth.singleton_rates else r
            for c, r in records.items()
        }
    train = event_table(profiles, split.train)
    fc = FitConfig(optimizer=SimplexConfig(max_evals=args.max_evals))
    fits = {"betaend": fit_betaend(train, records, fc, seed=args.seed)}
    if not args.skip_logistic:
        fits["logistic"] = fit_logistic(train, records, fc, seed=args.seed)
    for m, f in fits.items():
        print(f"{m}: nll={f.nll:.1f} converged={f.converged} evals={f.n_evaluations}")

    fresh = dataclasses.replace(config, seed=args.seed + 1000, course_seed=args.seed, n_users=args.fresh_users)
    fresh_events, _ = synthgen.generate(fresh)
    fresh_profiles = ingest.group_by_user(fresh_events)
    bursts.assign_bursts(fresh_profiles, 6 * 3600)
    table = event_table(fresh_profiles)
    for m, f in fits.items():
        bins = evaluation.calibration_table(predict(f, table), args.bins)
        print(f"\n# {m}: {sum(b.count for b in bins)} scored events")
        print("bin  count  mean_predicted  observed  ratio")
        for b in bins:
            ratio = b.mean_predicted / b.observed if b.observed else float("inf")
            print(f"{b.index:3d}  {b.count:5d}  {b.mean_predicted:14.5f}  {b.observed:8.5f}  {ratio:5.2f}")


if __name__ == "__main__":
    main()
