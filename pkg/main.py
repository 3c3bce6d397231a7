#!/usr/bin/env python3
"""
freshrec
Version: 1.0.0
Build Date: 2026-10-16

New-release album recommendation: CF embeddings, cold-start prediction,
dot-product retrieval, Thompson Sampling carousels and an offline simulator.
"""

import argparse
import logging
import os
import sys
import time
from typing import Optional, Sequence

import uvicorn

from config import APP_BUILD_DATE, APP_NAME, APP_VERSION, DAY, Settings, load_settings, setup_logging
from errors import FreshrecError
from handlers.api import create_app
from services.cf_trainer import EmbeddingStore, build_matrix, truncated_svd
from services.coldstart import FeatureBuilder, MlpModel, TrainParams, build_training_set, train
from services.logs import LogService
from services.scheduler import SchedulerService
from services.simulator import SimConfig, ab_compare, fit_world_models, generate_world, run_policy
from services.slate_service import EventLog, SlateService
from storage.catalog import Catalog
from storage.codec import encode_records
from storage.files import safe_write
from storage.models import Policy
from utils.formatters import format_lift_report, format_summary_table, format_tick_report

logger = logging.getLogger(__name__)

AB_PAIRS = ((Policy.EDITORIAL, Policy.COLD_START), (Policy.COLD_START, Policy.TS_COLD_START))


def _load_catalog(settings: Settings) -> Catalog:
    return Catalog.from_files(settings.catalog_file, settings.events_file)


def _build_service(settings: Settings, catalog: Catalog) -> SlateService:
    """Service with the persisted store, model and arm table installed when present."""
    service = SlateService(settings, catalog, event_log=EventLog(settings.display_log_file))
    if os.path.exists(settings.store_file) and os.path.exists(settings.model_file):
        store = EmbeddingStore.load(settings.store_file)
        model, builder = MlpModel.load(settings.model_file, settings.min_interactions)
        service.install_models(store, model, builder)
    else:
        logger.warning("No trained models in %s yet, only Editorial can serve", settings.data_dir)
    if os.path.exists(settings.arms_file):
        service.bandit.import_table(settings.arms_file)
    return service


def cmd_serve(settings: Settings, args: argparse.Namespace) -> int:
    catalog = _load_catalog(settings)
    service = _build_service(settings, catalog)
    log_service = LogService(settings)

    def retrain_job(now: int) -> None:
        service.retrain(now)
        service.store.save(settings.store_file)
        service.model.save(settings.model_file, service.predictor.builder)

    start = int(time.time())
    scheduler = SchedulerService()
    service.register_jobs(scheduler, start, retrain=False)
    scheduler.add_job("retrain", retrain_job, settings.retrain_period, start, run_immediately=False)
    scheduler.add_job(
        "export_arms",
        lambda now: service.bandit.export_table(settings.arms_file),
        settings.refresh_period,
        start,
        run_immediately=False,
    )
    scheduler.add_job("cleanup_logs", log_service.cleanup_old_logs, DAY, start)

    app = create_app(service, scheduler)
    logger.info("Serving on %s:%d", settings.http_host, settings.http_port)
    uvicorn.run(app, host=settings.http_host, port=settings.http_port, log_config=None)
    return 0


def cmd_ingest(settings: Settings, args: argparse.Namespace) -> int:
    catalog = _load_catalog(settings)
    rejected = 0
    for kind, path, load in (
        ("catalog", args.catalog, catalog.load_albums),
        ("events", args.events, catalog.ingest_events),
    ):
        if not path:
            continue
        result = load(path)
        for line_no, reason in result.rejected[:10]:
            print(f"{kind} line {line_no}: {reason}")
        print(f"{kind}: {result.accepted} accepted, {len(result.rejected)} rejected")
        rejected += len(result.rejected)
    os.makedirs(settings.data_dir, exist_ok=True)
    catalog.save(settings.catalog_file, settings.events_file)
    return 1 if rejected else 0


def cmd_train_cf(settings: Settings, args: argparse.Namespace) -> int:
    catalog = _load_catalog(settings)
    now = args.now if args.now is not None else int(time.time())
    window = settings.cf_window_days * DAY
    matrix = build_matrix(catalog.interaction_events(now - window, now), now, window, settings.like_weight)
    previous = EmbeddingStore.load(settings.store_file).version if os.path.exists(settings.store_file) else 0
    store = truncated_svd(
        matrix,
        settings.embedding_dim,
        n_iter=settings.svd_n_iter,
        seed=settings.svd_seed,
        oversampling=settings.svd_oversampling,
        version=previous + 1,
        trained_until=now,
    )
    os.makedirs(settings.data_dir, exist_ok=True)
    store.save(settings.store_file)
    print(f"store v{store.version}: {len(store.user_ids)} users x {len(store.album_ids)} albums, d={store.dim}")
    return 0


def cmd_train_coldstart(settings: Settings, args: argparse.Namespace) -> int:
    catalog = _load_catalog(settings)
    store = EmbeddingStore.load(settings.store_file)
    builder = FeatureBuilder(store.dim, catalog.genres(), settings.label_buckets, settings.min_interactions)
    dataset = build_training_set(catalog, store, builder, settings.usage_cutoffs_hours, as_of=args.now)
    model, report = train(
        dataset,
        TrainParams(
            lr=settings.learning_rate,
            epochs=settings.epochs,
            batch_size=settings.batch_size,
            seed=settings.train_seed,
            hidden=(settings.hidden_1, settings.hidden_2),
        ),
    )
    model.save(settings.model_file, builder)
    print(f"{report.n_examples} examples, loss {report.epoch_losses[0]:.5f} -> {report.final_loss:.5f}")
    return 0


def cmd_tick(settings: Settings, args: argparse.Namespace) -> int:
    catalog = _load_catalog(settings)
    service = _build_service(settings, catalog)
    report = service.scheduler_tick(args.now)
    service.bandit.export_table(settings.arms_file)
    print(format_tick_report(report, settings.tz))
    return 0


def cmd_simulate(settings: Settings, args: argparse.Namespace) -> int:
    config = SimConfig.from_settings(settings)
    world = generate_world(config, args.seed)
    models = fit_world_models(world)

    reports = [run_policy(world, policy, seed=args.seed, models=models) for policy in settings.sim_policies]
    records = [r for report in reports for r in report.to_records()]

    lifts = []
    if args.ab:
        seeds = [args.seed + i for i in range(settings.sim_seeds)]
        for a, b in AB_PAIRS:
            lift = ab_compare(world, a, b, seeds=seeds, models=models)
            lifts.append(lift)
            records.append(lift.to_record())

    if args.out:
        out_dir = os.path.dirname(os.path.abspath(args.out))
        os.makedirs(out_dir, exist_ok=True)
        safe_write(args.out, encode_records(records), keep_backup=False)
        logger.info("Metrics written to %s (%d records)", args.out, len(records))

    print(format_summary_table(reports))
    for lift in lifts:
        print()
        print(format_lift_report(lift))
    return 0


COMMANDS = {
    "serve": cmd_serve,
    "ingest": cmd_ingest,
    "train-cf": cmd_train_cf,
    "train-coldstart": cmd_train_coldstart,
    "tick": cmd_tick,
    "simulate": cmd_simulate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog=APP_NAME, description="New-release album recommendation")
    parser.add_argument("--version", action="version", version=f"{APP_NAME} {APP_VERSION} ({APP_BUILD_DATE})")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="key-value config file (dotenv syntax)")
        return p

    command("serve", "run the HTTP API with the refresh scheduler")

    ingest = command("ingest", "validate and append catalog/event files")
    ingest.add_argument("--events", help="line-delimited usage events")
    ingest.add_argument("--catalog", help="line-delimited album records")

    train_cf = command("train-cf", "factorize the last window of usage")
    train_cf.add_argument("--now", type=int, help="window end (epoch seconds)")

    train_cs = command("train-coldstart", "train the cold-start network on the current store")
    train_cs.add_argument("--now", type=int, help="ignore usage cutoffs after this time")

    tick = command("tick", "run one refresh at a given time")
    tick.add_argument("--now", type=int, required=True)

    simulate = command("simulate", "replay the policies on a synthetic world")
    simulate.add_argument("--seed", type=int, default=0)
    simulate.add_argument("--out", help="metrics file (JSON lines)")
    simulate.add_argument("--ab", action="store_true", help="also run the A/B comparisons")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        settings = load_settings(args.config)
    except ValueError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return 2

    setup_logging(settings, to_file=args.command == "serve")
    try:
        return COMMANDS[args.command](settings, args)
    except FreshrecError as e:
        logger.error("%s failed: %s", args.command, e, exc_info=True)
        return 1


if __name__ == "__main__":
    sys.exit(main())
