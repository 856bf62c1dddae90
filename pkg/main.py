"""
Main - cfodds experiment pipeline and command-line entry point
Runs generate -> split -> train-vae -> train-fair -> evaluate -> report with checkpoints and a hashed manifest
"""

import argparse
import asyncio
import sys
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from dotenv import load_dotenv

from artifact_store import ArtifactStore
from cevae import (CevaeSpec, decode_cevae_checkpoint, encode_cevae_checkpoint, search_cevae)
from config_manager import ConfigManager, ExperimentConfig, derive_seed
from data_model import (Dataset, DatasetSplit, LabeledSample, estimate_group_marginals, generate_sem_dataset,
                        read_dataset, read_split, split_dataset, write_dataset, write_ground_truth, write_split)
from diffnet import NetworkParams, manifest_json
from error_handler import CfoddsError, ConfigurationError, get_error_handler
from fair_trainer import (PredictorHandle, decode_predictor_checkpoint, encode_predictor_checkpoint,
                          evaluation_bundles, read_ledger, select_models, train_baseline,
                          train_fair_predictor, write_ledger)
from fairness_metrics import BASELINE_LABEL, build_metrics_report, write_metrics_report
from performance_monitor import get_performance_monitor

DATASET_PATH = "data/dataset.jsonl"
GROUND_TRUTH_PATH = "data/ground_truth.jsonl"
SEM_CONFIG_PATH = "data/sem_config.json"
SPLIT_PATH = "data/split.json"
CEVAE_CHECKPOINT = "checkpoints/cevae"
CEVAE_TRACE_PATH = "checkpoints/cevae_trace.json"
BASELINE_CHECKPOINT = "checkpoints/baseline"
LEDGER_PATH = "ledger.csv"
EVALUATION_PATH = "eval/evaluation.json"
REPORT_DIR = "reports"
EFFECTIVE_CONFIG_PATH = "config.effective.json"

STAGES = ("generate", "split", "train-vae", "train-fair", "evaluate", "report")


class FairnessPipeline:
    """Stage runner over one output directory"""

    def __init__(self, config: ExperimentConfig, config_manager: ConfigManager):
        self.error_handler = get_error_handler()
        self.performance_monitor = get_performance_monitor()
        self.config = config
        self.config_manager = config_manager
        self.store = ArtifactStore(config.output_dir)
        self._stage_handlers: Dict[str, Callable] = {
            "generate": self.generate,
            "split": self.split,
            "train-vae": self.train_vae,
            "train-fair": self.train_fair,
            "evaluate": self.evaluate,
            "report": self.report,
        }

    async def initialize(self) -> None:
        await self.store.initialize()
        await self.store.write_text(EFFECTIVE_CONFIG_PATH, self.config_manager.config_digest_payload(), "config")
        self.error_handler.log_startup(f"Pipeline in {self.store.out_dir}")

    async def run_stages(self, stages: Sequence[str]) -> bool:
        """Run stages in order; the first failure is recorded in the manifest and stops the run"""
        for stage in stages:
            try:
                with self.performance_monitor.time_operation(f"stage:{stage}"):
                    details = await self._stage_handlers[stage]()
                self.error_handler.log_stage_event(stage, details)
            except Exception as e:
                self.error_handler.handle_exception(e, f"stage '{stage}'")
                self.error_handler.log_stage_event(stage, "failed", is_success=False)
                self.store.record_failure(stage, e)
                await self.store.save_manifest()
                return False
        await self.store.save_manifest(status="ok")
        return True

    async def shutdown(self) -> None:
        self.performance_monitor.log_summary()
        self.error_handler.log_shutdown("Pipeline")

    # ------------------------------------------------------------------
    # Loading helpers
    # ------------------------------------------------------------------

    def _load_dataset(self) -> Dataset:
        return read_dataset(self.store.require(DATASET_PATH, "generate"))

    def _load_split(self) -> DatasetSplit:
        return read_split(self.store.require(SPLIT_PATH, "split"))

    def _partition(self) -> Tuple[Dataset, Dict[str, List[LabeledSample]]]:
        dataset = self._load_dataset()
        split = self._load_split()
        return dataset, {
            "train": dataset.select(split.train),
            "validation": dataset.select(split.validation),
            "test": dataset.select(split.test),
        }

    async def _write_checkpoint(self, stem: str, manifest: Dict, payload: bytes, stage: str) -> str:
        await self.store.write_text(f"{stem}.json", manifest_json(manifest) + "\n", stage)
        await self.store.write_bytes(f"{stem}.bin", payload, stage)
        return stem

    async def _read_checkpoint(self, stem: str, producer: str) -> Tuple[Dict, bytes]:
        manifest = await self.store.read_json(f"{stem}.json", producer)
        payload = await self.store.read_bytes(f"{stem}.bin", producer)
        return manifest, payload

    async def _load_cevae(self) -> Tuple[CevaeSpec, NetworkParams]:
        return decode_cevae_checkpoint(*await self._read_checkpoint(CEVAE_CHECKPOINT, "train-vae"))

    async def _load_predictor(self, stem: str) -> PredictorHandle:
        return decode_predictor_checkpoint(*await self._read_checkpoint(stem, "train-fair"))

    # ------------------------------------------------------------------
    # Stages
    # ------------------------------------------------------------------

    async def generate(self) -> str:
        source = self.config.dataset
        if source.source == "synthetic":
            sem = self.config.sem_config()
            samples, truth = await asyncio.to_thread(generate_sem_dataset, sem, source.samples)
            dataset = Dataset(samples=samples, feature_dim=sem.feature_dim, group_count=sem.group_count)
            self.store.path(GROUND_TRUTH_PATH).parent.mkdir(parents=True, exist_ok=True)
            write_ground_truth(truth, self.store.path(GROUND_TRUTH_PATH))
            await self.store.register(GROUND_TRUTH_PATH, "generate")
            await self.store.write_json(SEM_CONFIG_PATH, sem.to_dict(), "generate")
        else:
            dataset = read_dataset(source.path)
            dataset.validate()

        self.store.path(DATASET_PATH).parent.mkdir(parents=True, exist_ok=True)
        write_dataset(dataset, self.store.path(DATASET_PATH))
        await self.store.register(DATASET_PATH, "generate")
        return f"{len(dataset)} samples (m={dataset.feature_dim}, K={dataset.group_count})"

    async def split(self) -> str:
        dataset = self._load_dataset()
        seed = derive_seed(self.config.seed, "split")
        fractions = self.config.split.fractions
        split = split_dataset(dataset.samples, fractions, seed)
        write_split(split, self.store.path(SPLIT_PATH), seed, fractions)
        await self.store.register(SPLIT_PATH, "split")
        train, validation, test = split.sizes()
        return f"train={train} validation={validation} test={test}"

    async def train_vae(self) -> str:
        dataset, parts = self._partition()
        section = self.config.cevae
        base_spec = section.spec(dataset.feature_dim, dataset.group_count)
        seed = derive_seed(self.config.seed, "train-vae")
        marginals = estimate_group_marginals(parts["train"], dataset.group_count).tolist()
        best, trials = await asyncio.to_thread(
            search_cevae, base_spec, section.search_space(), parts["train"], parts["validation"],
            section.search.iterations, section.epochs, seed, section.batch_size, section.patience)

        manifest, payload = encode_cevae_checkpoint(best.spec, best.params, seed, best.best_epoch,
                                                    extra={"learning_rate": best.learning_rate,
                                                           "val_loss": best.best_val_loss,
                                                           "group_marginals": marginals})
        await self._write_checkpoint(CEVAE_CHECKPOINT, manifest, payload, "train-vae")
        await self.store.write_json(CEVAE_TRACE_PATH, {
            "initial_val_loss": best.initial_val_loss,
            "best_epoch": best.best_epoch,
            "trials": len(trials),
            "group_marginals": marginals,
            "epochs": [{"epoch": r.epoch, "train_loss": r.train_loss, "val_loss": r.val_loss,
                        "val_elbo": r.val_elbo, **r.val_components} for r in best.trace],
        }, "train-vae")
        return (f"{len(trials)} trial(s); best val loss {best.best_val_loss:.6g} at epoch {best.best_epoch} "
                f"(initial {best.initial_val_loss:.6g})")

    async def train_fair(self) -> str:
        dataset, parts = self._partition()
        cevae_spec, cevae_params = await self._load_cevae()

        baseline_section = self.config.baseline
        baseline_seed = derive_seed(self.config.seed, "train-baseline")
        baseline = await asyncio.to_thread(
            train_baseline, baseline_section.search_space(), parts["train"], parts["validation"],
            dataset.feature_dim, dataset.group_count, baseline_seed, baseline_section.iterations,
            baseline_section.epochs, baseline_section.batch_size, baseline_section.patience)
        manifest, payload = encode_predictor_checkpoint(baseline.handle, baseline_seed, 0,
                                                        extra={"val_ce": baseline.val_ce})
        await self._write_checkpoint(BASELINE_CHECKPOINT, manifest, payload, "train-fair")

        fair_seed = derive_seed(self.config.seed, "train-fair")
        candidates = await asyncio.to_thread(train_fair_predictor, self.config.fair, cevae_spec, cevae_params,
                                             parts["train"], parts["validation"], fair_seed)
        for candidate in candidates:
            if candidate.failed:
                continue
            stem = f"checkpoints/fair_{candidate.point.index:03d}"
            manifest, payload = encode_predictor_checkpoint(candidate.handle, fair_seed, candidate.best_epoch,
                                                            extra={"grid_index": candidate.point.index})
            candidate.checkpoint_path = await self._write_checkpoint(stem, manifest, payload, "train-fair")

        write_ledger(candidates, self.store.path(LEDGER_PATH))
        await self.store.register(LEDGER_PATH, "train-fair")
        failed = sum(c.failed for c in candidates)
        return f"baseline val_ce={baseline.val_ce:.6g}; {len(candidates)} fair candidates ({failed} failed)"

    async def evaluate(self) -> str:
        candidates = read_ledger(self.store.require(LEDGER_PATH, "train-fair"))
        _, parts = self._partition()
        if not parts["test"]:
            raise ConfigurationError("The test split is empty; nothing to evaluate")
        cevae_spec, cevae_params = await self._load_cevae()
        baseline = await self._load_predictor(BASELINE_CHECKPOINT)

        models = [(BASELINE_LABEL, None, baseline)]
        selected = select_models(candidates)
        for candidate in selected:
            handle = await self._load_predictor(candidate.checkpoint_path)
            models.append((f"{candidate.point.clp_weight:g}", candidate.point.clp_weight, handle))

        bundles = evaluation_bundles(cevae_spec, cevae_params, parts["test"],
                                     derive_seed(self.config.seed, "evaluate"))
        report = await asyncio.to_thread(build_metrics_report, models, bundles, self.config.utility)
        evaluation = report.to_dict()
        evaluation["selected"] = [{"lambda_clp": c.point.clp_weight, "grid_index": c.point.index,
                                   "val_clp": c.val_clp, "checkpoint_path": c.checkpoint_path} for c in selected]
        await self.store.write_json(EVALUATION_PATH, evaluation, "evaluate")
        return f"{len(models)} models on {len(bundles)} test samples"

    async def report(self) -> str:
        evaluation = await self.store.read_json(EVALUATION_PATH, "evaluate")
        written = write_metrics_report(evaluation, self.store.path(REPORT_DIR))
        for path in written:
            await self.store.register(str(path.relative_to(self.store.out_dir)), "report")
        return f"{len(written)} report files in {self.store.path(REPORT_DIR)}"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cfodds", description="Counterfactually fair risk prediction pipeline")
    parser.add_argument("command", choices=STAGES + ("run",), help="stage to run, or 'run' for all of them")
    parser.add_argument("--config", default="config.json", help="experiment config (JSON)")
    parser.add_argument("--out", default=None, help="output directory (overrides output_dir)")
    parser.add_argument("--seed", type=int, default=None, help="master seed (overrides seed)")
    return parser


async def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main entry point; returns the process exit status"""
    load_dotenv()
    error_handler = get_error_handler()
    args = build_parser().parse_args(argv)

    config_manager = ConfigManager(args.config)
    try:
        config = await config_manager.initialize(seed=args.seed, output_dir=args.out)
    except CfoddsError as e:
        error_handler.handle_exception(e, f"loading {args.config}")
        return 2

    pipeline = FairnessPipeline(config, config_manager)
    try:
        await pipeline.initialize()
        stages = STAGES if args.command == "run" else (args.command,)
        ok = await pipeline.run_stages(stages)
    finally:
        await pipeline.shutdown()
    return 0 if ok else 1


if __name__ == "__main__":
    try:
        sys.exit(asyncio.run(main()))
    except KeyboardInterrupt:
        print("\n👋 Interrupted")
        sys.exit(130)
