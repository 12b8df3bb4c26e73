"""Cliff stage - k=0 truncation sweeps per task, plus the taxonomy table."""

from pathlib import Path
from typing import Any, Dict

from services.cliff_analysis import (
    PLANT_IMAGE_FOCUS,
    PLANT_IMAGE_GAIN,
    replant,
    sweep_cliff,
    taxonomy_report,
    write_cliff_reports,
)
from stages.base_stage import BaseStage
from stages.schemas import CliffInput, CliffOutput


class CliffStage(BaseStage):
    """Locate the cliff layer for every task and model variant."""

    def __init__(self):
        super().__init__("cliff")

    def execute(self, input_data: Dict[str, Any]) -> Dict[str, Any]:
        """Sweep each task on the model and on each replanted copy.

        Args:
            input_data: Must contain 'model', 'tasks', 'cliff' and 'output_dir'.

        Returns:
            Dictionary following ``CliffOutput``; keys of ``cliff_layers`` are
            ``<variant>/<task>``.
        """
        cliff_input = CliffInput(**input_data)
        section = cliff_input.cliff

        variants = [("model", cliff_input.model)]
        for layer in section.planted_layers:
            planted = replant(cliff_input.model, layer, focus=PLANT_IMAGE_FOCUS, gain=PLANT_IMAGE_GAIN)
            variants.append((f"planted_L{layer}", planted))

        reports = []
        for label, model in variants:
            for task in cliff_input.tasks:
                reports.append(
                    sweep_cliff(
                        model,
                        task,
                        section.epsilon,
                        metric=section.metric,
                        threshold=section.threshold,
                        label=label,
                    )
                )

        taxonomy = None
        if len({task.kind for task in cliff_input.tasks}) >= 2:
            taxonomy = taxonomy_report(reports)
        else:
            self.logger.info("Single task kind; skipping the taxonomy table")

        files = write_cliff_reports(reports, taxonomy, Path(cliff_input.output_dir) / "cliff")
        cliff_layers = {f"{r.label}/{r.task.value}": r.cliff_layer for r in reports}
        self.logger.info(f"Detected cliff layers: {cliff_layers}")

        return CliffOutput(cliff_layers=cliff_layers, files=[str(f) for f in files]).model_dump()
