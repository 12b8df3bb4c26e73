"""Truncation stage - baseline vs. truncated inference and the savings estimate."""

import csv
import json
from pathlib import Path
from typing import Any, Dict

import torch

from services.cost_model import truncation_savings
from services.errors import ContractError
from services.layout import MultimodalInput
from services.mini_lvlm import MiniLVLM
from services.truncation import TruncationMode, TruncationPlan, TruncationResult, run_truncated
from stages.base_stage import BaseStage
from stages.schemas import TruncationInput, TruncationOutput

SWEEP_HEADER = (
    "layer",
    "k",
    "kept_tokens",
    "baseline_answer",
    "truncated_answer",
    "max_logit_delta",
    "attention_cost_ratio",
    "flop_ratio",
)


@torch.no_grad()
def _baseline(model: MiniLVLM, prompt: MultimodalInput, max_new: int) -> tuple[list[int], torch.Tensor]:
    answer = model.greedy_decode(prompt, max_new)
    seq, layout = model.embed_multimodal(prompt)
    return answer, model.forward(seq, layout)[-1]


def _compare(model, prompt, plan, baseline_row, max_new):
    result: TruncationResult = run_truncated(model, prompt, plan, max_new=max_new)
    layout = prompt.layout
    kept_tokens = layout.prompt_length if plan.mode is TruncationMode.MASK else len(result.plan.rebuilt_set)
    savings = truncation_savings(model.config, layout.prompt_length, kept_tokens, plan.layer)
    delta = float((result.logits[-1] - baseline_row).abs().max())
    return result, savings, delta


class TruncationStage(BaseStage):
    """Run one truncation plan (or a per-layer sweep of it) against the baseline."""

    def __init__(self):
        super().__init__("truncation")

    def execute(self, input_data: Dict[str, Any]) -> Dict[str, Any]:
        """Write ``truncation/report.json`` and, for sweeps, ``truncation/sweep.csv``.

        Args:
            input_data: Must contain 'model', 'prompt', 'truncation' and 'output_dir'.

        Returns:
            Dictionary following ``TruncationOutput``.

        Raises:
            ContractError: If the plan's layer is outside the model.
        """
        trunc_input = TruncationInput(**input_data)
        model, prompt, section = trunc_input.model, trunc_input.prompt, trunc_input.truncation
        if section.layer > model.config.n_layers:
            raise ContractError(f"truncation layer {section.layer} exceeds n_layers={model.config.n_layers}")
        output_dir = Path(trunc_input.output_dir) / "truncation"
        output_dir.mkdir(parents=True, exist_ok=True)

        baseline_answer, baseline_row = _baseline(model, prompt, section.max_new)
        plan = TruncationPlan(
            layer=section.layer, k=section.k, score_row_mode=section.score_row_mode, mode=section.mode
        )
        result, savings, delta = _compare(model, prompt, plan, baseline_row, section.max_new)
        self.logger.info(
            f"Layer {plan.layer}, k={plan.k}: answer {baseline_answer} -> {result.generated}, "
            f"max logit delta {delta:.3e}, attention cost ratio {savings.attention_cost_ratio:.4f}"
        )

        report = {
            "plan": json.loads(result.plan.to_json()),
            "rebuilt_set": result.plan.rebuilt_set,
            "baseline_answer": baseline_answer,
            "truncated_answer": result.generated,
            "max_logit_delta": delta,
            "savings": savings.model_dump(),
        }
        report_path = output_dir / "report.json"
        report_path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
        files = [str(report_path)]

        if section.sweep:
            files.append(str(self._sweep(model, prompt, plan, baseline_answer, baseline_row, section.max_new, output_dir)))

        output = TruncationOutput(
            baseline_answer=baseline_answer,
            truncated_answer=result.generated,
            max_logit_delta=delta,
            answer_changed=baseline_answer != result.generated,
            plan=report["plan"],
            savings=report["savings"],
            files=files,
        )
        return output.model_dump()

    def _sweep(self, model, prompt, plan, baseline_answer, baseline_row, max_new, output_dir: Path) -> Path:
        path = output_dir / "sweep.csv"
        with path.open("w", newline="") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(SWEEP_HEADER)
            for layer in range(1, model.config.n_layers + 1):
                layer_plan = plan.model_copy(update={"layer": layer})
                result, savings, delta = _compare(model, prompt, layer_plan, baseline_row, max_new)
                writer.writerow(
                    [
                        layer,
                        plan.k,
                        savings.kept_tokens,
                        " ".join(map(str, baseline_answer)),
                        " ".join(map(str, result.generated)),
                        repr(delta),
                        repr(savings.attention_cost_ratio),
                        repr(savings.flop_ratio),
                    ]
                )
        self.logger.info(f"Wrote {model.config.n_layers}-layer sweep to {path}")
        return path
