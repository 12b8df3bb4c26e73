"""Profile stage - per-layer segment influence of the answer rows."""

from pathlib import Path
from typing import Any, Dict

import torch

from services.segment_attention import influence_rates, profile_report
from stages.base_stage import BaseStage
from stages.schemas import ProfileInput, ProfileOutput


class ProfileStage(BaseStage):
    """Measure how much the answer rows read the system, image and user segments."""

    def __init__(self, answer_tokens: int = 1):
        super().__init__("profile")
        self.answer_tokens = answer_tokens

    def execute(self, input_data: Dict[str, Any]) -> Dict[str, Any]:
        """Capture attention on the greedy answer and write the influence table.

        Args:
            input_data: Must contain 'model', 'prompt' and 'output_dir'.

        Returns:
            Dictionary following ``ProfileOutput``.
        """
        profile_input = ProfileInput(**input_data)
        model, prompt = profile_input.model, profile_input.prompt

        answer_ids = model.greedy_decode(prompt, self.answer_tokens)
        with torch.no_grad():
            seq, layout = model.embed_multimodal(prompt, answer_ids[:-1])
            _, record = model.forward_with_capture(seq, layout)

        profile = influence_rates(record, layout, first_answer_only=profile_input.first_answer_only)
        report = profile_report(profile, Path(profile_input.output_dir) / "profile", profile_input.threshold)
        self.logger.info(
            f"Image share per layer: {[round(s, 4) for s in profile.image_shares]}; "
            f"flagged layer {report.flagged_layer}"
        )

        output = ProfileOutput(
            answer_ids=answer_ids,
            shares=[shares.model_dump() for shares in profile.layers],
            flagged_layer=report.flagged_layer,
            last_layer_rise=report.last_layer_rise,
            files=[report.csv_path, report.image_path],
        )
        return output.model_dump()
