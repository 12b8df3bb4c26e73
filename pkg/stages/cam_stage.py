"""Saliency stage - smoothed CAM overlays for every requested layer."""

from pathlib import Path
from typing import Any, Dict

from services.llava_cam import CamConfig, average_maps, cam_samples, export_map_csv, overlay_export
from stages.base_stage import BaseStage
from stages.schemas import CamInput, CamOutput


class CamStage(BaseStage):
    """Explain the greedy answer with one smoothed CAM per layer."""

    def __init__(self):
        super().__init__("cam")

    def execute(self, input_data: Dict[str, Any]) -> Dict[str, Any]:
        """Write ``cam/layer_XX.ppm`` overlays and ``cam/layer_XX.csv`` maps.

        Args:
            input_data: Must contain 'model', 'prompt', 'cam' and 'output_dir'.

        Returns:
            Dictionary following ``CamOutput``.
        """
        cam_input = CamInput(**input_data)
        model, prompt, section = cam_input.model, cam_input.prompt, cam_input.cam
        layers = section.layers or list(range(1, model.config.n_layers + 1))
        output_dir = Path(cam_input.output_dir) / "cam"

        answer_ids = model.greedy_decode(prompt, section.answer_tokens)
        files, zero_maps = [], []
        for layer in layers:
            cfg = CamConfig(
                layer=layer,
                noise_s=section.noise_s,
                n_samples=section.n_samples,
                seed=cam_input.seed,
                hook_point=section.hook_point,
                answer_tokens=section.answer_tokens,
            )
            saliency = average_maps(cam_samples(model, prompt, cfg, answer_ids), model.config.patch_grid)
            if saliency.is_zero:
                zero_maps.append(layer)
            overlay = overlay_export(saliency, prompt.image, output_dir / f"layer_{layer:02d}.ppm")
            table = export_map_csv(saliency, output_dir / f"layer_{layer:02d}.csv")
            files.extend([str(overlay), str(table)])
            self.logger.debug(f"Wrote CAM for layer {layer}", extra={"layer": layer})

        if zero_maps:
            self.logger.warning(f"CAM maps are identically zero at layers {zero_maps}")

        output = CamOutput(answer_ids=answer_ids, layers=layers, zero_maps=zero_maps, files=files)
        return output.model_dump()
