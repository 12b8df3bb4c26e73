"""Analysis orchestrator - runs the analyze pipeline as a LangGraph workflow."""

import json
import logging
from pathlib import Path
from typing import Any, Dict, TypedDict

from langgraph.graph import END, StateGraph

from services.layout import MultimodalInput
from services.mini_lvlm import MiniLVLM
from services.synthetic_tasks import generate_task
from stages.cam_stage import CamStage
from stages.model_stage import ModelStage
from stages.profile_stage import ProfileStage
from stages.schemas import RunConfig, echo_run_config

logger = logging.getLogger(__name__)

SUMMARY_FILE = "summary.json"


class AnalysisState(TypedDict):
    """State schema for the analyze graph."""

    config: RunConfig
    model: MiniLVLM | None
    prompt: MultimodalInput | None
    profile: Dict[str, Any]
    cam: Dict[str, Any]
    summary_path: str | None


def _relative(paths: list[str], root: Path) -> list[str]:
    return [Path(p).relative_to(root).as_posix() for p in paths]


class AnalysisOrchestrator:
    """Load model and input, profile segment influence, explain with CAM, summarize."""

    def __init__(self):
        self.logger = logging.getLogger(__name__)
        self.model_stage = ModelStage()
        self.profile_stage = ProfileStage()
        self.cam_stage = CamStage()
        self.graph = self._build_graph()

    def _build_graph(self):
        """Build the LangGraph workflow.

        Returns:
            Compiled StateGraph.
        """
        workflow = StateGraph(AnalysisState)

        workflow.add_node("prepare", self._prepare_node)
        workflow.add_node("profile", self._profile_node)
        workflow.add_node("cam", self._cam_node)
        workflow.add_node("summarize", self._summarize_node)

        workflow.set_entry_point("prepare")
        workflow.add_edge("prepare", "profile")
        workflow.add_edge("profile", "cam")
        workflow.add_edge("cam", "summarize")
        workflow.add_edge("summarize", END)

        return workflow.compile()

    def run(self, config: RunConfig) -> Dict[str, Any]:
        """Run the analysis for ``config``.

        Returns:
            Final graph state.
        """
        initial_state: AnalysisState = {
            "config": config,
            "model": None,
            "prompt": None,
            "profile": {},
            "cam": {},
            "summary_path": None,
        }

        self.logger.info(f"Starting analysis into {config.output_dir}")
        final_state = dict(initial_state)
        for step_output in self.graph.stream(initial_state):
            for node_name, node_state in step_output.items():
                final_state.update(node_state)
                self.logger.debug(f"Node '{node_name}' completed")

        self.logger.info(f"Analysis completed; summary at {final_state['summary_path']}")
        return final_state

    def _prepare_node(self, state: AnalysisState) -> Dict[str, Any]:
        config = state["config"]
        model = self.model_stage.run(
            {"checkpoint": config.checkpoint, "model_spec": config.model}
        )["model"]

        task = config.task_or_default()
        batch = generate_task(task.model_copy(update={"n_instances": config.input_index + 1}), model.config)
        echo_run_config(config, config.output_dir)
        return {"model": model, "prompt": batch.prompt(config.input_index)}

    def _profile_node(self, state: AnalysisState) -> Dict[str, Any]:
        config = state["config"]
        self.profile_stage.answer_tokens = config.cam.answer_tokens
        profile = self.profile_stage.run(
            {"model": state["model"], "prompt": state["prompt"], "output_dir": config.output_dir}
        )
        return {"profile": profile}

    def _cam_node(self, state: AnalysisState) -> Dict[str, Any]:
        config = state["config"]
        cam = self.cam_stage.run(
            {
                "model": state["model"],
                "prompt": state["prompt"],
                "cam": config.cam,
                "seed": config.seed,
                "output_dir": config.output_dir,
            }
        )
        return {"cam": cam}

    def _summarize_node(self, state: AnalysisState) -> Dict[str, Any]:
        root = Path(state["config"].output_dir)
        profile, cam = state["profile"], state["cam"]
        summary = {
            "answer_ids": profile["answer_ids"],
            "influence": profile["shares"],
            "flagged_layer": profile["flagged_layer"],
            "last_layer_rise": profile["last_layer_rise"],
            "cam_layers": cam["layers"],
            "cam_zero_maps": cam["zero_maps"],
            "files": sorted(_relative(profile["files"] + cam["files"], root)),
        }
        path = root / SUMMARY_FILE
        path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        return {"summary_path": str(path)}
