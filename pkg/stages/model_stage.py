"""Model stage - loads a checkpoint or builds a seeded model, optionally trains it."""

from typing import Any, Dict, List

from pydantic import BaseModel, ConfigDict, Field

from services.checkpoint import load_checkpoint
from services.mini_lvlm import MiniLVLM, ModelConfig
from services.synthetic_tasks import SyntheticTask
from services.training import TrainingParams, train_model
from stages.base_stage import BaseStage


class ModelInput(BaseModel):
    """Input schema for the model stage."""

    model_config = ConfigDict(protected_namespaces=())

    checkpoint: str | None = Field(None, description="Checkpoint to load; wins over model_spec")
    model_spec: ModelConfig = Field(default_factory=ModelConfig)
    train_tasks: List[SyntheticTask] = Field(default_factory=list)
    training: TrainingParams | None = None


class ModelStage(BaseStage):
    """Provide the model every other stage works on."""

    def __init__(self):
        super().__init__("model")

    def execute(self, input_data: Dict[str, Any]) -> Dict[str, Any]:
        """Load or build the model.

        Returns:
            Dictionary with 'model' and, after training, 'losses'.
        """
        model_input = ModelInput(**input_data)

        if model_input.checkpoint:
            model = load_checkpoint(model_input.checkpoint)
        else:
            model = MiniLVLM(model_input.model_spec)
            self.logger.info(f"Built seeded model with {model.parameter_count()} parameters")

        output: Dict[str, Any] = {"model": model}
        if model_input.train_tasks:
            params = model_input.training or TrainingParams()
            kinds = ", ".join(task.kind.value for task in model_input.train_tasks)
            self.logger.info(f"Training on {kinds} for {params.steps} steps")
            report = train_model(model, model_input.train_tasks, params)
            output["losses"] = report.losses
            output["text_only_steps"] = report.text_only_steps
        return output
