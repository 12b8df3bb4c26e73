"""Pydantic schemas for the run config and stage input/output contracts."""

from pathlib import Path
from typing import Any, Dict, List

import yaml
from pydantic import BaseModel, ConfigDict, Field, InstanceOf, model_validator

from config.settings import Settings
from services.cliff_analysis import Metric
from services.errors import ContractError
from services.layout import MultimodalInput
from services.mini_lvlm import HookPoint, MiniLVLM, ModelConfig
from services.synthetic_tasks import SyntheticTask, TaskKind
from services.training import TrainingParams
from services.truncation import ScoreRowMode, TruncationMode

RUN_CONFIG_FILE = "run_config.yaml"


class CamSection(BaseModel):
    """Saliency settings of an ``analyze`` run."""

    layers: List[int] | None = Field(None, description="1-based layers to explain; default all")
    noise_s: float = Field(default=0.0, ge=0.0)
    n_samples: int = Field(default=1, ge=1)
    hook_point: HookPoint = HookPoint.POST_ATTENTION_NORM
    answer_tokens: int = Field(default=1, ge=1)


class TruncationSection(BaseModel):
    layer: int = Field(default=1, ge=1)
    k: int = Field(default=0, ge=0)
    score_row_mode: ScoreRowMode = ScoreRowMode.LAST_IMAGE
    mode: TruncationMode = TruncationMode.REMOVE
    max_new: int = Field(default=1, ge=1)
    sweep: bool = False


class CliffSection(BaseModel):
    tasks: List[TaskKind] = Field(default_factory=list)
    epsilon: float = Field(default=0.0, ge=0.0)
    metric: Metric = Metric.ACCURACY
    threshold: float | None = Field(None, ge=0.0, le=1.0)
    planted_layers: List[int] = Field(
        default_factory=list, description="Also sweep replanted copies of the model"
    )
    n_instances: int = Field(default=64, ge=1)


class RunConfig(BaseModel):
    """Everything a CLI run depends on besides the checkpoint contents."""

    model_config = ConfigDict(extra="forbid")

    model: ModelConfig = Field(default_factory=ModelConfig)
    checkpoint: str | None = None
    task: SyntheticTask | None = None
    input_index: int = Field(default=0, ge=0)
    cam: CamSection = Field(default_factory=CamSection)
    truncation: TruncationSection = Field(default_factory=TruncationSection)
    cliff: CliffSection = Field(default_factory=CliffSection)
    training: TrainingParams = Field(default_factory=TrainingParams)
    seed: int = 0
    output_dir: str = "runs"

    @model_validator(mode="after")
    def _check_layers(self) -> "RunConfig":
        n_layers = self.model.n_layers
        for layer in self.cam.layers or []:
            if not 1 <= layer <= n_layers:
                raise ValueError(f"cam layer {layer} is outside 1..{n_layers}")
        for layer in self.cliff.planted_layers:
            if not 1 <= layer <= n_layers + 1:
                raise ValueError(f"planted layer {layer} is outside 1..{n_layers + 1}")
        return self

    def require_task(self) -> SyntheticTask:
        if self.task is None:
            raise ContractError("no task spec given (set 'task' in the config or pass --task)")
        return self.task

    def task_or_default(self) -> SyntheticTask:
        return self.task or SyntheticTask(kind=TaskKind.PATCH_LOOKUP, seed=self.seed)

    def echo(self) -> Dict[str, Any]:
        """Resolved config without the output directory."""
        return self.model_dump(mode="json", exclude={"output_dir"})


def _merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def load_run_config(
    path: str | Path | None = None,
    overrides: Dict[str, Any] | None = None,
    env: Settings | None = None,
) -> RunConfig:
    """Resolve a run config: YAML file < ``OUTPUT_DIR`` env < ``overrides``.

    Raises:
        FileNotFoundError: If ``path`` does not exist.
        pydantic.ValidationError: If the merged values are invalid.
    """
    data: Dict[str, Any] = {}
    if path is not None:
        with Path(path).open() as handle:
            data = yaml.safe_load(handle) or {}
        if not isinstance(data, dict):
            raise ContractError(f"{path} must contain a mapping at the top level")

    env = env or Settings()
    if "OUTPUT_DIR" in env.model_fields_set:
        data["output_dir"] = env.OUTPUT_DIR

    return RunConfig.model_validate(_merge(data, overrides or {}))


def echo_run_config(config: RunConfig, output_dir: str | Path) -> Path:
    path = Path(output_dir) / RUN_CONFIG_FILE
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(config.echo(), sort_keys=True))
    return path


# ----------------------------------------------------------------------
# Stage contracts
# ----------------------------------------------------------------------


class StageInput(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)


class ProfileInput(StageInput):
    """Input schema for the profile stage."""

    model: InstanceOf[MiniLVLM]
    prompt: InstanceOf[MultimodalInput]
    output_dir: str
    first_answer_only: bool = False
    threshold: float | None = None


class ProfileOutput(BaseModel):
    """Output schema for the profile stage."""

    answer_ids: List[int] = Field(..., description="Greedy answer used for the query rows")
    shares: List[Dict[str, float]] = Field(..., description="Per-layer segment shares")
    flagged_layer: int | None
    last_layer_rise: bool
    files: List[str]


class CamInput(StageInput):
    """Input schema for the saliency stage."""

    model: InstanceOf[MiniLVLM]
    prompt: InstanceOf[MultimodalInput]
    cam: CamSection
    seed: int = 0
    output_dir: str


class CamOutput(BaseModel):
    answer_ids: List[int]
    layers: List[int]
    zero_maps: List[int] = Field(..., description="Layers whose map is identically zero")
    files: List[str]


class TruncationInput(StageInput):
    model: InstanceOf[MiniLVLM]
    prompt: InstanceOf[MultimodalInput]
    truncation: TruncationSection
    output_dir: str


class TruncationOutput(BaseModel):
    baseline_answer: List[int]
    truncated_answer: List[int]
    max_logit_delta: float
    answer_changed: bool
    plan: Dict[str, Any]
    savings: Dict[str, Any]
    files: List[str]


class CliffInput(StageInput):
    model: InstanceOf[MiniLVLM]
    tasks: List[SyntheticTask] = Field(..., min_length=1)
    cliff: CliffSection
    output_dir: str


class CliffOutput(BaseModel):
    cliff_layers: Dict[str, int | None]
    files: List[str]
