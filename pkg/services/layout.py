"""Sequence layout: the system / image / user segments of a multimodal prompt.

Indices are 0-based Python positions. ``TokenLayout.one_based()`` gives the
1-based sets used in reports, where a 34-token system prefix followed by 576
image tokens puts the image at positions 35..610.
"""

from dataclasses import dataclass, field

import torch
from pydantic import BaseModel, ConfigDict, Field, computed_field

from services.errors import ContractError


class TokenLayout(BaseModel):
    """Partition of a prompt into contiguous system, image and user segments."""

    model_config = ConfigDict(frozen=True)

    n_sys: int = Field(..., ge=0)
    n_img: int = Field(..., ge=0)
    n_user: int = Field(..., ge=0)

    @computed_field
    @property
    def prompt_length(self) -> int:
        return self.n_sys + self.n_img + self.n_user

    @property
    def system(self) -> range:
        return range(0, self.n_sys)

    @property
    def image(self) -> range:
        return range(self.n_sys, self.n_sys + self.n_img)

    @property
    def user(self) -> range:
        return range(self.n_sys + self.n_img, self.prompt_length)

    @property
    def text(self) -> list[int]:
        """Every non-image prompt index, in order."""
        return [*self.system, *self.user]

    def segment_of(self, index: int) -> str:
        """Name of the segment holding ``index``."""
        if index in self.system:
            return "system"
        if index in self.image:
            return "image"
        if index in self.user:
            return "user"
        raise ContractError(f"index {index} lies outside the prompt of length {self.prompt_length}")

    def one_based(self) -> dict[str, range]:
        """Segment sets in 1-based positions."""
        return {
            "system": range(1, self.n_sys + 1),
            "image": range(self.n_sys + 1, self.n_sys + self.n_img + 1),
            "user": range(self.n_sys + self.n_img + 1, self.prompt_length + 1),
        }

    def image_mask(self, positions: torch.Tensor) -> torch.Tensor:
        """Boolean mask of ``positions`` that fall on image tokens."""
        return (positions >= self.n_sys) & (positions < self.n_sys + self.n_img)


@dataclass(frozen=True)
class MultimodalInput:
    """One prompt: system token ids, an H_p x W_p x C patch grid, user token ids."""

    system_tokens: list[int]
    image: torch.Tensor
    user_tokens: list[int] = field(default_factory=list)

    def __post_init__(self):
        if self.image.dim() != 3:
            raise ContractError(f"image must be an H x W x C grid, got shape {tuple(self.image.shape)}")

    @property
    def layout(self) -> TokenLayout:
        height, width, _ = self.image.shape
        return TokenLayout(
            n_sys=len(self.system_tokens), n_img=height * width, n_user=len(self.user_tokens)
        )

    def with_image(self, image: torch.Tensor) -> "MultimodalInput":
        """Copy of this input with a replaced patch grid."""
        return MultimodalInput(list(self.system_tokens), image, list(self.user_tokens))
