"""Run configuration, loaded from JSON and validated with pydantic."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .bonus import BonusParams
from .cache import KindPolicy, Policy, RefreshSchedule
from .errors import ConfigError
from .grid import U64_MAX, EditMask, rect_mask


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class BonusConfig(_Strict):
    b: float = Field(2.0, gt=1.0)
    r: float = Field(0.5, gt=0.0, lt=1.0)
    K: int = Field(2, ge=0)

    def params(self) -> BonusParams:
        return BonusParams(self.b, self.r, self.K)


class PolicyConfig(_Strict):
    sa: Policy = Policy.TOKEN_WISE
    ca: Policy = Policy.FULL_OR_SKIP
    mlp: Policy = Policy.TOKEN_WISE

    def policy(self) -> KindPolicy:
        return KindPolicy(self.sa, self.ca, self.mlp)


class MaskConfig(_Strict):
    """Edit region: a token rectangle ``[top, left, bottom, right)`` or a mask file.

    With neither set the centre half of the grid is used. ``patch`` maps a
    pixel-level mask file onto tokens.
    """

    rect: Optional[tuple[int, int, int, int]] = None
    path: Optional[str] = None
    patch: int = Field(1, ge=1)

    @model_validator(mode="after")
    def _one_source(self):
        if self.rect is not None and self.path is not None:
            raise ValueError("give either rect or path, not both")
        return self


class VelocityConfig(_Strict):
    kind: Literal["linear_contraction", "constant"] = "linear_contraction"
    rate: float = Field(1.0, ge=0.0, le=8.0)
    value: float = 0.0


class EditConfig(_Strict):
    height: int = Field(16, ge=1)
    width: int = Field(16, ge=1)
    channels: int = Field(8, ge=1)
    prompt_len: int = Field(4, ge=0)
    layers: int = Field(4, ge=1)
    steps: int = Field(28, ge=1)
    skip_interval: int = Field(3, ge=1)
    bonus: BonusConfig = BonusConfig()
    ratio: float = Field(0.25, gt=0.0, le=1.0)
    gamma: float = Field(1.0, ge=0.0)
    seed: int = Field(0, ge=0, le=U64_MAX)
    refresh_interval: int = Field(4, ge=1)
    force_final_refresh: bool = True
    policies: PolicyConfig = PolicyConfig()
    mask: MaskConfig = MaskConfig()
    velocity: VelocityConfig = VelocityConfig()
    use_tip: bool = False

    @property
    def n_image(self) -> int:
        return self.height * self.width

    def schedule(self) -> RefreshSchedule:
        return RefreshSchedule.for_denoise(self.steps, self.refresh_interval, self.force_final_refresh)

    def replace(self, **changes) -> "EditConfig":
        data = self.model_dump()
        data.update(changes)
        return type(self).model_validate(data)


class CliConfig(EditConfig):
    input_path: Optional[str] = None
    output_path: Optional[str] = None
    report_path: Optional[str] = None
    plan_path: Optional[str] = None
    diagnostic: bool = False
    reference_run: bool = True


def default_rect(h: int, w: int) -> tuple[int, int, int, int]:
    top, left = h // 4, w // 4
    return top, left, max(top + 1, (3 * h + 3) // 4), max(left + 1, (3 * w + 3) // 4)


def resolve_mask(config: EditConfig, base_dir: Path | None = None) -> EditMask:
    from .tensorfile import read_mask

    m = config.mask
    if m.path is not None:
        path = Path(m.path)
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        try:
            mask = read_mask(path, m.patch)
        except FileNotFoundError:
            raise ConfigError(f"mask.path: file not found: {path}") from None
        if (mask.height, mask.width) != (config.height, config.width):
            raise ConfigError(f"mask.path: mask is {mask.height}x{mask.width}, "
                              f"grid is {config.height}x{config.width}")
        return mask
    rect = m.rect if m.rect is not None else default_rect(config.height, config.width)
    try:
        return rect_mask(config.height, config.width, *rect)
    except ValueError as e:
        raise ConfigError(f"mask.rect: {e}") from None


def format_validation_error(err: ValidationError) -> str:
    lines = []
    for item in err.errors():
        loc = ".".join(str(p) for p in item["loc"]) or "<root>"
        lines.append(f"{loc}: {item['msg']}")
    return "; ".join(lines)


def parse_config(data: dict, model: type[EditConfig] = CliConfig) -> EditConfig:
    try:
        return model.model_validate(data)
    except ValidationError as e:
        raise ConfigError(format_validation_error(e)) from None


def load_config(path, model: type[EditConfig] = CliConfig) -> EditConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON: {e}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return parse_config(data, model)
