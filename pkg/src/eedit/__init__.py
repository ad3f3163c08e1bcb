"""Mask-guided editing engine with spatial-locality token caching, offline
token index planning and inversion step skipping, on a synthetic latent model."""

from .bonus import BonusMap, BonusParams, build_bonus, l1_distance_field
from .cache import CacheStore, KindPolicy, Policy, RefreshSchedule, execute_module, flops_of, is_refresh_step
from .config import CliConfig, EditConfig, load_config
from .errors import (BadMagic, ConfigError, EEditError, FormatError, InconsistentFile, InvalidArgument,
                     StateError, Truncated, VersionMismatch)
from .grid import EditMask, TokenGrid, make_grid, rasterize_mask, rect_mask
from .pipeline import denoise, invert, run_edit, similarity_report
from .scoring import ModuleKind, ScoreState, Selection, compute_scores, partial_count, select_top
from .tensorfile import read_tensor, write_tensor
from .tip import IndexPlan, plan, read_plan, verify_equivalence, write_plan

__version__ = "0.1.0"
