from functools import lru_cache
from pathlib import Path
from typing import Any, Dict, List

import yaml
from pydantic import BaseModel, ConfigDict, Field

from levitwin.core.calibration import DetectionChain
from levitwin.core.errors import ConfigError
from levitwin.core.isolation import IsolationChain
from levitwin.core.model import ModeParams

CONFIG_DIR = Path(__file__).parent.parent / 'config'
SCENARIO_DIR = CONFIG_DIR / 'scenarios'


@lru_cache(maxsize=1)
def load_presets() -> Dict[str, Any]:
    """Load the named physical presets from YAML."""
    with open(CONFIG_DIR / 'presets.yaml', 'r') as f:
        return yaml.safe_load(f)


def mode_preset_data(name: str) -> Dict[str, Any]:
    modes = load_presets()['modes']
    if name not in modes:
        raise ConfigError(f"unknown mode preset '{name}', available: {', '.join(sorted(modes))}", field="preset")
    return dict(modes[name])


def mode_preset(name: str, **overrides: Any) -> ModeParams:
    data = mode_preset_data(name)
    data.update(overrides)
    return ModeParams.model_validate(data)


class ObservedPoint(BaseModel):
    """A measured operating point: the gain used and the mode temperature it reached."""

    model_config = ConfigDict(populate_by_name=True, frozen=True)

    gain: float = Field(..., gt=0)
    t_mode: float = Field(..., gt=0, alias="t_mode_k")
    a_rms: float = Field(..., gt=0, alias="a_rms_m")


def observed_preset(name: str) -> ObservedPoint:
    observed = load_presets()["observed"]
    if name not in observed:
        raise ConfigError(f"no observed operating point for '{name}', available: {', '.join(sorted(observed))}",
                          field="actuator_fit")
    return ObservedPoint.model_validate(observed[name])


def detection_chain_preset() -> DetectionChain:
    return DetectionChain.model_validate(load_presets()['detection_chain'])


def isolation_preset() -> IsolationChain:
    return IsolationChain.model_validate(load_presets()['isolation'])


def uncertainty_budget() -> Dict[str, float]:
    return dict(load_presets()['uncertainty_budget'])


def scenario_names() -> List[str]:
    return sorted(p.stem for p in SCENARIO_DIR.glob('*.yaml'))
